import numpy as np
from sklearn.base import BaseEstimator

from fedtune.noise import BudgetExhausted
from fedtune.space import default_space
from fedtune.tuners.base import PER_CONFIG_CAP, TOTAL_ROUNDS, TunerMixin


class RandomSearch(TunerMixin, BaseEstimator):
    """Sample ``n_configs`` configurations, train each for ``rounds`` rounds, keep the best score.

    Passing ``configs`` (and optionally ``config_ids``) searches over that
    explicit list instead of sampling, which is how bootstrap trials replay a
    resampled pool.

    Examples
    --------
    >>> from fedtune.surrogate import SurrogateWorkload, make_surrogate
    >>> from fedtune.space import default_space
    >>> work = SurrogateWorkload(make_surrogate(default_space(), seed=1))
    >>> rs = RandomSearch(random_state=0).fit(work)
    >>> rs.ledger_.consumed
    6480
    """

    def __init__(
        self,
        space=None,
        n_configs=16,
        rounds=405,
        total_rounds=TOTAL_ROUNDS,
        max_rounds=PER_CONFIG_CAP,
        configs=None,
        config_ids=None,
        random_state=None,
    ):
        self.space = space
        self.n_configs = n_configs
        self.rounds = rounds
        self.total_rounds = total_rounds
        self.max_rounds = max_rounds
        self.configs = configs
        self.config_ids = config_ids
        self.random_state = random_state

    def _candidates(self, config_rng):
        if self.configs is not None:
            configs = list(self.configs)
            ids = list(self.config_ids) if self.config_ids is not None else list(range(len(configs)))
            if len(ids) != len(configs):
                raise ValueError("configs and config_ids differ in length")
            return ids, configs
        space = self.space or default_space()
        return list(range(self.n_configs)), [space.sample(config_rng) for _ in range(self.n_configs)]

    def _run(self, evaluator, config_rng):
        ids, configs = self._candidates(config_rng)
        if len(configs) < 1:
            raise ValueError("random search needs at least one configuration")
        if len(configs) * self.rounds > evaluator.ledger.remaining:
            raise BudgetExhausted(
                f"{len(configs)} configs x {self.rounds} rounds exceeds the {evaluator.ledger.remaining}-round budget"
            )
        evaluator.start_privacy(n_evaluations=len(configs), n_selections=1)
        for cid, config in zip(ids, configs):
            evaluator.register(cid, config)
            evaluator.train(cid, self.rounds)
            evaluator.observe(cid)
        self.selected_id_ = evaluator.select(evaluator.observations, 1)[0]
        return self


def rs_run(space, evaluator, n_configs=16, rounds=405, rng=None, configs=None, config_ids=None):
    """Functional form of :class:`RandomSearch` on a ready :class:`Evaluator`.

    Returns ``(best_config, observations)``.
    """
    rs = RandomSearch(space, n_configs, rounds, configs=configs, config_ids=config_ids)
    rs._run(evaluator, rng if rng is not None else np.random.default_rng())
    return evaluator.configs[rs.selected_id_], evaluator.observations
