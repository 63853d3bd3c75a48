"""Budget accounting and the evaluation front-end shared by every tuner."""

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from fedtune._rng import make_rng
from fedtune.federated import aggregate_error
from fedtune.noise import (
    BudgetExhausted,
    EvalPolicy,
    PrivacyBudget,
    oneshot_topk,
    private_release,
    subsampled_error,
)

TOTAL_ROUNDS = 6480
PER_CONFIG_CAP = 405


@dataclass
class BudgetLedger:
    """Training rounds spent, in total and per configuration."""

    total_rounds: int = TOTAL_ROUNDS
    per_config_cap: int = PER_CONFIG_CAP
    consumed: int = 0
    per_config: dict = field(default_factory=dict)

    @property
    def remaining(self):
        return self.total_rounds - self.consumed

    def can_afford(self, config_id, rounds):
        return (
            self.consumed + rounds <= self.total_rounds
            and self.per_config.get(config_id, 0) + rounds <= self.per_config_cap
        )

    def charge(self, config_id, rounds):
        if rounds < 0:
            raise ValueError("cannot charge negative rounds")
        if self.per_config.get(config_id, 0) + rounds > self.per_config_cap:
            raise BudgetExhausted(f"config {config_id} would exceed {self.per_config_cap} rounds")
        if self.consumed + rounds > self.total_rounds:
            raise BudgetExhausted(f"round budget of {self.total_rounds} exhausted")
        self.per_config[config_id] = self.per_config.get(config_id, 0) + rounds
        self.consumed += rounds

    def check(self):
        """Assert the ledger invariants; returns ``self`` for chaining."""
        assert self.consumed == sum(self.per_config.values())
        assert self.consumed <= self.total_rounds
        assert all(0 <= v <= self.per_config_cap for v in self.per_config.values())
        return self


@dataclass
class Observation:
    config_id: int
    rounds: int
    score: float
    noisy: bool = False
    eps_spent: float = 0.0
    budget_used: int = 0
    full_error: Optional[float] = None

    def __post_init__(self):
        if self.rounds <= 0:
            raise ValueError("an observation needs rounds_trained > 0")

    def to_json(self):
        return json.dumps(asdict(self))


class Evaluator:
    """Trains configurations on a workload and scores them under an :class:`EvalPolicy`.

    ``workload`` is anything with ``advance(config_id, config, state, rounds)``,
    ``client_errors(state)``, ``n_val`` and ``val_weights`` (see
    :class:`fedtune.federated.FederatedWorkload`). Noise draws come from one
    sequential stream, ``rng``; privacy accounting is per evaluator, i.e. per
    tuning trial.
    """

    def __init__(self, workload, policy=None, rng=None, ledger=None):
        self.workload = workload
        self.policy = policy or EvalPolicy()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.ledger = ledger or BudgetLedger()
        self.configs = {}
        self.states = {}
        self.rounds = {}
        self.observations = []
        self.privacy = None
        self._mechanism = None
        self._errors = {}
        self._raw = {}

    # -- privacy ----------------------------------------------------------

    @property
    def mechanism(self):
        if not self.policy.private:
            return "off"
        return self._mechanism or self.policy.privacy_mode

    @property
    def sample_size(self):
        return self.policy.sample_size(self.workload.n_val)

    def start_privacy(self, n_evaluations, n_selections, mechanism=None):
        """Open the privacy ledger: M evaluations for ``per_eval``, T selections for ``oneshot_topk``.

        ``mechanism`` overrides the policy's choice for tuners that only
        support one of the two.
        """
        self._mechanism = mechanism
        if self.mechanism == "per_eval":
            self.privacy = PrivacyBudget(self.policy.epsilon, n_evaluations)
        elif self.mechanism == "oneshot_topk":
            self.privacy = PrivacyBudget(self.policy.epsilon, n_selections)
        return self.privacy

    @property
    def eps_spent(self):
        return 0.0 if self.privacy is None else self.privacy.epsilon_spent

    # -- training -----------------------------------------------------------

    def register(self, config_id, config):
        if config_id in self.configs:
            raise ValueError(f"config id {config_id} already registered")
        self.configs[config_id] = config
        self.rounds[config_id] = 0
        self.states[config_id] = None

    def train(self, config_id, to_rounds):
        """Warm-start ``config_id`` up to ``to_rounds`` cumulative rounds, paying only the increment."""
        extra = to_rounds - self.rounds[config_id]
        if extra < 0:
            raise ValueError("cannot train backwards")
        if extra == 0:
            return
        self.ledger.charge(config_id, extra)
        self.states[config_id] = self.workload.advance(
            config_id, self.configs[config_id], self.states[config_id], extra
        )
        self.rounds[config_id] = to_rounds

    def client_errors(self, config_id):
        key = (config_id, self.rounds[config_id])
        if key not in self._errors:
            self._errors[key] = np.asarray(self.workload.client_errors(self.states[config_id]), dtype=float)
        return self._errors[key]

    def full_error(self, config_id):
        """Noiseless weighted error over every validation client (reporting only; tuners never see it)."""
        return aggregate_error(self.client_errors(config_id), self.workload.val_weights)

    # -- scoring ----------------------------------------------------------

    def observe(self, config_id):
        """Evaluate ``config_id`` at its current fidelity and log an :class:`Observation`.

        Under ``per_eval`` privacy the returned score is already released
        through the Laplace mechanism. Under ``oneshot_topk`` the raw score is
        held back and only :meth:`select` may use it.
        """
        raw, size = subsampled_error(
            self.client_errors(config_id), self.workload.val_weights, self.policy, self.rng
        )
        if self.mechanism == "per_eval":
            score = private_release(raw, 1.0 / size, self.privacy.eps_per_query, self.rng, self.privacy)
        else:
            score = raw
        noisy = self.mechanism != "off" or size < self.workload.n_val or self.policy.bias_b > 0
        obs = Observation(
            config_id,
            self.rounds[config_id],
            score,
            noisy=noisy,
            eps_spent=self.eps_spent,
            budget_used=self.ledger.consumed,
            full_error=self.full_error(config_id),
        )
        self._raw[id(obs)] = raw
        self.observations.append(obs)
        return obs

    def select(self, observations, k):
        """Ids of the ``k`` best observations, privately under ``oneshot_topk``.

        Ties break towards the earlier observation. Under the one-shot
        mechanism each observation's ``score`` is overwritten with its noisy
        value so traces show what drove the ranking.
        """
        observations = list(observations)
        if self.mechanism == "oneshot_topk":
            raw = [self._raw[id(o)] for o in observations]
            top, noisy = oneshot_topk(
                raw, k, self.privacy.total, self.policy.epsilon, self.sample_size, self.rng,
                self.privacy, return_noisy=True,
            )
            for obs, value in zip(observations, noisy):
                obs.score = float(value)
                obs.eps_spent = self.eps_spent
            return [observations[i].config_id for i in top]
        order = np.argsort([o.score for o in observations], kind="stable")[:k]
        return [observations[i].config_id for i in order]


class TunerMixin:
    """Shared fitted-attribute plumbing for the tuner estimators.

    Subclasses implement ``_run(evaluator, config_rng)`` and set
    ``selected_id_``. ``fit`` takes a workload (the data) and an eval policy.
    """

    def _make_evaluator(self, workload, policy):
        seed = self.random_state if self.random_state is not None else 0
        ledger = BudgetLedger(self.total_rounds, self.max_rounds)
        return Evaluator(workload, policy, make_rng(seed, 1), ledger), make_rng(seed, 0)

    def fit(self, workload, policy=None):
        evaluator, config_rng = self._make_evaluator(workload, policy)
        self._run(evaluator, config_rng)
        self.evaluator_ = evaluator
        self.ledger_ = evaluator.ledger.check()
        self.observations_ = evaluator.observations
        self.best_config_id_ = self.selected_id_
        self.best_config_ = evaluator.configs[self.selected_id_]
        self.best_error_ = evaluator.full_error(self.selected_id_)
        self.eps_spent_ = evaluator.eps_spent
        return self

    def trace(self):
        return {
            "tuner": type(self).__name__,
            "params": {k: v for k, v in self.get_params().items() if k != "space"},
            "selected_id": int(self.best_config_id_),
            "selected_config": dict(self.best_config_),
            "full_error": self.best_error_,
            "rounds_consumed": self.ledger_.consumed,
            "eps_spent": self.eps_spent_,
            "observations": [asdict(o) for o in self.observations_],
            **getattr(self, "extra_trace_", {}),
        }


def argmin_observation(observations):
    """Earliest observation with the lowest score."""
    best = None
    for obs in observations:
        if best is None or obs.score < best.score:
            best = obs
    return best


def select_final(observations, evaluator):
    """Pick the config with the lowest observed score; report its noiseless full-validation error."""
    observations = list(observations)
    if not observations:
        raise ValueError("need at least one observation")
    best = argmin_observation(observations)
    return evaluator.configs[best.config_id], evaluator.full_error(best.config_id)
