"""Tree-structured Parzen estimator."""

import math

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from fedtune.noise import BudgetExhausted
from fedtune.space import CATEGORICAL, FIXED, HpConfig, default_space
from fedtune.tuners.base import PER_CONFIG_CAP, TOTAL_ROUNDS, TunerMixin

GAMMA = 0.25
N_CANDIDATES = 24
N_MIN = 8
MIN_BANDWIDTH = 0.05
_SQRT_2PI = math.sqrt(2 * math.pi)


class _Density:
    """Per-dimension Parzen density with a uniform prior component of weight ``1 / (m + 1)``.

    Continuous dimensions use Gaussian kernels truncated to the dimension's
    bounds, in internal (log10 where applicable) coordinates; categorical
    dimensions use add-one smoothed frequencies.
    """

    def __init__(self, dim, values, min_bandwidth):
        self.dim = dim
        m = len(values)
        if dim.kind == CATEGORICAL:
            counts = np.array([sum(v == c for v in values) for c in dim.values], dtype=float)
            self.probs = (counts + 1.0) / (m + len(dim.values))
            return
        self.lo, self.hi = dim.low, dim.high
        mu = np.array([dim.to_internal(v) for v in values], dtype=float)
        scott = 1.06 * mu.std() * m ** (-0.2) if m > 1 else 0.0
        self.mu = mu
        self.sigma = max(scott, min_bandwidth * (self.hi - self.lo))
        self.a = (self.lo - mu) / self.sigma
        self.b = (self.hi - mu) / self.sigma
        self.mass = stats.norm.cdf(self.b) - stats.norm.cdf(self.a)

    def logpdf(self, values):
        """Log density at each of ``values`` (a sequence of raw dimension values)."""
        if self.dim.kind == CATEGORICAL:
            return np.log(self.probs[[self.dim.values.index(v) for v in values]])
        x = np.array([self.dim.to_internal(v) for v in values], dtype=float)
        z = (x[:, None] - self.mu[None, :]) / self.sigma
        kernels = np.exp(-0.5 * z**2) / (_SQRT_2PI * self.sigma * self.mass)
        prior = 1.0 / (self.hi - self.lo)
        return np.log((kernels.sum(axis=1) + prior) / (len(self.mu) + 1))

    def sample(self, size, rng):
        if self.dim.kind == CATEGORICAL:
            picks = rng.choice(len(self.dim.values), size=size, p=self.probs)
            return [self.dim.values[i] for i in picks]
        comp = rng.integers(len(self.mu) + 1, size=size)
        out = rng.uniform(self.lo, self.hi, size=size)
        kern = comp < len(self.mu)
        if kern.any():
            c = comp[kern]
            out[kern] = stats.truncnorm.rvs(
                self.a[c], self.b[c], loc=self.mu[c], scale=self.sigma, random_state=rng
            )
        return [self.dim.from_internal(x) for x in np.clip(out, self.lo, self.hi)]


class ParzenModel:
    """Good/bad densities l and g fitted to ``(config, score)`` history; lower score is better.

    The best ``max(1, ceil(gamma * n))`` observations (stable rank order) form
    the good set, the rest the bad set, so the split depends only on the order
    of the scores.
    """

    def __init__(self, space, configs, scores, gamma=GAMMA, min_bandwidth=MIN_BANDWIDTH):
        scores = np.asarray(scores, dtype=float)
        n = len(scores)
        if n < 2:
            raise ValueError("need at least two observations")
        self.space = space
        order = np.argsort(scores, kind="stable")
        self.n_good = min(max(1, math.ceil(gamma * n)), n - 1)
        good = [configs[i] for i in order[: self.n_good]]
        bad = [configs[i] for i in order[self.n_good :]]
        self.y_star = float(scores[order[self.n_good]])
        self.tuned = [d for d in space.dimensions if d.kind != FIXED]
        self.good = [_Density(d, [c[d.name] for c in good], min_bandwidth) for d in self.tuned]
        self.bad = [_Density(d, [c[d.name] for c in bad], min_bandwidth) for d in self.tuned]

    @staticmethod
    def _logpdf(densities, configs):
        configs = list(configs)
        return sum(dens.logpdf([c[dens.dim.name] for c in configs]) for dens in densities)

    def log_l(self, configs):
        return self._logpdf(self.good, configs)

    def log_g(self, configs):
        return self._logpdf(self.bad, configs)

    def sample_l(self, size, rng):
        columns = {dens.dim.name: dens.sample(size, rng) for dens in self.good}
        return [
            HpConfig({d.name: d.value if d.kind == FIXED else columns[d.name][i] for d in self.space.dimensions})
            for i in range(size)
        ]

    def suggest(self, n_candidates, rng):
        """Candidate drawn from l with the smallest g/l (first one on ties)."""
        candidates = self.sample_l(n_candidates, rng)
        ratio = self.log_g(candidates) - self.log_l(candidates)
        return candidates[int(np.argmin(ratio))]


def tpe_suggest(history, space, rng, gamma=GAMMA, n_candidates=N_CANDIDATES, n_min=N_MIN):
    """Next configuration given ``history`` of ``(config, score)`` pairs.

    Falls back to a uniform draw when there are fewer than ``n_min``
    observations or every score is identical.
    """
    history = list(history)
    scores = np.array([s for _, s in history], dtype=float)
    if len(history) < max(n_min, 2) or np.ptp(scores) == 0 or not np.all(np.isfinite(scores)):
        return space.sample(rng)
    model = ParzenModel(space, [c for c, _ in history], scores, gamma)
    return model.suggest(n_candidates, rng)


class TPE(TunerMixin, BaseEstimator):
    """Sequential model-based search: ``n_configs`` suggestions, each trained ``rounds`` rounds."""

    def __init__(
        self,
        space=None,
        n_configs=16,
        rounds=405,
        gamma=GAMMA,
        n_candidates=N_CANDIDATES,
        n_min=N_MIN,
        total_rounds=TOTAL_ROUNDS,
        max_rounds=PER_CONFIG_CAP,
        random_state=None,
    ):
        self.space = space
        self.n_configs = n_configs
        self.rounds = rounds
        self.gamma = gamma
        self.n_candidates = n_candidates
        self.n_min = n_min
        self.total_rounds = total_rounds
        self.max_rounds = max_rounds
        self.random_state = random_state

    def _run(self, evaluator, config_rng):
        space = self.space or default_space()
        if self.n_configs * self.rounds > evaluator.ledger.remaining:
            raise BudgetExhausted("n_configs x rounds exceeds the round budget")
        # The model consumes score values, so privacy is always per-evaluation release.
        evaluator.start_privacy(n_evaluations=self.n_configs, n_selections=1, mechanism="per_eval")
        for cid in range(self.n_configs):
            history = [(evaluator.configs[o.config_id], o.score) for o in evaluator.observations]
            config = tpe_suggest(history, space, config_rng, self.gamma, self.n_candidates, self.n_min)
            evaluator.register(cid, config)
            evaluator.train(cid, self.rounds)
            evaluator.observe(cid)
        self.selected_id_ = evaluator.select(evaluator.observations, 1)[0]
        return self
