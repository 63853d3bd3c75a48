"""Evaluation-noise models: client subsampling, data and systems heterogeneity, private release."""

import math
from dataclasses import dataclass, field

import numpy as np

from fedtune.federated import ClientDataset, aggregate_error

PRIVACY_MODES = ("off", "per_eval", "oneshot_topk")


class BudgetExhausted(RuntimeError):
    """Raised when a privacy or training-round budget would be overspent."""


@dataclass
class PrivacyBudget:
    """Basic-composition accountant for ``total`` equal-share queries of an ``epsilon`` budget.

    ``total`` is the number of evaluations M (per-evaluation release) or of
    selection rounds T (one-shot top-k). Every query spends ``epsilon / total``.
    """

    epsilon: float
    total: int
    spent: list = field(default_factory=list)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if int(self.total) < 1:
            raise ValueError("total number of queries must be >= 1")

    @property
    def consumed(self):
        return len(self.spent)

    @property
    def eps_per_query(self):
        return self.epsilon / self.total

    @property
    def epsilon_spent(self):
        return math.fsum(self.spent)

    def spend(self):
        if self.consumed >= self.total:
            raise BudgetExhausted(f"privacy budget exhausted after {self.total} queries")
        self.spent.append(self.eps_per_query)
        return self.eps_per_query


@dataclass(frozen=True)
class EvalPolicy:
    """How a configuration's score is measured on the validation clients.

    ``subsample`` is the number of clients per evaluation (``None`` = all).
    ``iid_p`` is applied once to the population (see :func:`repartition_iid`),
    not per evaluation. ``epsilon=None`` or ``inf`` disables privacy; a finite
    ``epsilon`` with no ``privacy_mode`` means per-evaluation release.
    """

    subsample: int = None
    bias_b: float = 0.0
    bias_delta: float = 1e-4
    iid_p: float = 0.0
    epsilon: float = None
    privacy_mode: str = None

    def __post_init__(self):
        if self.privacy_mode is None:
            finite = self.epsilon is not None and math.isfinite(self.epsilon)
            object.__setattr__(self, "privacy_mode", "per_eval" if finite else "off")
        if self.subsample is not None and int(self.subsample) < 1:
            raise ValueError("subsample must be >= 1")
        if self.bias_b < 0:
            raise ValueError("bias_b must be non-negative")
        if not self.bias_delta > 0:
            raise ValueError("bias_delta must be positive")
        if not 0.0 <= self.iid_p <= 1.0:
            raise ValueError("iid_p must lie in [0, 1]")
        if self.privacy_mode not in PRIVACY_MODES:
            raise ValueError(f"privacy_mode must be one of {PRIVACY_MODES}")
        if self.private and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def private(self):
        return self.privacy_mode != "off" and self.epsilon is not None and math.isfinite(self.epsilon)

    def sample_size(self, n_val):
        if self.subsample is None:
            return n_val
        if self.subsample > n_val:
            raise ValueError(f"subsample {self.subsample} exceeds {n_val} validation clients")
        return int(self.subsample)

    @classmethod
    def from_dict(cls, d):
        """Build from harness config keys (``subsample``, ``bias_b``, ``bias_delta``, ``iid_p``, ``epsilon``, ``privacy_mode``)."""
        d = dict(d)
        sub = d.get("subsample")
        if sub in ("full", None):
            sub = None
        eps = d.get("epsilon")
        if eps in ("inf", None) or (isinstance(eps, float) and math.isinf(eps)):
            eps = None
        mode = d.get("privacy_mode", "off" if eps is None else "per_eval")
        return cls(
            subsample=None if sub is None else int(sub),
            bias_b=float(d.get("bias_b", 0.0)),
            bias_delta=float(d.get("bias_delta", 1e-4)),
            iid_p=float(d.get("iid_p", 0.0)),
            epsilon=None if eps is None else float(eps),
            privacy_mode=mode if eps is not None else "off",
        )

    def to_dict(self):
        return {
            "subsample": "full" if self.subsample is None else self.subsample,
            "bias_b": self.bias_b,
            "bias_delta": self.bias_delta,
            "iid_p": self.iid_p,
            "epsilon": "inf" if self.epsilon is None else self.epsilon,
            "privacy_mode": self.privacy_mode if self.private else "off",
        }


def subsample_uniform(n_val, s, rng):
    if not 1 <= s <= n_val:
        raise ValueError(f"need 1 <= s <= {n_val}, got {s}")
    return rng.choice(n_val, size=s, replace=False)


def bias_weights(accuracies, b, delta):
    w = (np.asarray(accuracies, dtype=float) + delta) ** b
    return w / w.sum()


def biased_sample(accuracies, b, delta, s, rng):
    """Draw ``s`` clients without replacement with probability proportional to ``(a + delta) ** b``.

    Draws are sequential; the remaining weights are renormalised after each pick.
    """
    accuracies = np.asarray(accuracies, dtype=float)
    n = len(accuracies)
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= {n}, got {s}")
    w = (accuracies + delta) ** b
    if s == n:
        return np.arange(n)
    chosen = np.empty(s, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for i in range(s):
        p = np.where(alive, w, 0.0)
        u = rng.random() * p.sum()
        k = min(int(np.searchsorted(np.cumsum(p), u, side="right")), n - 1)
        while not alive[k]:
            k -= 1
        chosen[i] = k
        alive[k] = False
    return chosen


def repartition_iid(val_clients, p, rng):
    """Replace a fraction ``p`` of each client's data with iid draws from the pooled validation set.

    Each client keeps ``round((1 - p) * n)`` of its own points (chosen uniformly)
    and fills the rest by sampling the pool with replacement, so client sizes
    are unchanged.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p == 0.0:
        return list(val_clients)
    pool_x = np.concatenate([c.features for c in val_clients])
    pool_y = np.concatenate([c.labels for c in val_clients])
    out = []
    for client in val_clients:
        keep = int(round((1.0 - p) * client.n))
        kept = rng.choice(client.n, size=keep, replace=False)
        fresh = rng.integers(len(pool_y), size=client.n - keep)
        out.append(
            ClientDataset(
                np.concatenate([client.features[kept], pool_x[fresh]]),
                np.concatenate([client.labels[kept], pool_y[fresh]]),
            )
        )
    return out


def laplace_scale_per_eval(n_evals, epsilon, s_size):
    """Noise scale ``M / (epsilon |S|)`` for M evaluations sharing ``epsilon``."""
    return n_evals / (epsilon * s_size)


def laplace_scale_topk(n_rounds, k, epsilon, s_size):
    """One-shot top-k noise scale ``2 T k / (epsilon |S|)``."""
    return 2.0 * n_rounds * k / (epsilon * s_size)


def private_release(value, sensitivity, eps_per_query, rng, budget: PrivacyBudget = None):
    """``value`` plus Laplace noise of scale ``sensitivity / eps_per_query``; never clipped."""
    if not eps_per_query > 0:
        raise ValueError("eps_per_query must be positive")
    if budget is not None:
        budget.spend()
    if math.isinf(eps_per_query):
        return float(value)
    return float(value + rng.laplace(0.0, sensitivity / eps_per_query))


def oneshot_topk(scores, k, n_rounds, epsilon, s_size, rng, budget: PrivacyBudget = None, return_noisy=False):
    """Indices of the ``k`` lowest scores after one draw of Laplace(2 T k / (eps |S|)) noise each.

    Ties in the noisy scores break towards the lower index.
    """
    scores = np.asarray(scores, dtype=float)
    if not 1 <= k <= len(scores):
        raise ValueError(f"need 1 <= k <= {len(scores)}, got {k}")
    if min(n_rounds, s_size) <= 0 or not epsilon > 0:
        raise ValueError("budget parameters must be positive")
    if budget is not None:
        budget.spend()
    if math.isinf(epsilon):
        noisy = scores.copy()
    else:
        noisy = scores + rng.laplace(0.0, laplace_scale_topk(n_rounds, k, epsilon, s_size), size=len(scores))
    top = np.argsort(noisy, kind="stable")[:k]
    return (top, noisy) if return_noisy else top


def sample_clients(client_errors, policy: EvalPolicy, rng):
    """Client indices for one evaluation; biased towards accurate clients when ``bias_b > 0``."""
    n = len(client_errors)
    s = policy.sample_size(n)
    if s == n:
        return np.arange(n)
    if policy.bias_b == 0:
        return subsample_uniform(n, s, rng)
    return biased_sample(1.0 - np.asarray(client_errors), policy.bias_b, policy.bias_delta, s, rng)


def subsampled_error(client_errors, weights, policy: EvalPolicy, rng):
    """Weighted error over the clients chosen by :func:`sample_clients`, before any privacy noise.

    Weights are forced to uniform whenever the policy is private so that the
    sensitivity stays ``1 / |S|``.
    """
    client_errors = np.asarray(client_errors, dtype=float)
    picked = sample_clients(client_errors, policy, rng)
    w = np.ones(len(picked)) if policy.private else np.asarray(weights, dtype=float)[picked]
    return aggregate_error(client_errors[picked], w), len(picked)


def noisy_evaluate(client_errors, weights, policy: EvalPolicy, rng, budget: PrivacyBudget = None):
    """One noisy score for a model whose per-client validation errors are ``client_errors``.

    With ``privacy_mode='per_eval'`` the score is released through the Laplace
    mechanism and charged to ``budget`` (which must then be given). In
    ``oneshot_topk`` mode privacy is applied at selection time instead, so the
    raw subsampled score is returned.
    """
    score, size = subsampled_error(client_errors, weights, policy, rng)
    if policy.private and policy.privacy_mode == "per_eval":
        if budget is None:
            raise ValueError("per-evaluation privacy needs a PrivacyBudget")
        return private_release(score, 1.0 / size, budget.eps_per_query, rng, budget)
    return score
