"""Deterministic surrogate of the federated HP response surface.

Per-client error is a clipped quadratic bowl in the unit-scaled continuous
coordinates of the search space, multiplied by a fidelity factor that decays
with training rounds:

    clip01(base + sum_d curvature_d * (u_d - opt_kd)^2 + offset_k)
        * (floor + (1 - floor) * 2 ** (-rounds / halflife))

``opt_k`` is the shared optimum unless ``client_optimum`` gives client ``k``
its own, and ``client_curvature`` optionally rescales each client's bowl.
"""

from dataclasses import dataclass, replace

import numpy as np

from fedtune._rng import make_rng
from fedtune.federated import aggregate_error
from fedtune.space import SearchSpace


@dataclass(frozen=True)
class SurrogateResponse:
    space: SearchSpace
    optimum: np.ndarray
    curvature: np.ndarray
    per_client_offset: np.ndarray
    fidelity_halflife: float = 60.0
    base: float = 0.1
    floor: float = 0.5
    client_optimum: np.ndarray = None
    client_curvature: np.ndarray = None

    def __post_init__(self):
        ndim = len(self.space.continuous)
        for name in ("optimum", "curvature", "per_client_offset"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.optimum.shape != (ndim,) or self.curvature.shape != (ndim,):
            raise ValueError(f"optimum and curvature need shape ({ndim},)")
        if np.any(self.curvature <= 0) or self.fidelity_halflife <= 0:
            raise ValueError("curvature and fidelity_halflife must be positive")
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError("floor must lie in [0, 1]")
        n_val = len(self.per_client_offset)
        if self.client_optimum is not None:
            object.__setattr__(self, "client_optimum", np.asarray(self.client_optimum, dtype=float))
            if self.client_optimum.shape != (n_val, ndim):
                raise ValueError("client_optimum needs shape (n_val, n_continuous_dims)")
        if self.client_curvature is not None:
            object.__setattr__(self, "client_curvature", np.asarray(self.client_curvature, dtype=float))
            if self.client_curvature.shape != (n_val,) or np.any(self.client_curvature <= 0):
                raise ValueError("client_curvature needs n_val positive entries")

    @property
    def n_val(self):
        return len(self.per_client_offset)

    def fidelity_factor(self, rounds):
        return self.floor + (1.0 - self.floor) * 2.0 ** (-rounds / self.fidelity_halflife)

    def client_errors(self, config, rounds):
        """Errors of ``config`` after ``rounds`` rounds on every validation client."""
        u = self.space.to_unit(config)
        opt = self.optimum if self.client_optimum is None else self.client_optimum
        dist = np.atleast_2d((u - opt) ** 2) @ self.curvature
        if self.client_curvature is not None:
            dist = dist * self.client_curvature
        raw = np.clip(self.base + dist + self.per_client_offset, 0.0, 1.0)
        return raw * self.fidelity_factor(rounds)

    def shifted(self, delta):
        """Copy whose shared optimum (and any client optima) moves by ``delta`` in unit coordinates."""
        delta = np.asarray(delta, dtype=float)
        client_opt = None if self.client_optimum is None else self.client_optimum + delta
        return replace(self, optimum=self.optimum + delta, client_optimum=client_opt)

    def far_corner(self):
        """Copy whose optimum sits at the corner of the unit cube farthest from this one's."""
        return self.shifted(np.where(self.optimum > 0.5, 0.0, 1.0) - self.optimum)


def surrogate_error(response: SurrogateResponse, config, client_index, rounds):
    if not 0 <= client_index < response.n_val:
        raise IndexError(f"client_index {client_index} out of range for {response.n_val} clients")
    return float(response.client_errors(config, rounds)[client_index])


def make_surrogate(space, n_val=100, seed=0, heterogeneity=0.05, curvature=1.0, **kwargs):
    """Random bowl with its optimum inside the central [0.2, 0.8] box and Gaussian client offsets."""
    rng = make_rng(seed, 7)
    ndim = len(space.continuous)
    optimum = rng.uniform(0.2, 0.8, size=ndim)
    offsets = rng.normal(0.0, heterogeneity, size=n_val) if heterogeneity else np.zeros(n_val)
    return SurrogateResponse(space, optimum, np.full(ndim, float(curvature)), offsets, **kwargs)


def specialist_surrogate(space, n_val=100, seed=0, n_specialists=10, heterogeneity=0.05, specialist_width=4.0):
    """Population where a few clients prefer the opposite corner of the space.

    Configs near the specialists' optimum are poor on the majority but reach
    zero error on the specialists, which is the regime where sampling biased
    towards accurate clients misleads the tuner.
    """
    base = make_surrogate(space, n_val, seed, heterogeneity)
    rng = make_rng(seed, 8)
    specialists = rng.choice(n_val, size=n_specialists, replace=False)
    client_opt = np.tile(base.optimum, (n_val, 1))
    client_opt[specialists] = 1.0 - base.optimum
    offsets = base.per_client_offset.copy()
    offsets[specialists] = -(base.base + 0.25)
    curv = np.ones(n_val)
    curv[specialists] = 1.0 / specialist_width
    return replace(base, per_client_offset=offsets, client_optimum=client_opt, client_curvature=curv)


class SurrogateWorkload:
    """Tuner-facing adapter: a state is ``(config, rounds_trained)``; no randomness."""

    def __init__(self, response: SurrogateResponse, val_weights=None):
        self.response = response
        self._weights = np.ones(response.n_val) if val_weights is None else np.asarray(val_weights, float)

    @property
    def n_val(self):
        return self.response.n_val

    @property
    def val_weights(self):
        return self._weights

    def advance(self, config_id, config, state, rounds):
        done = 0 if state is None else state[1]
        return (config, done + rounds)

    def client_errors(self, state):
        config, rounds = state
        return self.response.client_errors(config, rounds)

    def full_error(self, config, rounds):
        return aggregate_error(self.response.client_errors(config, rounds), self._weights)
