"""Hyperparameter search spaces for FedAdam server + SGD client tuning."""

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping, Sequence

import numpy as np

LOG_UNIFORM = "log-uniform"
UNIFORM = "uniform"
CATEGORICAL = "categorical"
FIXED = "fixed"
KINDS = (LOG_UNIFORM, UNIFORM, CATEGORICAL, FIXED)


@dataclass(frozen=True)
class Dimension:
    """One tunable (or pinned) hyperparameter.

    For ``log-uniform`` dimensions ``low``/``high`` are base-10 exponents and
    sampled values are stored exponentiated.
    """

    name: str
    kind: str
    low: float = None
    high: float = None
    values: tuple = ()
    value: Any = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if self.kind in (LOG_UNIFORM, UNIFORM):
            if self.low is None or self.high is None or not self.low < self.high:
                raise ValueError(f"{self.name}: need low < high, got [{self.low}, {self.high}]")
        elif self.kind == CATEGORICAL:
            object.__setattr__(self, "values", tuple(self.values))
            if len(self.values) < 1:
                raise ValueError(f"{self.name}: categorical dimension needs at least one value")
        elif self.value is None:
            raise ValueError(f"{self.name}: fixed dimension needs a value")

    @classmethod
    def log_uniform(cls, name, low_exp, high_exp):
        return cls(name, LOG_UNIFORM, low=float(low_exp), high=float(high_exp))

    @classmethod
    def uniform(cls, name, low, high):
        return cls(name, UNIFORM, low=float(low), high=float(high))

    @classmethod
    def categorical(cls, name, values):
        return cls(name, CATEGORICAL, values=tuple(values))

    @classmethod
    def fixed(cls, name, value):
        return cls(name, FIXED, value=value)

    @property
    def is_continuous(self):
        return self.kind in (LOG_UNIFORM, UNIFORM)

    def sample(self, rng):
        if self.kind == LOG_UNIFORM:
            return float(10.0 ** rng.uniform(self.low, self.high))
        if self.kind == UNIFORM:
            return float(rng.uniform(self.low, self.high))
        if self.kind == CATEGORICAL:
            return self.values[int(rng.integers(len(self.values)))]
        return self.value

    def to_internal(self, value):
        """Map a value into the coordinate the space is uniform in (log10 for log dims)."""
        if self.kind == LOG_UNIFORM:
            return math.log10(value)
        return value

    def from_internal(self, coord):
        if self.kind == LOG_UNIFORM:
            return float(10.0**coord)
        return float(coord)

    def contains(self, value):
        if self.kind in (LOG_UNIFORM, UNIFORM):
            try:
                coord = self.to_internal(float(value))
            except (TypeError, ValueError):
                return False
            # 1e-12 slack absorbs the log10/pow round trip.
            return self.low - 1e-12 <= coord <= self.high + 1e-12
        if self.kind == CATEGORICAL:
            return value in self.values
        return value == self.value


class HpConfig(Mapping):
    """Immutable name -> value mapping for one hyperparameter configuration."""

    __slots__ = ("_values",)

    def __init__(self, values=None, **kwargs):
        merged = dict(values or {})
        merged.update(kwargs)
        self._values = MappingProxyType(merged)

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __hash__(self):
        return hash(tuple(sorted(self._values.items())))

    def __eq__(self, other):
        if isinstance(other, Mapping):
            return dict(self._values) == dict(other)
        return NotImplemented

    def __reduce__(self):
        return (HpConfig, (dict(self._values),))

    def __repr__(self):
        body = ", ".join(f"{k}={v!r}" for k, v in self._values.items())
        return f"HpConfig({body})"

    def replace(self, **changes):
        return HpConfig({**self._values, **changes})

    def to_json(self):
        return json.dumps(dict(self._values), sort_keys=False)

    @classmethod
    def from_json(cls, line):
        return cls(json.loads(line))


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names in {names}")

    @property
    def names(self):
        return [d.name for d in self.dimensions]

    def dimension(self, name) -> Dimension:
        for dim in self.dimensions:
            if dim.name == name:
                return dim
        raise KeyError(name)

    def replace(self, dim: Dimension) -> "SearchSpace":
        """Return a copy with the same-named dimension swapped for ``dim``."""
        self.dimension(dim.name)
        return SearchSpace(tuple(dim if d.name == dim.name else d for d in self.dimensions))

    def sample(self, rng) -> HpConfig:
        return HpConfig({d.name: d.sample(rng) for d in self.dimensions})

    def validate(self, config: Mapping):
        """Raise ``ValueError`` unless ``config`` has exactly one in-range value per dimension."""
        if set(config) != set(self.names):
            raise ValueError(f"config keys {sorted(config)} != space dimensions {sorted(self.names)}")
        for dim in self.dimensions:
            if not dim.contains(config[dim.name]):
                raise ValueError(f"{dim.name}={config[dim.name]!r} outside {dim}")
        return config

    @property
    def continuous(self):
        return [d for d in self.dimensions if d.is_continuous]

    def to_unit(self, config: Mapping) -> np.ndarray:
        """Continuous dimensions of ``config`` rescaled to [0, 1] in internal coordinates."""
        return np.array(
            [(d.to_internal(config[d.name]) - d.low) / (d.high - d.low) for d in self.continuous]
        )


def default_space() -> SearchSpace:
    """The 9-dimension FedAdam/SGD space (5 tuned continuous HPs, batch size, 3 constants)."""
    return SearchSpace(
        (
            Dimension.log_uniform("server_lr", -6, -1),
            Dimension.uniform("beta1", 0.0, 0.9),
            Dimension.uniform("beta2", 0.0, 0.999),
            Dimension.fixed("lr_decay", 0.9999),
            Dimension.log_uniform("client_lr", -6, 0),
            Dimension.uniform("momentum", 0.0, 0.9),
            Dimension.fixed("weight_decay", 0.00005),
            Dimension.categorical("batch_size", (32, 64, 128)),
            Dimension.fixed("epochs", 1),
        )
    )


def nested_server_lr_space(width, center_exp=-3.0) -> SearchSpace:
    """Default space with the server learning rate restricted to ``width`` decades.

    The interval is centred (geometrically) on ``10 ** center_exp``. With
    ``center_exp=-4`` widths 1 and 4 give [1e-4.5, 1e-3.5] and [1e-6, 1e-2].
    """
    if width not in (1, 2, 3, 4) or isinstance(width, bool):
        raise ValueError(f"width must be one of 1, 2, 3, 4; got {width!r}")
    half = width / 2.0
    return default_space().replace(Dimension.log_uniform("server_lr", center_exp - half, center_exp + half))


def sample_config(space: SearchSpace, rng) -> HpConfig:
    return space.sample(rng)


def write_config_pool(path, configs: Sequence[Mapping]):
    with open(path, "w") as fh:
        for config in configs:
            fh.write(json.dumps(dict(config)) + "\n")


def read_config_pool(path, space: SearchSpace = None):
    configs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                config = HpConfig.from_json(line)
                if space is not None:
                    space.validate(config)
                configs.append(config)
    return configs
