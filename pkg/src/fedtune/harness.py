"""Experiment orchestration: config pools, bootstrap random search, policy sweeps, reports.

Result directory layout written by :func:`run`::

    spec.json               normalised experiment spec
    records/<hash>.jsonl    one TrialRecord per line, one file per grid point
    summary.csv             count/median/q1/q3 of the reported error per grid point
    curves.csv              best-so-far error vs. training rounds per grid point
"""

import csv
import itertools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fedtune._rng import derive_seed, make_rng, stable_hash
from fedtune.federated import FederatedWorkload, client_errors, generate_population, oracle_population, train
from fedtune.noise import EvalPolicy, repartition_iid
from fedtune.proxy import PopulationPair, oneshot_proxy_rs
from fedtune.space import default_space, nested_server_lr_space
from fedtune.surrogate import SurrogateWorkload, make_surrogate, specialist_surrogate
from fedtune.tuners import RandomSearch, make_tuner
from fedtune.tuners.base import TOTAL_ROUNDS

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

CHECKPOINTS = (5, 15, 45, 135, 405)
GRID_KEYS = ("subsample", "bias_b", "iid_p", "epsilon")
TUNER_NAMES = ("RS", "HB", "TPE", "BOHB", "proxy")


class SpecError(ValueError):
    """Invalid experiment specification."""


# --- config pools ------------------------------------------------------------


@dataclass
class ConfigPool:
    """Configs trained once, with model parameters and per-client errors cached at checkpoints.

    ``errors`` has shape ``(pool_size, len(checkpoints), n_val)``. ``params`` is
    ``None`` for the surrogate backend, whose errors are recomputed on demand.
    """

    configs: list
    checkpoints: tuple
    errors: np.ndarray
    val_weights: np.ndarray
    seed: int
    params: np.ndarray = None

    @property
    def size(self):
        return len(self.configs)

    def ckpt_index(self, rounds):
        try:
            return self.checkpoints.index(rounds)
        except ValueError:
            raise ValueError(f"{rounds} is not a cached checkpoint {self.checkpoints}") from None

    def full_errors(self, rounds=None):
        from fedtune.federated import aggregate_error

        j = -1 if rounds is None else self.ckpt_index(rounds)
        return np.array([aggregate_error(e, self.val_weights) for e in self.errors[:, j]])

    def with_val_errors(self, errors, val_weights):
        return ConfigPool(self.configs, self.checkpoints, errors, val_weights, self.seed, self.params)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "configs.jsonl", "w") as fh:
            for c in self.configs:
                fh.write(json.dumps(dict(c)) + "\n")
        arrays = {"errors": self.errors, "val_weights": self.val_weights,
                  "checkpoints": np.array(self.checkpoints), "seed": np.array(self.seed)}
        if self.params is not None:
            arrays["params"] = self.params
        np.savez(directory / "pool.npz", **arrays)

    @classmethod
    def load(cls, directory):
        from fedtune.space import HpConfig

        directory = Path(directory)
        with open(directory / "configs.jsonl") as fh:
            configs = [HpConfig.from_json(line) for line in fh if line.strip()]
        data = np.load(directory / "pool.npz")
        return cls(
            configs, tuple(int(c) for c in data["checkpoints"]), data["errors"], data["val_weights"],
            int(data["seed"]), data["params"] if "params" in data else None,
        )


def build_pool(workload, space, pool_size=128, seed=0, checkpoints=CHECKPOINTS):
    """Sample ``pool_size`` configs and cache every config's per-client errors at each checkpoint.

    Config ``i`` trains with the workload's stream keyed by config id ``i``,
    warm-starting from one checkpoint to the next.
    """
    rng = make_rng(seed, 0)
    configs = [space.sample(rng) for _ in range(pool_size)]
    errors = np.empty((pool_size, len(checkpoints), workload.n_val))
    params = None
    if isinstance(workload, FederatedWorkload):
        size = workload.population.dim * workload.population.n_classes + workload.population.n_classes
        params = np.empty((pool_size, len(checkpoints), size))
    for i, config in enumerate(configs):
        state, done = None, 0
        for j, r in enumerate(checkpoints):
            state = workload.advance(i, config, state, r - done)
            done = r
            errors[i, j] = workload.client_errors(state)
            if params is not None:
                params[i, j] = state.params
    return ConfigPool(configs, tuple(checkpoints), errors, np.asarray(workload.val_weights, float), seed, params)


def pool_on_population(pool: ConfigPool, population):
    """Recompute a federated pool's cached errors on another validation population (e.g. repartitioned)."""
    if pool.params is None:
        raise ValueError("pool has no cached parameters")
    errors = np.array(
        [[client_errors(p, population.val_clients, population.n_classes) for p in row] for row in pool.params]
    )
    return pool.with_val_errors(errors, population.val_weights)


class PoolWorkload:
    """Replays cached pool errors through the tuner interface; configs are addressed by pool id."""

    def __init__(self, pool: ConfigPool):
        self.pool = pool

    @property
    def n_val(self):
        return self.pool.errors.shape[2]

    @property
    def val_weights(self):
        return self.pool.val_weights

    def advance(self, config_id, config, state, rounds):
        done = 0 if state is None else state[1]
        return (config_id, done + rounds)

    def client_errors(self, state):
        config_id, rounds = state
        return self.pool.errors[config_id, self.pool.ckpt_index(rounds)]


# --- bootstrap random search ---------------------------------------------------


@dataclass
class TrialRecord:
    grid_point: dict
    trial: int
    seed: int
    chosen_id: int
    full_error: float
    rounds: int
    eps_spent: float
    best_available: float = None
    trace: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def _compact_trace(observations):
    return [[o.budget_used, o.rounds, o.score, o.full_error] for o in observations]


def bootstrap_rs(pool: ConfigPool, policy: EvalPolicy, n_configs=16, trials=100, seed=0, grid_point=None,
                 rounds=None, noise_seed=None):
    """Random search over ``n_configs`` pool configs resampled per trial.

    Each trial draws its configs without replacement from the pool, scores
    them under ``policy`` and records the noiseless full-validation error of
    its pick, along with the best error among the drawn configs.

    Config draws are keyed by ``(seed, trial)`` and evaluation noise by
    ``(noise_seed, trial)`` (``noise_seed`` defaults to ``seed``), so runs
    sharing ``seed`` under different policies see the same configs.
    """
    noise_seed = seed if noise_seed is None else noise_seed
    if pool.size < n_configs:
        raise ValueError("pool is smaller than n_configs")
    rounds = rounds or pool.checkpoints[-1]
    workload = PoolWorkload(pool)
    truth = pool.full_errors(rounds)
    records = []
    for t in range(trials):
        ids = make_rng(seed, t, 0).choice(pool.size, size=n_configs, replace=False)
        trial_seed = derive_seed(noise_seed, t, 1)
        rs = RandomSearch(
            n_configs=n_configs, rounds=rounds, configs=[pool.configs[i] for i in ids],
            config_ids=[int(i) for i in ids], random_state=trial_seed,
            total_rounds=max(TOTAL_ROUNDS, n_configs * rounds),
        ).fit(workload, policy)
        records.append(
            TrialRecord(
                dict(grid_point or {}), t, trial_seed, int(rs.best_config_id_), rs.best_error_,
                rs.ledger_.consumed, rs.eps_spent_, float(truth[ids].min()), _compact_trace(rs.observations_),
            )
        )
    return records


# --- curves and summaries -----------------------------------------------------------


def _pick(trace_prefix):
    """The tuner's current choice: best released score so far, earliest on ties."""
    best = None
    for row in trace_prefix:
        if best is None or row[2] < best[2]:
            best = row
    return best


def budget_curve(traces, budget_points):
    """Per-trial error of the current choice at each budget point; NaN before the first observation.

    ``traces`` are compact traces ``[budget_used, rounds, score, full_error]``
    in observation order. Returns an array of shape ``(n_traces, n_points)``.
    """
    out = np.full((len(traces), len(budget_points)), np.nan)
    for i, trace in enumerate(traces):
        for j, b in enumerate(budget_points):
            prefix = [row for row in trace if row[0] <= b]
            if prefix:
                out[i, j] = _pick(prefix)[3]
    return out


def quantiles(values):
    values = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"count": int(values.size), "median": float(med), "q1": float(q1), "q3": float(q3)}


def summarize(records, keys=GRID_KEYS, value="full_error"):
    """Rows of ``keys`` + count/median/q1/q3 (linear-interpolation quantiles), grouped by ``keys``."""
    groups = {}
    for rec in records:
        point = rec.grid_point if isinstance(rec, TrialRecord) else rec["grid_point"]
        val = getattr(rec, value) if isinstance(rec, TrialRecord) else rec[value]
        groups.setdefault(tuple(point.get(k) for k in keys), []).append(val)
    rows = []
    for key, vals in groups.items():
        if vals:
            rows.append({**dict(zip(keys, key)), **quantiles(vals)})
    return rows


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# --- experiment spec ---------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """Everything :func:`run` needs; the result directory is a pure function of it.

    ``grid`` maps ``subsample``/``bias_b``/``iid_p``/``epsilon`` to value lists
    (``"full"`` and ``"inf"`` allowed); the run covers their Cartesian product.
    """

    backend: str = "fedtrain"
    workload: dict = field(default_factory=dict)
    space: dict = field(default_factory=lambda: {"kind": "default"})
    tuner: str = "RS"
    grid: dict = field(default_factory=lambda: {"subsample": ["full"]})
    privacy_mode: str = "auto"
    bias_delta: float = 1e-4
    trials: int = 100
    pool_size: int = 128
    k: int = 16
    rounds: int = 405
    clients_per_round: int = 10
    proxy: dict = field(default_factory=dict)
    master_seed: int = 0

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        spec = cls(**d)
        try:
            spec.validate()
        except TypeError as exc:
            raise SpecError(f"malformed spec: {exc}") from exc
        return spec

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        text = path.read_bytes()
        try:
            data = tomllib.loads(text.decode()) if path.suffix == ".toml" else json.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise SpecError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.backend not in ("fedtrain", "surrogate"):
            raise SpecError(f"backend must be 'fedtrain' or 'surrogate', got {self.backend!r}")
        if self.tuner not in TUNER_NAMES:
            raise SpecError(f"tuner must be one of {TUNER_NAMES}, got {self.tuner!r}")
        if not isinstance(self.grid, dict) or not self.grid:
            raise SpecError("policy grid is empty")
        bad = set(self.grid) - set(GRID_KEYS)
        if bad:
            raise SpecError(f"unknown grid keys {sorted(bad)}")
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise SpecError(f"grid[{key!r}] must be a non-empty list")
        if self.privacy_mode not in ("auto", "per_eval", "oneshot_topk", "off"):
            raise SpecError(f"bad privacy_mode {self.privacy_mode!r}")
        if self.trials < 1 or self.k < 1:
            raise SpecError("trials and k must be >= 1")
        if self.tuner == "RS" and self.pool_size < self.k:
            raise SpecError("pool_size must be >= k")
        if self.space.get("kind", "default") not in ("default", "nested"):
            raise SpecError("space kind must be 'default' or 'nested'")
        try:
            self.policies()
            self.search_space()
        except ValueError as exc:
            raise SpecError(str(exc)) from exc

    def search_space(self):
        if self.space.get("kind", "default") == "nested":
            return nested_server_lr_space(self.space.get("width"), self.space.get("center_exp", -3.0))
        return default_space()

    def grid_points(self):
        keys = [k for k in GRID_KEYS if k in self.grid]
        points = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            point = {"subsample": "full", "bias_b": 0.0, "iid_p": 0.0, "epsilon": "inf"}
            point.update(dict(zip(keys, combo)))
            points.append(point)
        return points

    def policy_for(self, point):
        mode = self.privacy_mode
        if mode == "auto":
            mode = "oneshot_topk" if self.tuner in ("HB", "BOHB") else "per_eval"
        return EvalPolicy.from_dict({**point, "bias_delta": self.bias_delta, "privacy_mode": mode})

    def policies(self):
        return [self.policy_for(p) for p in self.grid_points()]


def point_hash(spec: ExperimentSpec, point):
    body = {k: v for k, v in spec.to_dict().items() if k != "grid"}
    return f"{stable_hash({'spec': body, 'point': point}):016x}"


# --- workloads from a spec ----------------------------------------------------------------


def build_population(spec: ExperimentSpec):
    params = dict(spec.workload)
    params.setdefault("seed", spec.master_seed)
    return oracle_population(**params)


def build_surrogate(spec: ExperimentSpec, space):
    params = dict(spec.workload)
    kind = params.pop("kind", "basic")
    params.setdefault("seed", spec.master_seed)
    if kind == "specialist":
        return specialist_surrogate(space, **params)
    if kind != "basic":
        raise SpecError(f"unknown surrogate kind {kind!r}")
    return make_surrogate(space, **params)


def repartition_surrogate(response, p):
    """Surrogate analogue of iid repartitioning: client-specific structure shrinks by ``1 - p``."""
    from dataclasses import replace

    client_opt = response.client_optimum
    if client_opt is not None:
        client_opt = (1 - p) * client_opt + p * response.optimum
    curv = response.client_curvature
    if curv is not None:
        curv = (1 - p) * curv + p
    return replace(response, per_client_offset=(1 - p) * response.per_client_offset,
                   client_optimum=client_opt, client_curvature=curv)


def _validate_subsample(spec, n_val):
    for point in spec.grid_points():
        s = point["subsample"]
        if s != "full" and not 1 <= int(s) <= n_val:
            raise SpecError(f"subsample {s} outside [1, {n_val}]")


class _Context:
    """Lazily built, per-run shared objects (population, pool, repartitioned views)."""

    def __init__(self, spec: ExperimentSpec, out_dir=None):
        self.spec = spec
        self.space = spec.search_space()
        self.out_dir = None if out_dir is None else Path(out_dir)
        self._cache = {}
        if spec.backend == "fedtrain":
            self.population = build_population(spec)
            self.response = None
            n_val = self.population.n_val
        else:
            self.population = None
            self.response = build_surrogate(spec, self.space)
            n_val = self.response.n_val
        _validate_subsample(spec, n_val)

    def population_at(self, p):
        key = ("pop", p)
        if key not in self._cache:
            if p == 0:
                self._cache[key] = self.population
            else:
                rng = make_rng(self.spec.master_seed, "iid", int(round(p * 1e6)))
                self._cache[key] = self.population.with_val_clients(
                    repartition_iid(self.population.val_clients, p, rng)
                )
        return self._cache[key]

    def response_at(self, p):
        return self.response if p == 0 else repartition_surrogate(self.response, p)

    def workload(self, p, train_seed):
        if self.spec.backend == "fedtrain":
            return FederatedWorkload(self.population_at(p), self.spec.clients_per_round, train_seed)
        return SurrogateWorkload(self.response_at(p))

    def pool(self):
        if "pool" not in self._cache:
            cached = None
            if self.out_dir is not None:
                pool_dir = self.out_dir / "pool"
                if (pool_dir / "pool.npz").exists():
                    cached = ConfigPool.load(pool_dir)
            if cached is None:
                seed = derive_seed(self.spec.master_seed, "pool")
                cached = build_pool(self.workload(0.0, seed), self.space, self.spec.pool_size, seed,
                                    _checkpoints(self.spec.rounds))
                if self.out_dir is not None:
                    cached.save(self.out_dir / "pool")
            self._cache["pool"] = cached
        return self._cache["pool"]

    def pool_at(self, p):
        key = ("pool", p)
        if key not in self._cache:
            pool = self.pool()
            if p == 0:
                view = pool
            elif self.spec.backend == "fedtrain":
                view = pool_on_population(pool, self.population_at(p))
            else:
                work = SurrogateWorkload(self.response_at(p))
                errors = np.array([[work.client_errors((c, r)) for r in pool.checkpoints] for c in pool.configs])
                view = pool.with_val_errors(errors, work.val_weights)
            self._cache[key] = view
        return self._cache[key]


def _checkpoints(rounds):
    pts = [r for r in CHECKPOINTS if r < rounds]
    return tuple(pts + [rounds])


# --- running ----------------------------------------------------------------------


def run_point(ctx: _Context, point):
    """All trials for one grid point."""
    spec = ctx.spec
    policy = spec.policy_for(point)
    p = float(point["iid_p"])
    phash = int(point_hash(spec, point), 16)
    if spec.tuner == "RS":
        # Config draws are shared across grid points (paired comparisons); noise is per point.
        return bootstrap_rs(ctx.pool_at(p), policy, spec.k, spec.trials, derive_seed(spec.master_seed, "bootstrap"),
                            point, spec.rounds, derive_seed(spec.master_seed, phash))
    records = []
    for t in range(spec.trials):
        # Training and config streams depend on the trial only, so grid points are paired.
        train_seed = derive_seed(spec.master_seed, "train", t)
        tuner_seed = derive_seed(spec.master_seed, "tuner", t)
        work = ctx.workload(p, train_seed)
        if spec.tuner == "proxy":
            proxy_work = _proxy_workload(ctx, train_seed)
            _, err, search = oneshot_proxy_rs(proxy_work, work, ctx.space, spec.k, spec.rounds, tuner_seed, policy)
            records.append(TrialRecord(dict(point), t, tuner_seed, int(search.best_config_id_), err,
                                       search.ledger_.consumed, 0.0, None, _compact_trace(search.observations_)))
            continue
        params = {"space": ctx.space, "random_state": tuner_seed}
        if spec.tuner in ("TPE",):
            params.update(n_configs=spec.k, rounds=spec.rounds)
        else:
            params.update(max_rounds=spec.rounds)
        tuner = make_tuner(spec.tuner, **params).fit(work, policy)
        records.append(TrialRecord(dict(point), t, tuner_seed, int(tuner.best_config_id_), tuner.best_error_,
                                   tuner.ledger_.consumed, tuner.eps_spent_, None,
                                   _compact_trace(tuner.observations_)))
    return records


def _proxy_workload(ctx, train_seed):
    spec = ctx.spec
    if spec.backend == "fedtrain":
        pair = PopulationPair({**ctx.population.descriptor}, spec.proxy.get("mismatch", {}),
                              spec.proxy.get("same_partition", False))
        return FederatedWorkload(pair.proxy(), spec.clients_per_round, train_seed + 1)
    return SurrogateWorkload(proxy_response(ctx.response, spec.proxy.get("optimum_shift", 0.0)))


def proxy_response(response, shift):
    """Proxy surrogate: optimum moved by a scalar ``shift`` per dimension, or to the ``"far_corner"``."""
    if shift == "far_corner":
        return response.far_corner()
    return response.shifted(np.full(len(response.optimum), float(shift)))


def run(spec: ExperimentSpec, out_dir):
    """Execute every grid point x trial, writing records, summary and curves under ``out_dir``.

    Grid points whose record file already exists are skipped, so an
    interrupted run resumes where it stopped. Record files are written to a
    temporary name and renamed once complete.
    """
    spec.validate()
    out = Path(out_dir)
    ctx = _Context(spec, out)
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    all_records = []
    for point in spec.grid_points():
        path = out / "records" / f"{point_hash(spec, point)}.jsonl"
        if path.exists():
            records = load_records(path)
        else:
            records = run_point(ctx, point)
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w") as fh:
                for rec in records:
                    fh.write(rec.to_json() + "\n")
            os.replace(tmp, path)
        all_records.extend(records)
    report(all_records, out)
    return out


def load_records(path):
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    records = []
    for f in files:
        with open(f) as fh:
            records.extend(TrialRecord.from_json(line) for line in fh if line.strip())
    return records


def report(records, out_dir, budget_points=None):
    """Write ``summary.csv`` and ``curves.csv`` for ``records`` into ``out_dir``."""
    out = Path(out_dir)
    rows = summarize(records)
    columns = list(GRID_KEYS) + ["count", "median", "q1", "q3"]
    write_csv(out / "summary.csv", rows, columns)
    if budget_points is None:
        budget_points = sorted({row[0] for rec in records for row in rec.trace})
    groups = {}
    for rec in records:
        groups.setdefault(tuple(rec.grid_point.get(k) for k in GRID_KEYS), []).append(rec.trace)
    curve_rows = []
    for key, traces in groups.items():
        curves = budget_curve(traces, budget_points)
        for j, b in enumerate(budget_points):
            col = curves[:, j]
            col = col[~np.isnan(col)]
            if col.size:
                curve_rows.append({**dict(zip(GRID_KEYS, key)), "budget": b, **quantiles(col)})
    write_csv(out / "curves.csv", curve_rows, list(GRID_KEYS) + ["budget", "count", "median", "q1", "q3"])
    return rows


def selection_is_best(record, tol=0.0):
    """Whether a bootstrap trial picked a config whose error equals the best available one."""
    return record.best_available is not None and record.full_error <= record.best_available + tol


def finite(x):
    return x is not None and math.isfinite(x)
