"""Federated training and evaluation on synthetic Dirichlet-partitioned data.

The model is multinomial logistic regression trained with client SGD and a
FedAdam server. Parameters are one flat vector: a ``(dim, classes)`` weight
block followed by ``classes`` biases.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from fedtune._rng import make_rng

UNIFORM = "uniform"
WEIGHTED = "weighted"
ADAM_TAU = 1e-8


@dataclass(frozen=True)
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or len(features) != len(labels):
            raise ValueError("features must be (n, d) and labels (n,)")
        if len(labels) < 1:
            raise ValueError("a client needs at least one sample")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return len(self.labels)


@dataclass(frozen=True)
class ClientPopulation:
    train_clients: tuple
    val_clients: tuple
    n_classes: int
    weighting: str = WEIGHTED
    descriptor: dict = field(default=None, compare=False)

    def __post_init__(self):
        if self.weighting not in (UNIFORM, WEIGHTED):
            raise ValueError(f"weighting must be 'uniform' or 'weighted', got {self.weighting!r}")
        object.__setattr__(self, "train_clients", tuple(self.train_clients))
        object.__setattr__(self, "val_clients", tuple(self.val_clients))
        for client in self.train_clients + self.val_clients:
            if client.labels.max() >= self.n_classes:
                raise ValueError("label outside class range")

    @property
    def dim(self):
        return self.train_clients[0].features.shape[1]

    @property
    def n_train(self):
        return len(self.train_clients)

    @property
    def n_val(self):
        return len(self.val_clients)

    @property
    def val_weights(self):
        return _weights(self.val_clients, self.weighting)

    @property
    def train_weights(self):
        return _weights(self.train_clients, self.weighting)

    def with_val_clients(self, val_clients):
        return replace(self, val_clients=tuple(val_clients))

    def with_weighting(self, weighting):
        return replace(self, weighting=weighting)

    def to_json(self):
        """Descriptor from which the population can be regenerated; raw data is never written."""
        if self.descriptor is None:
            raise ValueError("population was not built by generate_population; nothing to persist")
        return json.dumps(self.descriptor, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return generate_population(**json.loads(text))


def _weights(clients, weighting):
    if weighting == UNIFORM:
        return np.ones(len(clients))
    return np.array([c.n for c in clients], dtype=float)


def make_prototypes(n_classes, dim, seed, scale=1.0, rotation=0.0):
    """Gaussian class means; ``rotation`` (radians) turns them in a seed-fixed random plane."""
    rng = make_rng(seed, 0)
    protos = rng.normal(0.0, scale, size=(n_classes, dim))
    if rotation:
        if dim < 2:
            raise ValueError("rotation needs dim >= 2")
        basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
        u, v = basis[:, 0], basis[:, 1]
        a, b = protos @ u, protos @ v
        c, s = np.cos(rotation), np.sin(rotation)
        protos = protos + np.outer(a * (c - 1) - b * s, u) + np.outer(a * s + b * (c - 1), v)
    return protos


def generate_population(
    n_train=400,
    n_val=100,
    n_classes=10,
    dim=10,
    alpha=0.1,
    samples_per_client=100,
    seed=0,
    task_seed=None,
    prototype_scale=1.0,
    rotation=0.0,
    size_spread=0.0,
    feature_shift=0.0,
    feature_scale_span=0.0,
    weighting=WEIGHTED,
):
    """Dirichlet(alpha) label-skewed clients around shared Gaussian class prototypes.

    ``task_seed`` (defaults to ``seed``) fixes the prototypes, so two populations
    with the same task but different ``seed`` are differently partitioned views
    of one task. ``size_spread`` draws client sizes uniformly from
    ``samples_per_client * [1 - spread, 1 + spread]``.

    ``feature_shift`` and ``feature_scale_span`` apply a task-wide affine map to
    the features: a random offset of that norm, then per-dimension scales
    log-spaced over ``feature_scale_span`` decades. Both make the logistic
    problem ill-conditioned, so reaching low error depends on the learning
    rates rather than on the direction of the first few steps.
    """
    if min(n_train, n_val, n_classes, dim, samples_per_client) < 1:
        raise ValueError("all counts must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0.0 <= size_spread < 1.0:
        raise ValueError("size_spread must be in [0, 1)")
    descriptor = dict(
        n_train=n_train, n_val=n_val, n_classes=n_classes, dim=dim, alpha=alpha,
        samples_per_client=samples_per_client, seed=seed, task_seed=task_seed,
        prototype_scale=prototype_scale, rotation=rotation, size_spread=size_spread,
        feature_shift=feature_shift, feature_scale_span=feature_scale_span, weighting=weighting,
    )
    task_seed = seed if task_seed is None else task_seed
    protos = make_prototypes(n_classes, dim, task_seed, prototype_scale, rotation)
    offset, scales = _feature_map(dim, task_seed, feature_shift, feature_scale_span)
    rng = make_rng(seed, 1)

    def client():
        n = samples_per_client
        if size_spread:
            lo = max(1, int(round(n * (1 - size_spread))))
            n = int(rng.integers(lo, int(round(n * (1 + size_spread))) + 1))
        mix = rng.dirichlet(np.full(n_classes, float(alpha)))
        labels = rng.choice(n_classes, size=n, p=mix)
        features = (protos[labels] + rng.normal(size=(n, dim)) + offset) * scales
        return ClientDataset(features, labels)

    train = [client() for _ in range(n_train)]
    val = [client() for _ in range(n_val)]
    return ClientPopulation(train, val, n_classes, weighting, descriptor)


def _feature_map(dim, task_seed, shift, span):
    rng = make_rng(task_seed, 2)
    direction = rng.normal(size=dim)
    offset = direction / np.linalg.norm(direction) * shift
    scales = np.logspace(-span / 2, span / 2, dim)
    rng.shuffle(scales)
    return offset, scales


def oracle_population(seed=0, **overrides):
    """The reference heterogeneous workload: 400/100 clients, 10 classes, alpha=0.1, ill-conditioned features."""
    params = dict(n_train=400, n_val=100, n_classes=10, dim=10, alpha=0.1, samples_per_client=100,
                  feature_shift=5.0, feature_scale_span=2.0, seed=seed)
    params.update(overrides)
    return generate_population(**params)


# --- model -----------------------------------------------------------------


@dataclass
class ModelState:
    params: np.ndarray
    server_m: np.ndarray
    server_v: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        if not (self.params.shape == self.server_m.shape == self.server_v.shape):
            raise ValueError("params and moment shapes differ")

    @classmethod
    def zeros(cls, dim, n_classes):
        size = dim * n_classes + n_classes
        return cls(np.zeros(size), np.zeros(size), np.zeros(size), 0)

    def copy(self):
        return ModelState(self.params.copy(), self.server_m.copy(), self.server_v.copy(), self.round_index)


def unpack(params, dim, n_classes):
    return params[: dim * n_classes].reshape(dim, n_classes), params[dim * n_classes :]


def scores(params, features, n_classes):
    dim = features.shape[-1]
    weights, bias = unpack(params, dim, n_classes)
    return features @ weights + bias


def logistic_loss(params, features, labels, n_classes):
    """Mean multinomial cross-entropy."""
    z = scores(params, features, n_classes)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(log_norm - z[np.arange(len(labels)), labels]))


def logistic_grad(params, features, labels, n_classes):
    """Gradient of :func:`logistic_loss` with respect to the flat parameter vector."""
    z = scores(params, features, n_classes)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    p /= len(labels)
    return np.concatenate([(features.T @ p).ravel(), p.sum(axis=0)])


def client_opt(params, data: ClientDataset, config, n_classes, rng):
    """Local SGD (momentum + L2 weight decay) on one client; returns ``local - params``."""
    n = data.n
    batch = min(int(config["batch_size"]), n)
    lr = float(config["client_lr"])
    mu = float(config["momentum"])
    wd = float(config["weight_decay"])
    w = params.copy()
    buf = np.zeros_like(w)
    for _ in range(int(config["epochs"])):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            g = logistic_grad(w, data.features[idx], data.labels[idx], n_classes) + wd * w
            buf = mu * buf + g
            w -= lr * buf
    return w - params


def _client_opt_stacked(params, features, labels, config, n_classes, orders):
    """``client_opt`` for m equal-sized clients at once.

    ``features`` is (m, n, d), ``labels`` (m, n) and ``orders`` (m, epochs, n)
    holds the per-client, per-epoch permutations.
    """
    m, n, dim = features.shape
    batch = min(int(config["batch_size"]), n)
    lr = float(config["client_lr"])
    mu = float(config["momentum"])
    wd = float(config["weight_decay"])
    w = np.broadcast_to(params, (m, params.size)).copy()
    buf = np.zeros_like(w)
    rows = np.arange(m)[:, None]
    split = dim * n_classes
    for epoch in range(orders.shape[1]):
        for start in range(0, n, batch):
            idx = orders[:, epoch, start : start + batch]
            xb = features[rows, idx]
            yb = labels[rows, idx]
            b = idx.shape[1]
            weights = w[:, :split].reshape(m, dim, n_classes)
            z = xb @ weights + w[:, None, split:]
            z -= z.max(axis=2, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=2, keepdims=True)
            p[rows, np.arange(b)[None, :], yb] -= 1.0
            p /= b
            g = np.concatenate([(xb.transpose(0, 2, 1) @ p).reshape(m, split), p.sum(axis=1)], axis=1)
            g += wd * w
            buf = mu * buf + g
            w -= lr * buf
    return w - params


def server_opt(state: ModelState, deltas, config, weights=None):
    """One FedAdam step on the (optionally weighted) mean client delta. Mutates and returns ``state``."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 2 or deltas.shape[0] < 1:
        raise ValueError("need at least one delta")
    if deltas.shape[1] != state.params.size:
        raise ValueError(f"delta size {deltas.shape[1]} != model size {state.params.size}")
    if weights is None:
        mean = deltas.mean(axis=0)
    else:
        weights = np.asarray(weights, dtype=float)
        mean = weights @ deltas / weights.sum()
    b1, b2 = float(config["beta1"]), float(config["beta2"])
    state.server_m = b1 * state.server_m + (1 - b1) * mean
    state.server_v = b2 * state.server_v + (1 - b2) * mean**2
    lr = float(config["server_lr"]) * float(config["lr_decay"]) ** state.round_index
    state.params = state.params + lr * state.server_m / (np.sqrt(state.server_v) + ADAM_TAU)
    state.round_index += 1
    return state


def train(config, population: ClientPopulation, rounds, clients_per_round=10, seed=0, config_id=0, state=None):
    """Run ``rounds`` FedAdam rounds, continuing from ``state`` when given.

    Round ``r`` (global index, counting any warm-start rounds) draws all of its
    randomness from ``make_rng(seed, config_id, r)``, so training in pieces is
    bitwise identical to training in one go.
    """
    if clients_per_round > population.n_train:
        raise ValueError("clients_per_round exceeds the number of training clients")
    if state is None:
        state = ModelState.zeros(population.dim, population.n_classes)
    else:
        state = state.copy()
    tr_weights = population.train_weights if population.weighting == WEIGHTED else None
    stacks = _stacked_train(population)
    epochs = int(config["epochs"])
    for _ in range(rounds):
        if not np.all(np.isfinite(state.params)):
            # Diverged: the model stays non-finite, only the round counter moves.
            state.round_index += 1
            continue
        rng = make_rng(seed, config_id, state.round_index)
        chosen = rng.choice(population.n_train, size=clients_per_round, replace=False)
        orders = [[rng.permutation(population.train_clients[k].n) for _ in range(epochs)] for k in chosen]
        deltas = np.empty((clients_per_round, state.params.size))
        by_size = {}
        for slot, k in enumerate(chosen):
            by_size.setdefault(population.train_clients[k].n, []).append(slot)
        for n, slots in by_size.items():
            feats, labs, index = stacks[n]
            pos = index[chosen[slots]]
            with np.errstate(all="ignore"):
                deltas[slots] = _client_opt_stacked(
                    state.params, feats[pos], labs[pos], config, population.n_classes,
                    np.array([orders[s] for s in slots]).reshape(len(slots), epochs, n),
                )
        with np.errstate(all="ignore"):
            server_opt(state, deltas, config, None if tr_weights is None else tr_weights[chosen])
    return state


_STACK_CACHE = {}


def _stacked_train(population):
    """Training clients grouped by size into (m, n, d) arrays; cached per population object."""
    key = id(population)
    hit = _STACK_CACHE.get(key)
    if hit is not None and hit[0] is population:
        return hit[1]
    groups = {}
    for k, client in enumerate(population.train_clients):
        groups.setdefault(client.n, []).append(k)
    stacks = {}
    for n, members in groups.items():
        index = np.full(population.n_train, -1)
        index[members] = np.arange(len(members))
        feats = np.stack([population.train_clients[k].features for k in members])
        labs = np.stack([population.train_clients[k].labels for k in members])
        stacks[n] = (feats, labs, index)
    if len(_STACK_CACHE) > 32:
        _STACK_CACHE.clear()
    _STACK_CACHE[key] = (population, stacks)
    return stacks


# --- evaluation ------------------------------------------------------------


def predict(params, features, n_classes):
    # argmax returns the first maximum, so ties go to the lowest class index;
    # non-finite scores (diverged models) count as -inf.
    with np.errstate(all="ignore"):
        z = scores(params, features, n_classes)
    z = np.where(np.isfinite(z), z, -np.inf)
    return np.argmax(z, axis=1)


def client_error(params, data: ClientDataset, n_classes):
    if isinstance(params, ModelState):
        params = params.params
    return float(np.mean(predict(params, data.features, n_classes) != data.labels))


def client_errors(params, clients, n_classes):
    if isinstance(params, ModelState):
        params = params.params
    return np.array([client_error(params, c, n_classes) for c in clients])


def aggregate_error(errors, weights):
    """Weighted mean of per-client errors: ``sum(w * e) / sum(w)``."""
    errors = np.asarray(errors, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if errors.size == 0:
        raise ValueError("cannot aggregate an empty set of client errors")
    if errors.shape != weights.shape:
        raise ValueError("errors and weights must have equal length")
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    return float(errors @ weights / weights.sum())


def full_validation_error(params, population: ClientPopulation):
    errs = client_errors(params, population.val_clients, population.n_classes)
    return aggregate_error(errs, population.val_weights)


# --- workload adapter used by the tuners ---------------------------------


class FederatedWorkload:
    """Real FedAdam training behind the tuners' train/evaluate interface.

    A workload state is a :class:`ModelState`; ``seed`` is the trial seed that,
    with the config id and round index, keys every training random stream.
    """

    def __init__(self, population: ClientPopulation, clients_per_round=10, seed=0):
        self.population = population
        self.clients_per_round = clients_per_round
        self.seed = seed

    @property
    def n_val(self):
        return self.population.n_val

    @property
    def val_weights(self):
        return self.population.val_weights

    def advance(self, config_id, config, state, rounds):
        """Train ``rounds`` more rounds from ``state`` (``None`` = fresh model)."""
        return train(config, self.population, rounds, self.clients_per_round, self.seed, config_id, state)

    def client_errors(self, state):
        return client_errors(state.params, self.population.val_clients, self.population.n_classes)


class FederatedLogisticRegression(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: FedAdam-trained softmax regression on a client population.

    ``fit`` takes a :class:`ClientPopulation` rather than ``(X, y)``; ``predict``
    and ``score`` work on ordinary feature matrices.
    """

    def __init__(
        self,
        server_lr=1e-2,
        beta1=0.9,
        beta2=0.99,
        lr_decay=0.9999,
        client_lr=1e-1,
        momentum=0.0,
        weight_decay=5e-5,
        batch_size=32,
        epochs=1,
        rounds=405,
        clients_per_round=10,
        random_state=0,
    ):
        self.server_lr = server_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.lr_decay = lr_decay
        self.client_lr = client_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.rounds = rounds
        self.clients_per_round = clients_per_round
        self.random_state = random_state

    @classmethod
    def from_config(cls, config, **kwargs):
        return cls(**dict(config), **kwargs)

    def hp_config(self):
        keys = ("server_lr", "beta1", "beta2", "lr_decay", "client_lr", "momentum",
                "weight_decay", "batch_size", "epochs")
        return {k: getattr(self, k) for k in keys}

    def fit(self, population: ClientPopulation, y=None):
        self.state_ = train(
            self.hp_config(), population, self.rounds, self.clients_per_round, int(self.random_state or 0)
        )
        self.n_classes_ = population.n_classes
        self.classes_ = np.arange(population.n_classes)
        self.n_features_in_ = population.dim
        self.validation_error_ = full_validation_error(self.state_.params, population)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return scores(self.state_.params, X, self.n_classes_)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)
