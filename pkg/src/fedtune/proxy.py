"""Tuning on public server-side proxy data, and cross-task HP transfer."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from fedtune.federated import FederatedWorkload, aggregate_error, generate_population
from fedtune.noise import EvalPolicy
from fedtune.space import default_space
from fedtune.tuners.base import BudgetLedger, Evaluator
from fedtune.tuners.random_search import RandomSearch


@dataclass
class PopulationPair:
    """Proxy and target populations generated from one parameter set plus mismatch knobs.

    ``mismatch`` may override ``rotation`` (prototype rotation, radians),
    ``alpha`` and ``n_classes`` for the proxy; with no overrides and
    ``same_partition=True`` the two populations are identical.
    """

    target_params: dict
    mismatch: dict = field(default_factory=dict)
    same_partition: bool = False

    def __post_init__(self):
        unknown = set(self.mismatch) - {"rotation", "alpha", "n_classes"}
        if unknown:
            raise ValueError(f"unsupported mismatch knobs: {sorted(unknown)}")

    def target(self):
        return generate_population(**self.target_params)

    def proxy(self):
        params = dict(self.target_params)
        params["task_seed"] = params.get("task_seed") or params.get("seed", 0)
        if not self.same_partition:
            params["seed"] = params.get("seed", 0) + 1
        params.update(self.mismatch)
        return generate_population(**params)


def oneshot_proxy_rs(proxy, target, space=None, n_configs=16, rounds=405, random_state=0, target_policy=None):
    """Random search entirely on ``proxy``, then train the winner once on ``target``.

    ``proxy`` and ``target`` are workloads. Step one evaluates noiselessly on
    every proxy client. Step two never scores the target, so ``target_policy``
    is only carried through to the evaluator: the reported error is the
    noiseless full-validation error whatever the policy says.

    Returns ``(config, target_error, search)`` where ``search`` is the fitted
    :class:`RandomSearch`.
    """
    search = RandomSearch(space or default_space(), n_configs, rounds, random_state=random_state)
    search.fit(proxy, EvalPolicy())
    cid = search.best_config_id_
    evaluator = Evaluator(target, target_policy, np.random.default_rng(0), BudgetLedger(rounds, rounds))
    evaluator.register(cid, search.best_config_)
    evaluator.train(cid, rounds)
    return search.best_config_, evaluator.full_error(cid), search


def _full_error(workload, config_id, config, rounds):
    state = workload.advance(config_id, config, None, rounds)
    return aggregate_error(workload.client_errors(state), workload.val_weights)


@dataclass
class TransferScatter:
    pairs: np.ndarray
    spearman: float

    def to_csv(self, path, config_ids=None):
        ids = range(len(self.pairs)) if config_ids is None else config_ids
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config_id", "error_a", "error_b"])
            for cid, (a, b) in zip(ids, self.pairs):
                writer.writerow([cid, repr(float(a)), repr(float(b))])

    def summary_json(self):
        return json.dumps({"n_configs": len(self.pairs), "spearman": self.spearman})


def transfer_scatter(configs, workload_a, workload_b, rounds=405):
    """Train every config separately on both workloads; full-validation error pairs plus Spearman rho."""
    configs = list(configs)
    if not configs:
        raise ValueError("config pool is empty")
    pairs = np.array(
        [[_full_error(workload_a, i, c, rounds), _full_error(workload_b, i, c, rounds)] for i, c in enumerate(configs)]
    )
    rho = 1.0 if len(pairs) < 2 else float(stats.spearmanr(pairs[:, 0], pairs[:, 1]).statistic)
    return TransferScatter(pairs, rho)


def pair_workloads(pair: PopulationPair, clients_per_round=10, seed=0, shared_seed=False):
    """Workloads for a population pair; training streams differ unless ``shared_seed``."""
    target = FederatedWorkload(pair.target(), clients_per_round, seed)
    proxy = FederatedWorkload(pair.proxy(), clients_per_round, seed if shared_seed else seed + 1)
    return proxy, target
