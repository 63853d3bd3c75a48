"""Successive halving, Hyperband and BOHB."""

import math
from dataclasses import dataclass

from sklearn.base import BaseEstimator

from fedtune.space import default_space
from fedtune.tuners.base import PER_CONFIG_CAP, TOTAL_ROUNDS, TunerMixin
from fedtune.tuners.tpe import GAMMA, N_CANDIDATES, N_MIN, ParzenModel


def sha_schedule(n, eta, r0, cap):
    """Rungs ``[(n_i, r_i), ...]`` of one successive-halving bracket.

    Each rung keeps ``n_i // eta`` configs and multiplies the resource by
    ``eta``; the bracket ends at the first rung with fewer than ``eta``
    configs or whose successor would exceed ``cap``.
    """
    if eta < 2:
        raise ValueError("eta must be >= 2")
    if r0 < 1 or n < 1:
        raise ValueError("need n >= 1 and r0 >= 1")
    if r0 > cap:
        raise ValueError("r0 exceeds the per-config cap")
    rungs = [(n, r0)]
    while n >= eta and r0 * eta <= cap:
        n, r0 = n // eta, r0 * eta
        rungs.append((n, r0))
    return rungs


def schedule_cost(rungs):
    cost, prev = 0, 0
    for n, r in rungs:
        cost += n * (r - prev)
        prev = r
    return cost


@dataclass
class Bracket:
    s: int
    n: int
    r0: int
    rungs: list
    cost: int
    truncated: bool = False


def hyperband_plan(max_rounds=405, eta=3, total_rounds=TOTAL_ROUNDS, min_rounds=5):
    """Brackets ``s = s_max .. 0`` with ``n(s) = ceil((s_max + 1) eta^s / (s + 1))`` and ``r0 = R / eta^s``.

    ``s_max`` is the largest ``s`` with ``R / eta^s >= min_rounds`` (4 for the
    defaults, giving r0 in {5, 15, 45, 135, 405}).

    When the next bracket would overrun ``total_rounds`` its ``n`` is reduced
    until it fits (marked ``truncated``); brackets that cannot afford a single
    config are dropped.
    """
    s_max = 0
    while max_rounds / eta ** (s_max + 1) >= min_rounds:
        s_max += 1
    brackets, spent = [], 0
    for s in range(s_max, -1, -1):
        r0 = max(1, round(max_rounds / eta**s))
        n = math.ceil((s_max + 1) * eta**s / (s + 1))
        rungs = sha_schedule(n, eta, r0, max_rounds)
        truncated = False
        while schedule_cost(rungs) > total_rounds - spent and n > 1:
            n -= 1
            truncated = True
            rungs = sha_schedule(n, eta, r0, max_rounds)
        cost = schedule_cost(rungs)
        if cost > total_rounds - spent:
            break
        brackets.append(Bracket(s, n, r0, rungs, cost, truncated))
        spent += cost
    return brackets


def sha_run(evaluator, config_ids, eta, r0, cap):
    """One successive-halving bracket over already-registered configs.

    Survivors are warm-started to each rung's cumulative resource. Every rung,
    the last included, ends in a selection (the last one picks the bracket
    winner), so under one-shot privacy each rung is one selection event.
    Returns the realised ``[(survivor_ids, rounds), ...]`` and the winner id.
    """
    rungs = sha_schedule(len(config_ids), eta, r0, cap)
    survivors = sorted(config_ids)
    realised = []
    for i, (n_i, r_i) in enumerate(rungs):
        assert len(survivors) == n_i
        observations = []
        for cid in survivors:
            evaluator.train(cid, r_i)
            observations.append(evaluator.observe(cid))
        realised.append((list(survivors), r_i))
        keep = rungs[i + 1][0] if i + 1 < len(rungs) else 1
        survivors = sorted(evaluator.select(observations, keep))
    return realised, survivors[0]


class Hyperband(TunerMixin, BaseEstimator):
    """Hyperband over the round-denominated budget; each bracket is one SHA run.

    ``final="all"`` returns the best-scoring config over every observation,
    whatever its fidelity; ``final="max_fidelity"`` only considers
    observations at the largest fidelity reached.
    """

    def __init__(
        self,
        space=None,
        max_rounds=PER_CONFIG_CAP,
        eta=3,
        min_rounds=5,
        total_rounds=TOTAL_ROUNDS,
        final="all",
        random_state=None,
    ):
        self.space = space
        self.max_rounds = max_rounds
        self.eta = eta
        self.min_rounds = min_rounds
        self.total_rounds = total_rounds
        self.final = final
        self.random_state = random_state

    def _sample_configs(self, n, evaluator, config_rng):
        space = self.space or default_space()
        return [space.sample(config_rng) for _ in range(n)]

    def _run(self, evaluator, config_rng):
        plan = hyperband_plan(self.max_rounds, self.eta, self.total_rounds, self.min_rounds)
        n_evals = sum(n for b in plan for n, _ in b.rungs)
        n_selections = sum(len(b.rungs) for b in plan) + 1
        evaluator.start_privacy(n_evaluations=n_evals, n_selections=n_selections)
        next_id, schedule = 0, []
        for bracket in plan:
            ids = list(range(next_id, next_id + bracket.n))
            next_id += bracket.n
            for cid, config in zip(ids, self._sample_configs(bracket.n, evaluator, config_rng)):
                evaluator.register(cid, config)
            realised, _ = sha_run(evaluator, ids, self.eta, bracket.r0, self.max_rounds)
            schedule.append(
                {"s": bracket.s, "n": bracket.n, "r0": bracket.r0, "truncated": bracket.truncated,
                 "rungs": [[len(ids_), r] for ids_, r in realised]}
            )
        if self.final not in ("all", "max_fidelity"):
            raise ValueError(f"final must be 'all' or 'max_fidelity', got {self.final!r}")
        finalists = evaluator.observations
        if self.final == "max_fidelity":
            top = max(o.rounds for o in finalists)
            finalists = [o for o in finalists if o.rounds == top]
        self.selected_id_ = evaluator.select(finalists, 1)[0]
        self.extra_trace_ = {"schedule": schedule, "n_selections": n_selections, "n_evaluations": n_evals}
        return self


class BOHB(Hyperband):
    """Hyperband whose new configurations come from a TPE model.

    The model is fitted on the highest fidelity having at least ``n_min``
    observed configurations; until one exists sampling is uniform, so the run
    starts out identical to :class:`Hyperband` with the same seed.
    """

    def __init__(
        self,
        space=None,
        max_rounds=PER_CONFIG_CAP,
        eta=3,
        min_rounds=5,
        total_rounds=TOTAL_ROUNDS,
        final="all",
        gamma=GAMMA,
        n_candidates=N_CANDIDATES,
        n_min=N_MIN,
        random_state=None,
    ):
        super().__init__(space, max_rounds, eta, min_rounds, total_rounds, final, random_state)
        self.gamma = gamma
        self.n_candidates = n_candidates
        self.n_min = n_min

    def _model_rung(self, observations):
        by_rounds = {}
        for obs in observations:
            by_rounds.setdefault(obs.rounds, {})[obs.config_id] = obs.score
        ready = [r for r, seen in by_rounds.items() if len(seen) >= max(self.n_min, 2)]
        if not ready:
            return None, None
        r = max(ready)
        return r, by_rounds[r]

    def _sample_configs(self, n, evaluator, config_rng):
        space = self.space or default_space()
        fidelity, scores = self._model_rung(evaluator.observations)
        model = None
        if scores is not None:
            values = list(scores.values())
            if max(values) > min(values):
                model = ParzenModel(space, [evaluator.configs[c] for c in scores], values, self.gamma)
        log = getattr(self, "_fit_log", [])
        configs = []
        for _ in range(n):
            configs.append(space.sample(config_rng) if model is None else model.suggest(self.n_candidates, config_rng))
            log.append(None if model is None else fidelity)
        self._fit_log = log
        return configs

    def _run(self, evaluator, config_rng):
        self._fit_log = []
        super()._run(evaluator, config_rng)
        self.extra_trace_["model_fidelity"] = self._fit_log
        self.model_fidelity_ = list(self._fit_log)
        return self
