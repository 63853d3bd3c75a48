from fedtune.tuners.base import BudgetLedger, Evaluator, Observation, argmin_observation, select_final
from fedtune.tuners.hyperband import BOHB, Hyperband, hyperband_plan, sha_run, sha_schedule
from fedtune.tuners.random_search import RandomSearch, rs_run
from fedtune.tuners.tpe import TPE, ParzenModel, tpe_suggest

TUNERS = {"RS": RandomSearch, "HB": Hyperband, "TPE": TPE, "BOHB": BOHB}


def make_tuner(name, **params):
    try:
        cls = TUNERS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown tuner {name!r}; choose from {sorted(TUNERS)}") from None
    return cls(**params)


__all__ = [
    "BOHB",
    "BudgetLedger",
    "Evaluator",
    "Hyperband",
    "Observation",
    "ParzenModel",
    "RandomSearch",
    "TPE",
    "TUNERS",
    "argmin_observation",
    "hyperband_plan",
    "make_tuner",
    "rs_run",
    "select_final",
    "sha_run",
    "sha_schedule",
    "tpe_suggest",
]
