"""Command-line entry point: ``fedtune {pool,tune,sweep,bootstrap,proxy,report}``.

Exit codes: 0 success, 1 spec error, 2 budget exhaustion, 3 I/O failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from fedtune import harness
from fedtune.federated import FederatedWorkload
from fedtune.harness import ExperimentSpec, SpecError
from fedtune.noise import BudgetExhausted
from fedtune.proxy import PopulationPair, oneshot_proxy_rs, transfer_scatter
from fedtune.space import write_config_pool
from fedtune.surrogate import SurrogateWorkload
from fedtune.tuners import make_tuner

EXIT_OK, EXIT_SPEC, EXIT_BUDGET, EXIT_IO = 0, 1, 2, 3


def _values(text):
    """Comma-separated grid values; numbers are parsed, ``full``/``inf`` kept as strings."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if item in ("full", "inf"):
            out.append(item)
            continue
        try:
            number = float(item)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {item!r}") from None
        out.append(int(number) if number.is_integer() and "." not in item else number)
    return out


def _common(p):
    p.add_argument("--spec", type=Path, help="JSON or TOML experiment spec; flags given explicitly override it")
    p.add_argument("--backend", choices=("fedtrain", "surrogate"))
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _policy_flags(p):
    p.add_argument("--subsample", type=_values, help="clients per evaluation, e.g. 1,10,full")
    p.add_argument("--bias-b", type=_values)
    p.add_argument("--iid-p", type=_values)
    p.add_argument("--epsilon", type=_values)
    p.add_argument("--privacy-mode", choices=("auto", "per_eval", "oneshot_topk", "off"))


def build_parser():
    parser = argparse.ArgumentParser(prog="fedtune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pool", help="train and cache a config pool")
    _common(p)
    p.add_argument("--pool-size", type=int)

    p = sub.add_parser("tune", help="one live tuner run")
    _common(p)
    _policy_flags(p)
    p.add_argument("--tuner", choices=("RS", "HB", "TPE", "BOHB"))
    p.add_argument("--k", type=int, help="configs for RS/TPE")

    for name, text in (("sweep", "policy grid x trials"), ("bootstrap", "bootstrap random search over a pool")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _policy_flags(p)
        p.add_argument("--trials", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--pool-size", type=int)
        if name == "sweep":
            p.add_argument("--tuner", choices=harness.TUNER_NAMES)

    p = sub.add_parser("proxy", help="one-shot proxy RS and the transfer scatter")
    _common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--rotation", type=float, default=0.0, help="proxy prototype rotation (radians)")
    p.add_argument("--proxy-alpha", type=float, help="proxy Dirichlet concentration")
    p.add_argument("--optimum-shift", help="surrogate proxy: per-dimension optimum shift, or far_corner")
    p.add_argument("--scatter-size", type=int, default=16, help="configs in the transfer scatter (0 to skip)")

    p = sub.add_parser("report", help="recompute summary.csv and curves.csv from records")
    p.add_argument("--out", type=Path, required=True, help="result directory containing records/")
    return parser


def spec_from_args(args):
    """Merge ``--spec`` (if any) with explicit flags into a validated :class:`ExperimentSpec`."""
    data = ExperimentSpec.from_file(args.spec).to_dict() if getattr(args, "spec", None) else {}
    workload = dict(data.get("workload", {}))
    for flag, key in (("n_train", "n_train"), ("n_val", "n_val"), ("alpha", "alpha")):
        value = getattr(args, flag, None)
        if value is not None:
            workload[key] = value
    data["workload"] = workload
    grid = dict(data.get("grid", {}))
    for key in harness.GRID_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            grid[key] = value
    if grid:
        data["grid"] = grid
    for flag, key in (("backend", "backend"), ("tuner", "tuner"), ("trials", "trials"), ("k", "k"),
                      ("pool_size", "pool_size"), ("seed", "master_seed"), ("privacy_mode", "privacy_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if data.get("backend") == "surrogate":
        data["workload"].pop("n_train", None)
        data["workload"].pop("alpha", None)
    return ExperimentSpec.from_dict(data)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def cmd_pool(args):
    spec = spec_from_args(args)
    ctx = harness._Context(spec, args.out)
    pool = ctx.pool()
    rows = [{"config_id": i, "full_error": e} for i, e in enumerate(pool.full_errors())]
    harness.write_csv(args.out / "pool" / "full_errors.csv", rows, ["config_id", "full_error"])
    print(f"pool of {pool.size} configs cached at {args.out / 'pool'}")


def cmd_tune(args):
    spec = spec_from_args(args)
    points = spec.grid_points()
    if len(points) != 1:
        raise SpecError("tune takes a single policy; use sweep for grids")
    ctx = harness._Context(spec)
    params = {"space": ctx.space, "random_state": spec.master_seed}
    if spec.tuner in ("RS", "TPE"):
        params.update(n_configs=spec.k, rounds=spec.rounds)
    else:
        params["max_rounds"] = spec.rounds
    tuner = make_tuner(spec.tuner, **params)
    tuner.fit(ctx.workload(float(points[0]["iid_p"]), spec.master_seed), spec.policy_for(points[0]))
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "trace.json", tuner.trace())
    print(f"{spec.tuner}: config {tuner.best_config_id_} full error {tuner.best_error_:.4f} "
          f"({tuner.ledger_.consumed} rounds, eps spent {tuner.eps_spent_:g})")


def cmd_sweep(args):
    spec = spec_from_args(args)
    out = harness.run(spec, args.out)
    for row in harness.summarize(harness.load_records(out / "records")):
        print(_row_text(row))


def cmd_bootstrap(args):
    args.tuner = "RS"
    cmd_sweep(args)


def cmd_proxy(args):
    spec = spec_from_args(args)
    ctx = harness._Context(spec)
    mismatch = {"rotation": args.rotation} if args.rotation else {}
    if args.proxy_alpha is not None:
        mismatch["alpha"] = args.proxy_alpha
    seed = spec.master_seed
    if spec.backend == "fedtrain":
        pair = PopulationPair(dict(ctx.population.descriptor), mismatch)
        target = FederatedWorkload(ctx.population, spec.clients_per_round, seed)
        proxy = FederatedWorkload(pair.proxy(), spec.clients_per_round, seed + 1)
    else:
        if mismatch:
            raise SpecError("rotation/alpha mismatch needs the fedtrain backend")
        target = SurrogateWorkload(ctx.response)
        shift = args.optimum_shift or spec.proxy.get("optimum_shift", 0.0)
        proxy = SurrogateWorkload(harness.proxy_response(ctx.response, shift))
    config, error, search = oneshot_proxy_rs(proxy, target, ctx.space, spec.k, spec.rounds, seed)
    args.out.mkdir(parents=True, exist_ok=True)
    result = {"config_id": search.best_config_id_, "config": dict(config), "target_error": error,
              "mismatch": mismatch}
    if args.scatter_size:
        rng = harness.make_rng(seed, "scatter")
        configs = [ctx.space.sample(rng) for _ in range(args.scatter_size)]
        scatter = transfer_scatter(configs, proxy, target, spec.rounds)
        scatter.to_csv(args.out / "scatter.csv")
        (args.out / "scatter_summary.json").write_text(scatter.summary_json() + "\n")
        write_config_pool(args.out / "scatter_configs.jsonl", configs)
        result["spearman"] = scatter.spearman
    _write_json(args.out / "proxy.json", result)
    print(f"proxy RS picked config {search.best_config_id_}: target error {error:.4f}")


def cmd_report(args):
    records = harness.load_records(args.out / "records") if (args.out / "records").is_dir() else []
    if not records:
        raise SpecError(f"no records under {args.out / 'records'}")
    for row in harness.report(records, args.out):
        print(_row_text(row))


def _row_text(row):
    point = " ".join(f"{k}={row[k]}" for k in harness.GRID_KEYS)
    return f"{point}  n={row['count']} median={row['median']:.4f} q1={row['q1']:.4f} q3={row['q3']:.4f}"


COMMANDS = {"pool": cmd_pool, "tune": cmd_tune, "sweep": cmd_sweep, "bootstrap": cmd_bootstrap,
            "proxy": cmd_proxy, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_SPEC
    try:
        COMMANDS[args.command](args)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
