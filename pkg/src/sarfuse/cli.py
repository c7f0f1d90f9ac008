"""
Command line entry point.

    sarfuse synth    --out DIR [--config sim.json] [--sites N] [--tiles N] ...
    sarfuse train    --data DIR --out DIR [--config train.json] [--variant V] [--seed N] [--runs K]
    sarfuse evaluate --checkpoint FILE|DIR --data DIR --out DIR [--split test] [--threshold 0.5]
    sarfuse report   --in DIR --out DIR
    sarfuse bench    --out DIR [--data DIR | --sites N ...] [--variants ...] [--resume]

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``SARFUSE_SEED``
overrides the global seed when no ``--seed`` flag is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .data import load_dataset
from .evaluation import AGGREGATIONS, EvalTable, check_orderings, evaluate, read_csv, report, write_csv
from .models import VARIANTS, load_checkpoint
from .simulator import SimConfig, generate_dataset
from .training import CHECKPOINT_NAME, TrainConfig, run_experiment

log = logging.getLogger("sarfuse")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SEED_ENV = "SARFUSE_SEED"

# Desk-scale bench defaults; see README for the rationale.
BENCH_SIM = dict(num_sites=40, timestamps_per_site=10, tile_size=64, dropout_rate=0.12,
                 cross_modal_noise=0.02, seed=0)
BENCH_TRAIN = dict(learning_rate=1e-3, max_epochs=12, patience=4, num_runs=3, batch_size=16)


class UsageError(Exception):
    pass


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not in [0, 1]")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} is not a positive integer")
    return value


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return values


def _env_seed():
    value = os.environ.get(SEED_ENV)
    return None if value in (None, "") else int(value)


def _add_sim_flags(p: argparse.ArgumentParser, config_alias: bool = False) -> None:
    names = ("--sim-config", "--config") if config_alias else ("--sim-config",)
    p.add_argument(*names, dest="sim_config", help="JSON file with SimConfig fields")
    p.add_argument("--sites", type=_positive_int, dest="num_sites")
    p.add_argument("--tiles", type=_positive_int, dest="timestamps_per_site", help="timestamps per site")
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--dropout", type=_probability, dest="dropout_rate")
    p.add_argument("--noise", type=float, dest="cross_modal_noise")
    p.add_argument("--sim-seed", type=int, dest="sim_seed")


def _sim_config(args, defaults: dict | None = None) -> SimConfig:
    values = dict(defaults or {})
    values.update(_load_json(args.sim_config))
    for key in ("num_sites", "timestamps_per_site", "tile_size", "dropout_rate", "cross_modal_noise"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    seed = args.sim_seed if args.sim_seed is not None else _env_seed()
    if seed is not None:
        values["seed"] = seed
    try:
        return SimConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulator config: {exc}") from exc


def _train_config(args, defaults: dict | None = None, variant: str | None = None) -> TrainConfig:
    values = dict(defaults or {})
    values.update(_load_json(getattr(args, "config", None)))
    seed = args.seed if args.seed is not None else _env_seed()
    overrides = {"seed": seed, "num_runs": args.runs, "variant": variant or getattr(args, "variant", None),
                 "max_epochs": args.epochs, "learning_rate": args.lr, "patience": args.patience}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=_positive_int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=_positive_int)
    p.add_argument("--resume", action="store_true", help="skip seeds that already have a checkpoint")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = _sim_config(args)
    generate_dataset(config, args.out)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    records = run_experiment(config, args.data, args.out, resume=args.resume)
    for r in records:
        print(f"seed {r.seed}: best epoch {r.best_epoch}, val F1 {r.best_val_f1:.4f} -> {r.checkpoint}")
    return EXIT_OK


def _checkpoints(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    found = sorted(path.rglob(CHECKPOINT_NAME))
    if not found:
        raise UsageError(f"no {CHECKPOINT_NAME} files under {path}")
    return found


def evaluate_checkpoints(paths, data, split: str, threshold: float, aggregation: str = "pooled") -> EvalTable:
    dataset = load_dataset(data, split)
    table = EvalTable()
    for path in paths:
        bundle, meta = load_checkpoint(path)
        table.add_result(bundle.variant, meta["seed"], evaluate(bundle, dataset, threshold,
                                                                    aggregation=aggregation))
    return table


def cmd_evaluate(args) -> int:
    table = evaluate_checkpoints(_checkpoints(Path(args.checkpoint)), args.data, args.split, args.threshold,
                                 args.aggregation)
    out = Path(args.out)
    write_csv(table, out / "eval.csv")
    for r in table.records:
        print(f"{r.variant} seed {r.seed} {r.stratum:>16}: F1 {r.f1:.4f} IoU {r.iou:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    source = Path(args.inp)
    files = [source] if source.is_file() else sorted(source.rglob("eval.csv"))
    if not files:
        raise UsageError(f"no eval.csv files under {source}")
    table = EvalTable()
    for f in files:
        table.extend(read_csv(f))
    paths = report(table, args.out)
    print(paths["markdown"].read_text())
    return EXIT_OK


def _bench_variant(config: TrainConfig, data: str, out: str, resume: bool, split: str, threshold: float):
    vdir = Path(out) / config.variant
    records = run_experiment(config, data, vdir, resume=resume)
    table = evaluate_checkpoints([Path(r.checkpoint) for r in records], data, split, threshold)
    write_csv(table, vdir / "eval.csv")
    return table


def cmd_bench(args) -> int:
    out = Path(args.out)
    variants = args.variants or list(VARIANTS)
    stage = "synth"
    try:
        if args.data:
            data = Path(args.data)
        else:
            data = out / "data"
            sim = _sim_config(args, BENCH_SIM)
            if not (args.resume and (data / "manifest.json").is_file()):
                generate_dataset(sim, data)
        base = _train_config(args, BENCH_TRAIN, variant=variants[0])
        configs = [replace(base, variant=v) for v in variants]
        with open(out / "bench_config.json", "w") as f:
            json.dump({"data": str(data), "train": [asdict(c) for c in configs]}, f, indent=1)

        stage = "train+evaluate"
        table = EvalTable()
        jobs = [(c, str(data), str(out), args.resume, args.split, args.threshold) for c in configs]
        if args.parallel and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
                for t in pool.map(_bench_variant, *zip(*jobs)):
                    table.extend(t)
        else:
            for job in jobs:
                table.extend(_bench_variant(*job))

        stage = "report"
        paths = report(table, out / "report")
        print(paths["markdown"].read_text())
    except UsageError:
        raise
    except Exception as exc:
        print(f"bench failed during {stage}: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    if set(VARIANTS) - set(variants):
        print("notice: ordering checks skipped (need all of " + ", ".join(VARIANTS) + ")")
        return EXIT_OK
    checks = check_orderings(table)
    with open(out / "report" / "orderings.json", "w") as f:
        json.dump([{"check": n, "passed": ok, "detail": d} for n, ok, d in checks], f, indent=1)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarfuse", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    _add_sim_flags(p, config_alias=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant for one or more seeds")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="stratified F1/IoU of one checkpoint or a directory of seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--aggregation", choices=AGGREGATIONS, default="pooled",
                   help="pool counts over the stratum or average per-tile metrics")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate eval.csv files into CSV, Markdown and plots")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="train, evaluate and compare all variants")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="existing dataset; a synthetic one is generated otherwise")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--parallel", action="store_true", help="train variants in parallel processes")
    _add_train_flags(p)
    _add_sim_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "out", None) and args.command != "report":
        Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
