"""Command-line entry point: ``fusestyle <subcommand> [flags]``.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .bench import DEFAULT_BATCH_SIZES, bench_strategies, format_timing_table, timing_csv
from .data import default_domains, generate_dataset
from .errors import FuseStyleError, NumericalError
from .model import save_checkpoint
from .report import aggregate, aggregate_csv, format_aggregate, read_report, write_report
from .selection import SelectionStrategy
from .train import ExperimentConfig, run_experiment

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4
STRATEGY_CHOICES = ("m1", "ra", "m2", "m3")

logger = logging.getLogger("fusestyle")


class ConfigFileError(FuseStyleError, ValueError):
    """The --config file is malformed or names unknown flags."""


def _data_default() -> str:
    return os.environ.get("FUSESTYLE_DATA_DIR", "data")


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()] if text else []


def _shape_list(text: str):
    return [tuple(int(v) for v in item.split("x")) for item in text.split(",") if item.strip()]


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=_data_default(), help="dataset directory (env FUSESTYLE_DATA_DIR)")
    p.add_argument("--alpha", type=float, default=0.3, help="Beta(alpha, alpha) shape for mixing weights")
    p.add_argument("--p-apply", type=float, default=0.5, help="probability of mixing a batch at each layer")
    p.add_argument("--epsilon", type=float, default=1e-6, help="variance stabiliser in instance std")
    p.add_argument("--epochs", type=int, default=15, help="training epochs")
    p.add_argument("--batch-size", type=int, default=32, help="training batch size")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--patience", type=int, default=2, help="plateau epochs before lr reduction")
    p.add_argument("--factor", type=float, default=0.01, help="lr reduction factor")
    p.add_argument("--block-channels", type=_int_list, default=[16, 32, 64, 64], help="conv channels per block")
    p.add_argument("--mix-points", type=_int_list, default=[1, 4], help="1-based blocks followed by FuseStyle")
    p.add_argument("--detach-reference-stats", action="store_true", help="stop gradients through reference statistics")
    p.add_argument("--config", default=None, help="JSON config file; explicit flags override it")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="fusestyle", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic multi-domain dataset", formatter_class=fmt)
    g.add_argument("--domains", type=int, default=3, help="number of domains")
    g.add_argument("--n", type=int, default=200, help="samples per class per domain")
    g.add_argument("--seed", type=int, default=11, help="global generation seed")
    g.add_argument("--out", default=_data_default(), help="output directory (env FUSESTYLE_DATA_DIR)")

    t = sub.add_parser("train", help="one leave-one-domain-out training run", formatter_class=fmt)
    t.add_argument("--strategy", choices=STRATEGY_CHOICES, default="ra", help="reference selection strategy")
    t.add_argument("--no-fusestyle", action="store_true", help="train without any FuseStyle layer")
    t.add_argument("--holdout", default="D0", help="unseen domain")
    t.add_argument("--seed", type=int, default=1, help="base seed for the three derived seeds")
    t.add_argument("--init-seed", type=int, default=None, help="parameter init seed; None reuses --seed")
    t.add_argument("--shuffle-seed", type=int, default=None, help="epoch order seed; None means --seed + 1000")
    t.add_argument("--aug-seed", type=int, default=None, help="FuseStyle draws seed; None means --seed + 2000")
    t.add_argument("--out", default="runs/latest", help="run output directory")
    _experiment_flags(t)

    s = sub.add_parser("sweep", help="strategy x holdout x seed grid of train runs", formatter_class=fmt)
    s.add_argument("--strategies", default="none,ra", help="comma list from none,m1,ra,m2,m3")
    s.add_argument("--holdouts", default="", help="comma list of domains; empty means every domain")
    s.add_argument("--seeds", type=_int_list, default=[1, 2, 3], help="base seeds, one run each")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--out", default="runs/sweep", help="parent directory for run outputs")
    _experiment_flags(s)

    b = sub.add_parser("bench-strategies", help="time the four selection strategies", formatter_class=fmt)
    b.add_argument("--batch-sizes", type=_int_list, default=list(DEFAULT_BATCH_SIZES), help="comma list of batch sizes")
    b.add_argument("--features", type=_shape_list, default=[(16, 16, 16), (64, 8, 8)], help="CxHxW list")
    b.add_argument("--reps", type=int, default=21, help="repetitions per cell (median reported)")
    b.add_argument("--seed", type=int, default=0, help="seed for the random feature batches")
    b.add_argument("--csv", default=None, help="also write a CSV table here")

    r = sub.add_parser("report", help="aggregate run reports by strategy and holdout", formatter_class=fmt)
    r.add_argument("reports", nargs="+", help="report.jsonl files or run directories")
    r.add_argument("--csv", default=None, help="also write a CSV table here")
    parser.subcommands = {"gen-data": g, "train": t, "sweep": s, "bench-strategies": b, "report": r}
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str], args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"config {args.config} is not valid JSON: {exc}") from None
    sub = parser.subcommands[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigFileError(f"unknown config keys {sorted(unknown)}")
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def experiment_config(args, strategy: Optional[str], holdout: str, seed: int, **seeds) -> ExperimentConfig:
    return ExperimentConfig(
        data_dir=str(args.data),
        holdout=holdout,
        strategy=None if strategy is None else SelectionStrategy.parse(strategy).value,
        alpha=args.alpha,
        p_apply=args.p_apply,
        epsilon=args.epsilon,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        patience=args.patience,
        factor=args.factor,
        seed=seed,
        block_channels=tuple(args.block_channels),
        mix_points=tuple(args.mix_points),
        detach_reference_stats=args.detach_reference_stats,
        **seeds,
    ).resolved()


def _run_and_write(config: ExperimentConfig, out_dir: str):
    models: list = []
    report = run_experiment(config, model_out=models)
    write_report(report, out_dir)
    save_checkpoint(models[0], Path(out_dir) / "model.fsm")
    return report


def cmd_gen_data(args) -> int:
    specs = default_domains(args.domains)
    manifest = generate_dataset(specs, args.n, args.seed, args.out)
    for name in sorted(manifest.checksums):
        print(f"{manifest.checksums[name]}  {name}")
    print(f"manifest checksum {manifest.combined_checksum()}")
    return EXIT_OK


def cmd_train(args) -> int:
    strategy = None if args.no_fusestyle else args.strategy
    config = experiment_config(
        args, strategy, args.holdout, args.seed,
        init_seed=args.init_seed, shuffle_seed=args.shuffle_seed, aug_seed=args.aug_seed,
    )
    report = _run_and_write(config, args.out)
    print(f"strategy {report.strategy}  unseen {report.holdout}")
    for d in sorted(report.accuracy):
        flag = " (unseen)" if d == report.holdout else ""
        print(f"  {d}: {report.accuracy[d]:.2f}%{flag}")
    print(f"report written to {args.out}")
    return EXIT_OK


def _sweep_cell(job):
    config, out_dir = job
    report = _run_and_write(config, out_dir)
    return out_dir, report.strategy, report.holdout, report.unseen_accuracy, report.seen_accuracy


def cmd_sweep(args) -> int:
    from .data import read_manifest

    holdouts = [h for h in args.holdouts.split(",") if h] or read_manifest(args.data).domain_ids
    strategies = [None if s.strip().lower() == "none" else s.strip() for s in args.strategies.split(",") if s.strip()]
    jobs = []
    for strategy in strategies:
        name = "none" if strategy is None else SelectionStrategy.parse(strategy).short_name
        for holdout in holdouts:
            for seed in args.seeds:
                config = experiment_config(args, strategy, holdout, seed)
                jobs.append((config, str(Path(args.out) / f"{name}_{holdout}_s{seed}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(job) for job in jobs]
    print(format_aggregate(aggregate([read_report(out) for out, *_ in results])))
    for strategy in sorted({r[1] for r in results}):
        unseen = [r[3] for r in results if r[1] == strategy]
        seen = [r[4] for r in results if r[1] == strategy]
        print(f"{strategy:<16} mean unseen {np.mean(unseen):6.2f}  mean seen {np.mean(seen):6.2f}  (n={len(unseen)})")
    return EXIT_OK


def cmd_bench_strategies(args) -> int:
    rows = bench_strategies(args.batch_sizes, args.features, reps=args.reps, seed=args.seed)
    print(format_timing_table(rows))
    if args.csv:
        Path(args.csv).write_text(timing_csv(rows))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = aggregate([read_report(p) for p in args.reports])
    print(format_aggregate(rows), end="")
    if args.csv:
        Path(args.csv).write_text(aggregate_csv(rows))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bench-strategies": cmd_bench_strategies,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config_file(parser, argv, args)
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FuseStyleError, ValueError) as exc:
        if isinstance(exc, OSError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
