"""Command line: ``decorrnet {run,grid,compare,fig1}``.

Exit codes: 0 success, 1 divergence, 2 config error, 3 I/O error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .data import CifarFormatError
from .decorrelation import DivergenceError

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="decorrnet", description="Decorrelated backpropagation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="INI experiment config")
        sp.add_argument("--out", default="results", help="output directory")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--data-dir", help="CIFAR-10 directory (overrides DECORR_DATA_DIR)")

    common(sub.add_parser("run", help="train one run or a preset sweep"))
    common(sub.add_parser("grid", help="eta x epsilon grid search"))
    common(sub.add_parser("fig1", help="two-dimensional decorrelation/whitening demo"), config_required=False)
    cp = sub.add_parser("compare", help="epochs/time to accuracy thresholds across metrics files")
    cp.add_argument("metrics", nargs="+", help="metrics CSV files; the first is the baseline")
    cp.add_argument("--thresholds", default="0.3,0.4,0.5", help="comma-separated accuracies")
    cp.add_argument("--key", default="test_acc", choices=["test_acc", "train_acc"])
    cp.add_argument("--out", help="write comparison.json here")
    return p


def _load(args):
    exp = harness.load_config(args.config) if args.config else harness.parse_config("")
    if args.seed is not None:
        exp.run = replace(exp.run, seed=args.seed)
        exp.fig1.seed = args.seed
    return exp


def _print_comparison(result):
    print(f"baseline: {result['baseline']} ({result['key']})")
    for row in result["thresholds"]:
        if not row["reached"]:
            print(f"  {row['threshold']:.3f}  {row['run']:<30} not reached")
            continue
        ratio = row.get("epoch_ratio")
        rtxt = f"x{ratio:.2f} epochs, x{row['time_ratio']:.2f} time" if ratio is not None else "baseline not reached"
        print(f"  {row['threshold']:.3f}  {row['run']:<30} epoch {row['epochs']:>3}  {row['time_s']:8.1f}s  {rtxt}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "compare":
            try:
                thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
                result = harness.compare_runs(args.metrics, thresholds, args.key)
            except ValueError as exc:
                print(f"format error: {exc}", file=sys.stderr)
                return EXIT_IO
            _print_comparison(result)
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "comparison.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
            return EXIT_OK
        exp = _load(args)
        if args.command == "fig1":
            summary = harness.run_fig1(exp.fig1, args.out)
        elif args.command == "grid":
            result = harness.run_grid(exp, args.out, args.data_dir)
            summary = {"best": result.best(), "diverged_cells": int(result.diverged.sum())}
        else:
            summary = harness.run_experiment(exp, args.out, args.data_dir)
        print(json.dumps(summary, indent=2, default=str))
        return EXIT_OK
    except harness.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CifarFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
