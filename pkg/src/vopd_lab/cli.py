"""``vopd-lab`` command line: train, verify, sweep-k, bench, plot.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage, config or
data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .experiments import TRAIN_FILES, TRAIN_PLOTS, run_bench, run_sweep_k, run_train, worker_count
from .plots import PLOT_KINDS, PlotDataError, plot
from .policy import ContractError, PolicyError
from .trainer import TrainingAborted
from .verify import run_checks, summary

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

RUNTIME_ERRORS = (TrainingAborted, PolicyError, ContractError, FloatingPointError, OSError,
                  MemoryError)


def _err(msg: str) -> None:
    print(f"vopd-lab: {msg}", file=sys.stderr)


def _load(path: str):
    try:
        return load_config(path)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return None


def cmd_train(args) -> int:
    config = _load(args.config)
    if config is None:
        return EXIT_USAGE
    result = run_train(config)
    out = os.path.normpath(config.output_dir)
    first, last = result.metrics[0], result.metrics[-1]
    print(f"eval reverse KL {first.eval_reverse_kl:.6g} -> {last.eval_reverse_kl:.6g} "
          f"({100 * result.kl_reduction:.1f}% reduction), "
          f"greedy agreement {last.greedy_agreement:.3f}")
    written = list(TRAIN_FILES) + ([f"{k}.svg" for k in TRAIN_PLOTS] if config.emit_plots else [])
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.seed, detach_baseline=not args.no_detach)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if args.json:
        text = json.dumps(summary(results, args.seed), indent=2)
        if args.json == "-":
            print(text)
        else:
            Path(args.json).write_text(text + "\n", encoding="utf-8")
    if failed:
        _err("verification failed: " + ", ".join(failed))
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed (seed {args.seed})")
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    config = _load(args.config)
    if config is None:
        return EXIT_USAGE
    res = run_sweep_k(config, workers=worker_count())
    print(f"baseline MSE over {res.contexts} contexts")
    for row in res.mse:
        print(f"  k={row['k_requested']:<6} mse={row['mse']:.6e}")
    for row in res.summary:
        print(f"  {row['label']:<22} final eval KL {row['final_eval_reverse_kl']:.6g} "
              f"({100 * row['kl_reduction']:.1f}% reduction)")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _load(args.config)
    if config is None:
        return EXIT_USAGE
    for row in run_bench(config):
        print(f"  V={row['vocab_size']:<8} {row['kind']:<12} "
              f"median {row['median_ms']:9.3f} ms  iqr {row['iqr_ms']:8.3f} ms")
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        out = plot(args.kind, args.data, args.out)
    except (PlotDataError, FileNotFoundError, ValueError, KeyError) as exc:
        _err(f"data error: {exc}")
        return EXIT_USAGE
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vopd-lab",
                                     description="On-policy distillation estimator lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one student and write metrics, records and plots")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the exact identity checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", metavar="PATH", nargs="?", const="-",
                   help="also write a JSON summary (stdout when no path is given)")
    p.add_argument("--no-detach", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep-k", help="train over top-k values and measure baseline MSE")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("bench", help="time batch_gradient per estimator kind")
    p.add_argument("config")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="re-render a plot from its data file")
    p.add_argument("data")
    p.add_argument("kind", choices=PLOT_KINDS)
    p.add_argument("out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        worker_count()
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        _err(f"runtime failure: {exc}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        _err("interrupted")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
