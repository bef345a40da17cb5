"""Command-line entry points.

Exit codes: 0 success, 1 validation error (bad config, bad arguments,
failed verification), 2 runtime abort (non-finite training state).
All run state comes from the config file; no environment variables are read.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config, parse_grid, serialize_grid
from .harness import preset_experiments, run_experiment, run_grid, verify_run
from .telemetry import emit_line_plot

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchgap",
        description="Micro-batch gradient-norm interventions for the "
                    "small-to-large-batch generalization gap.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured training run")
    p_run.add_argument("config", help="experiment config file")
    p_run.add_argument("--out", help="override the config's output directory")

    p_grid = sub.add_parser("grid", help="execute a grid of runs")
    p_grid.add_argument("gridspec", help="grid config file")
    p_grid.add_argument("--out", required=True, help="output root directory")

    p_plot = sub.add_parser("plot", help="render telemetry columns to SVG")
    p_plot.add_argument("csv", help="telemetry CSV path")
    p_plot.add_argument("--cols", required=True, help="comma-separated column names")
    p_plot.add_argument("--out", required=True, help="output SVG path")
    p_plot.add_argument("--smooth", type=int, default=1,
                        help="moving-average window (1 = raw)")

    p_rec = sub.add_parser("record-schedule",
                           help="run a config and report its norm-schedule path")
    p_rec.add_argument("config", help="experiment config file (donor run)")
    p_rec.add_argument("--out", help="override the config's output directory")

    p_ver = sub.add_parser("verify", help="check a run directory for completeness")
    p_ver.add_argument("run_dir")

    p_pre = sub.add_parser("preset", help="materialize a named experiment preset")
    p_pre.add_argument("name", nargs="?", help="preset name (omit to list)")
    p_pre.add_argument("--out", help="write the grid file here instead of stdout")
    p_pre.add_argument("--steps", type=int, default=5000, help="step budget per run")
    p_pre.add_argument("--repeats", type=int, default=3, help="seeds per cell")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(Path(args.config).read_text())
            result = run_experiment(cfg, out_dir=args.out)
            print(f"run dir: {result.run_dir}")
            print(f"status:  {result.status}")
            if result.final_test_acc is not None:
                print(f"test acc: {result.final_test_acc:.4f}")
            return EXIT_OK if result.status == "ok" else EXIT_ABORT

        if args.command == "grid":
            grid = parse_grid(Path(args.gridspec).read_text())
            results, summary = run_grid(grid, args.out)
            ok = sum(r.status == "ok" for r in results)
            print(f"{ok}/{len(results)} runs ok; summary at {summary}")
            return EXIT_OK if ok == len(results) else EXIT_ABORT

        if args.command == "plot":
            cols = [c.strip() for c in args.cols.split(",") if c.strip()]
            emit_line_plot(args.csv, cols, args.out, smooth_window=args.smooth)
            print(f"wrote {args.out}")
            return EXIT_OK

        if args.command == "record-schedule":
            cfg = parse_config(Path(args.config).read_text())
            result = run_experiment(cfg, out_dir=args.out)
            if result.status != "ok":
                print(f"donor run failed: {result.error}", file=sys.stderr)
                return EXIT_ABORT
            print(str(Path(result.run_dir) / "norm_schedule.csv"))
            return EXIT_OK

        if args.command == "verify":
            problems = verify_run(args.run_dir)
            if problems:
                for p in problems:
                    print(f"FAIL {p}")
                return EXIT_CONFIG
            print("ok")
            return EXIT_OK

        if args.command == "preset":
            presets = preset_experiments(steps=args.steps, repeats=args.repeats)
            if not args.name:
                for name in presets:
                    print(name)
                return EXIT_OK
            if args.name not in presets:
                print(f"unknown preset {args.name!r}; available: {', '.join(presets)}",
                      file=sys.stderr)
                return EXIT_CONFIG
            text = serialize_grid(presets[args.name])
            if args.out:
                Path(args.out).write_text(text)
                print(f"wrote {args.out}")
            else:
                print(text, end="")
            return EXIT_OK

        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
