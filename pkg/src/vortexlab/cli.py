"""Command-line harness.

    vortexlab <kind> --config exp.toml --out runs/exp [flags]
    vortexlab report runs/exp

Kinds: simulate | meanfield | backward | clt | ldp-check | spde-sim |
marginal-w1. Exit codes: 0 ok, 1 validation, 2 numerical blow-up,
3 replica/sampling failure, 4 incomplete run (report). Errors are also
emitted as one JSON object on stderr. Output is plain text (NO_COLOR is
honored trivially; nothing is ever colorized).
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import KINDS, ValidationError, load_config, normalize
from .kernels import SingularKernelError
from .meanfield import BlowUpError, NegativeDensityError
from .oulimit import CovarianceError
from .particles import SamplingError
from .pipelines import (RerunRefusedError, describe_plan, format_report,
                        load_report, run_experiment)
from . import io as _io

EXIT_VALIDATION = 1
EXIT_BLOWUP = 2
EXIT_REPLICA = 3
EXIT_INCOMPLETE = 4


def _fail(code, exc):
    sys.stderr.write(json.dumps({
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": code,
    }) + "\n")
    return code


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vortexlab",
        description="mean-field particle fluctuation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="TOML or JSON file")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--workers", type=int, default=None,
                       help="numba thread count")
        p.add_argument("--deterministic", action="store_true", default=True,
                       help="deterministic reductions (default)")
        p.add_argument("--force", action="store_true",
                       help="overwrite a run with the same config hash")
        p.add_argument("--dry-run", action="store_true",
                       help="validate, print the plan, touch nothing")
        p.add_argument("--seed", type=int, default=None,
                       help="override seeds.master")
        p.add_argument("--emit-plot-script", action="store_true",
                       help="write a gnuplot helper next to the CSVs")
    pr = sub.add_parser("report", help="summarize a completed run")
    pr.add_argument("run_dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        try:
            payload = load_report(args.run_dir)
        except (FileNotFoundError, ValueError) as e:
            return _fail(EXIT_INCOMPLETE, e)
        print(format_report(payload))
        return 0
    try:
        cfg = normalize(load_config(args.config))
        if cfg["kind"] != args.command:
            raise ValidationError(
                "kind", f"config is {cfg['kind']!r} but the "
                f"{args.command!r} subcommand was invoked")
        if args.seed is not None:
            cfg["seeds"]["master"] = int(args.seed)
    except (ValidationError, OSError) as e:
        return _fail(EXIT_VALIDATION, e)
    if args.dry_run:
        print(describe_plan(cfg))
        return 0
    try:
        payload = run_experiment(cfg, args.out, force=args.force,
                                 workers=args.workers,
                                 deterministic=args.deterministic)
    except (ValidationError, RerunRefusedError) as e:
        return _fail(EXIT_VALIDATION, e)
    except (BlowUpError, NegativeDensityError, CovarianceError) as e:
        return _fail(EXIT_BLOWUP, e)
    except (SamplingError, SingularKernelError) as e:
        return _fail(EXIT_REPLICA, e)
    if args.emit_plot_script:
        _io.emit_plot_script(args.out)
    print(format_report(payload))
    return 0


if __name__ == "__main__":
    sys.exit(main())
