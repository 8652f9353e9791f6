"""Command line front-end.

    u2ucov run <experiment> [--engine analytic|mc|both] [--set key=value]...
               [--seed N] [--drops N] [--jobs N] [--out DIR] [--check]
    u2ucov rerun <manifest.json> [--out DIR]
    u2ucov config [--config FILE] [--set key=value]...

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 comparison outside the acceptance band (``--check``).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .analytic import NumericalError
from .config import ConfigError, dumps, load_scenario, parse_override
from .experiments import (DEFAULT_THRESHOLDS, ENGINE_ALIASES, ENGINES, EXPERIMENTS, CheckFailure,
                          ExperimentSpec, load_manifest, run_experiment)
from .special import SeriesNonConvergence

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4
log = logging.getLogger("u2ucov")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="u2ucov", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("--config", help="scenario document (flat TOML)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")

    run = sub.add_parser("run", help="run a named experiment")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--engine", choices=ENGINES + tuple(ENGINE_ALIASES), default="both")
    scenario_args(run)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--drops", type=int, default=10_000)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--out", default="results")
    run.add_argument("--check", action="store_true", help="exit 4 if analytic and MC differ by more than 0.02")
    run.add_argument("--sweep", metavar="KEY", help="configuration key swept by custom_sweep")
    run.add_argument("--grid", type=_floats, default=(), metavar="V1,V2,...", help="sweep values")
    run.add_argument("--thresholds", type=_floats, default=DEFAULT_THRESHOLDS, metavar="T1,T2,...",
                     help="SINR thresholds in dB")
    run.add_argument("--exact-theorem2", action="store_true",
                     help="use the unclamped serving-GUE power in the analytic GUE coverage")

    rerun = sub.add_parser("rerun", help="rerun an experiment from its manifest")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", help="output directory (default: the recorded one)")

    cfg = sub.add_parser("config", help="print the fully resolved scenario")
    scenario_args(cfg)
    return ap


def _scenario(args):
    overrides = dict(parse_override(o) for o in args.overrides)
    if getattr(args, "exact_theorem2", False):
        overrides["analytic.exact_theorem2"] = True
    return load_scenario(args.config, overrides)


def _report(summary) -> None:
    print(f"{summary.spec.name}: {len(summary.files)} files in {summary.out_dir} "
          f"({summary.wall_clock_s:.1f} s)")
    for name, c in summary.comparisons.items():
        status = "PASS" if c.passed else "FAIL"
        print(f"  {status} {name}: max |dev| {c.max_abs_dev:.4f}, mean {c.mean_abs_dev:.4f}, "
              f"inside CI {c.frac_inside_ci:.2f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "config":
            sys.stdout.write(dumps(_scenario(args)))
            return EXIT_OK
        if args.command == "rerun":
            spec, params = load_manifest(args.manifest)
            if args.out:
                spec = replace(spec, out_dir=args.out)
        else:
            params = _scenario(args)
            spec = ExperimentSpec(args.experiment, args.engine, args.sweep, args.grid, args.out,
                                  args.seed, args.drops, args.jobs, args.thresholds, args.check)
        summary = run_experiment(spec, params)
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, SeriesNonConvergence, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _report(summary)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
