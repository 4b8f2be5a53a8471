"""Command line entry point.

Subcommands: run, twin and mms take a scenario JSON; report takes an
existing artifact directory and regenerates its plots. Thread pinning has
to happen before the numeric stack loads, so this module imports nothing
heavy at the top level and main() sets the pool environment variables
before touching the package.

Exit codes: 0 done (including a failed twin verdict, which is a result,
not an error), 2 invalid config, 3 CFL violation, 4 gap stop, 5 numeric
failure, 6 transform failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rigidflow",
        description="compressible flow around a rigid ball, with a "
                    "frame-aligning twin verification harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, summary in (("run", "integrate one coupled scenario"),
                          ("twin", "run the reference/comparison pair and audit it"),
                          ("mms", "run the manufactured convergence study")):
        p = sub.add_parser(name, help=summary)
        p.add_argument("config", help="scenario JSON file")
        p.add_argument("--out", metavar="DIR", help="artifact directory override")
        p.add_argument("--seed", type=int, metavar="U64", help="seed override")
        p.add_argument("--threads", type=int, metavar="N",
                       help="pin numeric thread pools to N")
        p.add_argument("--cadence", type=int, metavar="K",
                       help="energy/field output every K steps")
    p = sub.add_parser("report", help="regenerate plots from an artifact directory")
    p.add_argument("directory", help="existing artifact directory")
    p.add_argument("--out", metavar="DIR", help="write plots elsewhere")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    from . import harness
    from .errors import CflError, ConfigError, NumericError, TransformError

    try:
        if args.command == "report":
            wrote = harness.report_from_dir(args.directory, args.out)
            print(f"wrote {len(wrote)} plot(s) for {args.directory}")
            return 0

        cfg = harness.ScenarioConfig.from_json(args.config)
        overrides = {}
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.cadence is not None:
            overrides["cadence"] = args.cadence
        if overrides:
            import dataclasses
            cfg = dataclasses.replace(cfg, **overrides)

        if args.command == "run":
            artifact = harness.run_scenario(cfg)
            print(f"{artifact.manifest['status']}: {artifact.manifest['reason']} "
                  f"-> {artifact.out_dir}")
            return artifact.manifest["exit_code"]
        if args.command == "twin":
            result = harness.twin_experiment(cfg)
            v = result.verdict
            print(f"verdict {v.category}: E_rel max {v.e_rel_max:.3e}, "
                  f"REI residual {v.max_rei_residual:.3e} (bound {v.rei_bound:.3e})")
            for reason in v.reasons:
                print(f"  - {reason}")
            return result.artifact.manifest["exit_code"]
        table, summary = harness.manufactured_verification(cfg, out_dir=cfg.out_dir)
        for name, row in table.rows.items():
            errs = " ".join(f"{e:.3e}" for e in row.errors)
            print(f"{name:32s} {errs}  order {row.order:+.2f}")
        print(f"study {'passed' if summary['ok'] else 'FAILED'} "
              f"in {summary['elapsed']:.1f}s")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CflError as exc:
        print(f"cfl failure: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 5
    except TransformError as exc:
        print(f"transform failure: {exc}", file=sys.stderr)
        return 6
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
