"""Command line front end: staged pipeline runs and CSV exports.

Only the standard library is imported at module level so that ``--threads``
can pin the BLAS/OpenMP pool sizes before any numerical package loads.
"""

from __future__ import annotations

import argparse
import os
import sys

_STAGES = ("assemble", "reduce", "kernel", "solve", "simulate", "validate")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _add_common(sp):
    sp.add_argument("--config", required=True, metavar="PATH",
                    help="experiment config file")
    sp.add_argument("--workdir", default=".", metavar="PATH",
                    help="artifact/cache directory (default: current)")
    sp.add_argument("--seed", type=int, default=None, metavar="U64",
                    help="override the simulation seed from the config")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="gesopt",
        description="Cost-optimal control of a dual-storage heating system: "
                    "staged model build, policy solve, Monte Carlo "
                    "simulation and CSV export.")
    ap.add_argument("--threads", type=int, default=None, metavar="N",
                    help="cap numerical thread pools (applied before any "
                         "numerical import)")
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in _STAGES:
        sp = sub.add_parser(
            stage, help=f"run the {stage} stage (building any missing "
                        f"upstream artifacts first)")
        _add_common(sp)
    exp = sub.add_parser(
        "export", help="write a value or policy slice over the "
                       "(residual demand, tank temperature) plane as CSV")
    _add_common(exp)
    exp.add_argument("--slice", required=True, metavar="AXIS=IDX,...",
                     help="fixed coordinates, e.g. 'n=71,y1=0,y2=0,y3=0,y4=0' "
                          "or 'n=72,y=4'")
    exp.add_argument("--table", choices=("value", "policy"), default="value",
                     help="which table to slice (default: value)")
    exp.add_argument("--out", default="slice.csv", metavar="PATH",
                     help="output CSV path (default: slice.csv)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be a positive integer",
                  file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    # numerical imports happen only after the thread caps are in place
    import dataclasses

    from .config import ConfigError, load_config
    from .export import export_slices
    from .pipeline import PipelineError, open_workspace, run_pipeline

    try:
        cfg = load_config(args.config)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ConfigError as err:
        print(f"error: invalid config {args.config}:\n{err}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, sim=dataclasses.replace(cfg.sim, seed=args.seed))

    try:
        if args.command == "export":
            result = run_pipeline(cfg, stages=("solve",),
                                  workdir=args.workdir)
            for line in result.messages:
                print(line)
            ws = open_workspace(cfg, result.workdir)
            vt, pt = ws.get_tables()
            export_slices(vt, pt, ws.get_grid(), cfg.demand.mu0,
                          args.slice, args.out, table=args.table)
            print(f"export: wrote {args.table} slice [{args.slice}] "
                  f"to {args.out}")
            return 0
        result = run_pipeline(cfg, stages=(args.command,),
                              workdir=args.workdir)
        for line in result.messages:
            print(line)
        return result.status
    except IndexError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
