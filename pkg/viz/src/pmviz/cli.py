"""Batch figure rendering from pmnet run directories."""

from __future__ import annotations

import argparse
import sys

import matplotlib

matplotlib.use("Agg")

from .artifacts import SchemaError
from .figures import PlotJob, run_job


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pmviz",
        description="Render figures from persistent-monitoring run artifacts")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("snapshot",
                       help="network snapshot with covariance bars")
    s.add_argument("run", help="pmnet run directory")
    s.add_argument("--t", type=float, default=None,
                   help="sample instant (default: end of mission)")
    s.add_argument("--bar-scale", type=float, default=None,
                   help="bar height per covariance unit (default: auto)")
    s.add_argument("--cycles", default=None,
                   help="overlay cycles, e.g. '0,1,2;3,4'")
    s.add_argument("--out", default="snapshot.png")

    c = sub.add_parser("curves", help="objective evolution overlay")
    c.add_argument("runs", nargs="+", help="pmnet run directories")
    c.add_argument("--metric", default="J_t",
                   choices=("J_t", "Jhat_t", "sum_trace_omega"))
    c.add_argument("--out", default="curves.png")

    w = sub.add_parser("walls", help="per-decision solver wall time")
    w.add_argument("runs", nargs="+", help="pmnet run directories")
    w.add_argument("--window", type=int, default=25,
                   help="rolling mean window in decisions")
    w.add_argument("--out", default="walls.png")
    return ap


def _job_from_args(args) -> PlotJob:
    if args.command == "snapshot":
        options: dict = {"t": args.t, "bar_scale": args.bar_scale}
        if args.cycles:
            options["cycles"] = [[int(i) for i in part.split(",")]
                                 for part in args.cycles.split(";")]
        return PlotJob("snapshot", (args.run,), args.out, options)
    if args.command == "curves":
        return PlotJob("curves", tuple(args.runs), args.out,
                       {"metric": args.metric})
    return PlotJob("walls", tuple(args.runs), args.out,
                   {"window": args.window})


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        print(run_job(_job_from_args(args)))
    except (SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
