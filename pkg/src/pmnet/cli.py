"""Experiment harness: generate configurations, run simulations, compare
controllers, and emit the CSV/JSON artifacts the plotting tools consume.

Artifacts per run: config.yaml, events.csv, metrics.csv, summary.json, every
CSV prefixed with a "# schema: 1" comment line.  Wall-clock timing columns
are zeroed unless --timing is passed, keeping artifacts byte-identical across
repeated runs of the same (config, controller, seed).

Exit codes: 0 success, 2 configuration problem, 3 simulation invariant
violation, 4 comparison finished with some failed cells.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .controllers import CONTROLLER_NAMES, make_controller
from .covariance import InvariantViolation
from .network import (ConfigError, ProblemConfig, config_from_dict,
                      config_to_dict, generate_pc, load_config, save_config)
from .simulator import RunOptions, run, window_average

CSV_SCHEMA = 1

EVENT_COLUMNS = ("time", "kind", "agent", "target", "u_i", "j", "u_j",
                 "solver_calls", "solver_wall_us")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_events_csv(path: Path, events, timing: bool) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {CSV_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for e in events:
            wall = e["solver_wall_us"] if timing else 0.0
            w.writerow([_fmt(e["t"]), e["kind"], _fmt(e["agent"]),
                        _fmt(e["target"]), _fmt(e["u_i"]), _fmt(e["j"]),
                        _fmt(e["u_j"]), e["solver_calls"], _fmt(float(wall))])


def write_metrics_csv(path: Path, samples, num_targets: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {CSV_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["t", "sum_trace_omega", "J_t", "Jhat_t"]
                   + [f"omega_{i}" for i in range(num_targets)])
        for row in samples:
            w.writerow([repr(float(x)) for x in row])


def write_summary_json(path: Path, summary: dict, controller: str,
                       timing: bool) -> None:
    doc = dict(summary)
    doc["schema"] = CSV_SCHEMA
    doc["controller"] = controller
    if not timing:
        doc["mean_solver_wall_us"] = 0.0
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_run_artifacts(outdir: Path, config: ProblemConfig, result,
                        controller_name: str, timing: bool) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    save_config(config, outdir / "config.yaml")
    write_events_csv(outdir / "events.csv", result.events, timing)
    write_metrics_csv(outdir / "metrics.csv", result.samples,
                      config.graph.num_targets)
    write_summary_json(outdir / "summary.json", result.summary,
                       controller_name, timing)


# -- config sourcing ---------------------------------------------------------


def _load_or_generate(args) -> ProblemConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = generate_pc(args.targets, args.agents, args.sigma, args.seed,
                          mission_time=args.T, horizon=args.H)
    changes = {}
    if args.config:
        if args.T is not None:
            changes["mission_time"] = args.T
        if args.H is not None:
            changes["horizon"] = args.H
        if args.seed is not None:
            changes["seed"] = args.seed
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    return cfg


def _controller_options(args) -> dict:
    return {"dataset_size": args.dataset_size,
            "al_threshold": args.al_threshold}


# -- subcommands -------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = generate_pc(args.targets, args.agents, args.sigma, args.seed,
                      mission_time=args.T, horizon=args.H)
    out = Path(args.out)
    if out.is_dir():
        out = out / "config.yaml"
    save_config(cfg, out)
    print(out)
    return 0


def cmd_run(args) -> int:
    cfg = _load_or_generate(args)
    controller = make_controller(args.controller, cfg,
                                 **_controller_options(args))
    options = RunOptions(tracking=args.tracking or args.oracle_tracking,
                         oracle_state=args.oracle_tracking,
                         truth_dt=args.dt)
    result = run(cfg, controller, options)
    outdir = Path(args.out)
    write_run_artifacts(outdir, cfg, result, args.controller, args.timing)
    print(json.dumps({k: result.summary[k] for k in
                      ("J_T", "Jhat_T", "J_W", "J_C", "decisions")},
                     sort_keys=True))
    return 0


def _compare_cell(task: dict) -> dict:
    """One (config, controller, seed) cell; runs in a worker process."""
    cfg = config_from_dict(task["config"])
    row = {"config": task["config_name"], "controller": task["controller"],
           "seed": cfg.seed}
    try:
        controller = make_controller(task["controller"], cfg,
                                     dataset_size=task["dataset_size"],
                                     al_threshold=task["al_threshold"])
        options = RunOptions(tracking=task["tracking"],
                             oracle_state=task["oracle_tracking"],
                             truth_dt=task["dt"])
        result = run(cfg, controller, options)
        if task["outdir"]:
            write_run_artifacts(Path(task["outdir"]), cfg, result,
                                task["controller"], task["timing"])
        s = result.summary
        row.update({k: s[k] for k in ("J_T", "Jhat_T", "J_W", "J_C",
                                      "decisions", "solver_calls")})
        row["mean_solver_wall_us"] = (s["mean_solver_wall_us"]
                                      if task["timing"] else 0.0)
        if task["window"]:
            row["window_J"] = window_average(result, *task["window"])
    except Exception as exc:  # cell failures recorded, comparison continues
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


_NUMERIC_COLUMNS = ("J_T", "Jhat_T", "J_W", "J_C", "mean_solver_wall_us",
                    "window_J")


def _comparison_rows_to_csv(path: Path, rows: list[dict]) -> None:
    cols = ["config", "controller", "seed", "J_T", "Jhat_T", "J_W", "J_C",
            "decisions", "solver_calls", "mean_solver_wall_us"]
    if any("window_J" in r for r in rows):
        cols.append("window_J")
    if any("error" in r for r in rows):
        cols.append("error")
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {CSV_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
        for ctrl in sorted({r["controller"] for r in rows}):
            good = [r for r in rows if r["controller"] == ctrl
                    and "error" not in r]
            if not good:
                continue
            avg = {"config": "Average:", "controller": ctrl, "seed": None}
            for c in _NUMERIC_COLUMNS:
                vals = [r[c] for r in good if r.get(c) is not None]
                if vals:
                    avg[c] = sum(vals) / len(vals)
            w.writerow([_fmt(avg.get(c)) for c in cols])


def cmd_compare(args) -> int:
    controllers = [c.strip() for c in args.controllers.split(",") if c.strip()]
    for c in controllers:
        if c not in CONTROLLER_NAMES:
            raise ConfigError(f"unknown controller {c!r}")
    if not controllers:
        raise ConfigError("no controllers given")

    configs: list[tuple[str, ProblemConfig]] = []
    if args.configs:
        for p in args.configs:
            cfg = load_config(p)
            changes = {}
            if args.T is not None:
                changes["mission_time"] = args.T
            if args.H is not None:
                changes["horizon"] = args.H
            if changes:
                cfg = dataclasses.replace(cfg, **changes)
            configs.append((Path(p).stem, cfg))
    else:
        T = args.T if args.T is not None else 50.0
        H = args.H if args.H is not None else 10.0
        for k in range(args.reps):
            seed = args.seed + k
            cfg = generate_pc(args.targets, args.agents, args.sigma, seed,
                              mission_time=T, horizon=H)
            configs.append((f"pc{seed}", cfg))

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for name, cfg in configs:
        for ctrl in controllers:
            run_dir = outdir / "runs" / f"{name}__{ctrl}__s{cfg.seed}"
            tasks.append({
                "config": config_to_dict(cfg), "config_name": name,
                "controller": ctrl, "outdir": str(run_dir),
                "dataset_size": args.dataset_size,
                "al_threshold": args.al_threshold,
                "tracking": args.tracking,
                "oracle_tracking": args.oracle_tracking,
                "dt": args.dt, "timing": args.timing,
                "window": tuple(args.window) if args.window else None,
            })

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_compare_cell, tasks))
    else:
        rows = [_compare_cell(t) for t in tasks]
    rows.sort(key=lambda r: (r["config"], r["controller"], r["seed"]))

    averages: dict[str, dict] = {}
    for ctrl in controllers:
        good = [r for r in rows if r["controller"] == ctrl and "error" not in r]
        if good:
            averages[ctrl] = {
                c: sum(r[c] for r in good if r.get(c) is not None)
                / max(1, len([r for r in good if r.get(c) is not None]))
                for c in ("J_T", "Jhat_T", "J_W")}
    doc = {"schema": CSV_SCHEMA, "cells": rows, "averages": averages}
    with open(outdir / "comparison.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _comparison_rows_to_csv(outdir / "comparison.csv", rows)

    failed = [r for r in rows if "error" in r]
    for r in failed:
        print(f"failed: {r['config']} {r['controller']}: {r['error']}",
              file=sys.stderr)
    print(outdir / "comparison.csv")
    return 4 if failed else 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pmnet",
        description="Multi-agent persistent monitoring experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_gen_params(p, with_defaults: bool):
        p.add_argument("--targets", type=int, default=7)
        p.add_argument("--agents", type=int, default=2)
        p.add_argument("--sigma", type=float, default=0.7,
                       help="connect targets closer than this distance")
        if with_defaults:
            p.add_argument("--T", type=float, default=50.0,
                           help="mission length (s)")
            p.add_argument("--H", type=float, default=10.0,
                           help="planning horizon (s)")
        else:
            p.add_argument("--T", type=float, default=None)
            p.add_argument("--H", type=float, default=None)

    def add_run_params(p):
        p.add_argument("--dt", type=float, default=1e-3,
                       help="truth/estimator integration step")
        p.add_argument("--dataset-size", type=int, default=25,
                       help="training samples per decision key (rhc-l/rhc-al)")
        p.add_argument("--al-threshold", type=float, default=0.25,
                       help="mismatch gate for rhc-al")
        p.add_argument("--tracking", action="store_true",
                       help="run the state-tracking study")
        p.add_argument("--oracle-tracking", action="store_true",
                       help="tracking with exact state knowledge, no noise")
        p.add_argument("--timing", action="store_true",
                       help="keep real wall-clock columns in artifacts")

    g = sub.add_parser("generate", help="write a random problem configuration")
    add_gen_params(g, with_defaults=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", default="config.yaml")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="simulate one controller on one config")
    r.add_argument("--config", help="config file; omit to generate one")
    add_gen_params(r, with_defaults=False)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--controller", required=True, choices=CONTROLLER_NAMES)
    add_run_params(r)
    r.add_argument("--out", default="out")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="run a controller grid and tabulate")
    c.add_argument("--controllers", required=True,
                   help="comma-separated controller names")
    c.add_argument("--configs", nargs="*",
                   help="config files; omit to generate --reps fresh ones")
    add_gen_params(c, with_defaults=False)
    c.add_argument("--seed", type=int, default=1,
                   help="base seed for generated configs")
    c.add_argument("--reps", type=int, default=1,
                   help="number of generated configs")
    add_run_params(c)
    c.add_argument("--window", nargs=2, type=float, metavar=("T0", "T1"),
                   help="also report the mean objective rate over [T0, T1]")
    c.add_argument("--jobs", type=int, default=1,
                   help="worker processes for comparison cells")
    c.add_argument("--out", default="out")
    c.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage, which matches the config-error code
        return int(exc.code or 0)
    if args.command == "run" and args.config is None and args.seed is None:
        print("error: run needs --config or --seed to generate one",
              file=sys.stderr)
        return 2
    if args.command == "run" and args.config is None:
        # generation path needs concrete T/H
        args.T = args.T if args.T is not None else 50.0
        args.H = args.H if args.H is not None else 10.0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
