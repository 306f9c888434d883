"""Readers for the versioned artifacts written by the pmnet CLI.

Every loader validates the schema stamp before anything else is touched, so
rendering code never guesses at column meanings.  CSV floats are parsed in
round-trip mode: the writer serializes with repr(), and figure read-back
tests compare bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import yaml

SCHEMA = 1

METRIC_COLUMNS = ("t", "sum_trace_omega", "J_t", "Jhat_t")
EVENT_COLUMNS = ("time", "kind", "agent", "target", "u_i", "j", "u_j",
                 "solver_calls", "solver_wall_us")
DECISION_KINDS = ("arrival", "dwell_end", "resolve")


class SchemaError(Exception):
    """Artifact is missing its schema stamp or does not match it."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def _read_csv(path) -> pd.DataFrame:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
    _check(first == f"# schema: {SCHEMA}",
           f"{path}: expected '# schema: {SCHEMA}' first line, got {first!r}")
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def load_metrics(path) -> pd.DataFrame:
    """Sampled covariance trajectory (t, totals, running objectives)."""
    df = _read_csv(path)
    _check(tuple(df.columns[:4]) == METRIC_COLUMNS,
           f"{path}: unexpected metric columns {tuple(df.columns[:4])}")
    _check(all(c == f"omega_{i}" for i, c in enumerate(df.columns[4:])),
           f"{path}: per-target columns must be omega_0..omega_n")
    return df


def load_events(path) -> pd.DataFrame:
    df = _read_csv(path)
    _check(tuple(df.columns) == EVENT_COLUMNS,
           f"{path}: unexpected event columns {tuple(df.columns)}")
    return df


def load_summary(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    _check(doc.get("schema") == SCHEMA,
           f"{path}: summary schema {doc.get('schema')!r} unsupported")
    return doc


def load_config(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    _check(isinstance(doc, dict) and doc.get("schema") == SCHEMA,
           f"{path}: config schema {type(doc) is dict and doc.get('schema')!r} unsupported")
    for key in ("targets", "edges", "agents"):
        _check(key in doc, f"{path}: config lacks '{key}'")
    return doc


def load_comparison(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    _check(doc.get("schema") == SCHEMA,
           f"{path}: comparison schema {doc.get('schema')!r} unsupported")
    _check("cells" in doc and "averages" in doc,
           f"{path}: comparison lacks cells/averages")
    return doc


@dataclass(frozen=True)
class RunArtifacts:
    """The four files one `pmnet run` leaves behind, parsed."""

    config: dict
    metrics: pd.DataFrame
    events: pd.DataFrame
    summary: dict


def load_run(run_dir) -> RunArtifacts:
    run_dir = Path(run_dir)
    return RunArtifacts(config=load_config(run_dir / "config.yaml"),
                        metrics=load_metrics(run_dir / "metrics.csv"),
                        events=load_events(run_dir / "events.csv"),
                        summary=load_summary(run_dir / "summary.json"))


def agent_targets_at(events: pd.DataFrame, config: dict,
                     t: float) -> list[int | None]:
    """Each agent's target at time t, replayed from the event log.

    An agent sits at its last arrival target; from a departure row (no dwell
    commitment, next target set) until the matching arrival it is in transit
    and reported as None.
    """
    where: list[int | None] = [int(s) for s in config["agents"]]
    for row in events.itertuples(index=False):
        if row.time > t:
            break
        if pd.isna(row.agent):
            continue
        a = int(row.agent)
        if row.kind == "arrival":
            where[a] = int(row.target)
        elif row.kind in ("dwell_end", "resolve") and pd.isna(row.u_i) \
                and not pd.isna(row.j):
            where[a] = None
    return where
