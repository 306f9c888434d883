"""Matplotlib figure builders for run artifacts.

Each builder returns the Figure so callers (and the read-back tests) can
inspect every rendered quantity in data units; pass out= to also write an
image file.  Styling: yellow covariance bars, red agent markers, magenta
cycle contours.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import matplotlib.pyplot as plt
from matplotlib.container import BarContainer
from matplotlib.patches import Rectangle

from .artifacts import DECISION_KINDS, RunArtifacts, load_run

NODE_COLOR = "tab:blue"
EDGE_COLOR = "0.65"
BAR_COLOR = "gold"
AGENT_COLOR = "red"
CYCLE_COLOR = "magenta"
BAR_WIDTH = 0.035
SAVE_DPI = 150


def _metrics_row(metrics, t: float | None):
    if t is None:
        return metrics.iloc[-1]
    ts = metrics["t"].to_numpy()
    return metrics.iloc[int(np.argmin(np.abs(ts - t)))]


def plot_network_snapshot(config: dict, metrics, t: float | None = None,
                          agent_targets: Sequence[int | None] | None = None,
                          cycles: Sequence[Sequence[int]] | None = None,
                          bar_scale: float | None = None, out=None):
    """Targets, edges and covariance bars at one sampled instant.

    Bars rise from each node with height omega_i * bar_scale in data units
    (bar_scale defaults to 0.25 / max omega so the tallest bar spans a
    quarter of the unit square).  agent_targets defaults to the configured
    start targets; None entries (agents in transit) are not drawn.
    """
    row = _metrics_row(metrics, t)
    ids = [int(tp["id"]) for tp in config["targets"]]
    pos = {int(tp["id"]): (float(tp["pos"][0]), float(tp["pos"][1]))
           for tp in config["targets"]}
    omegas = {i: float(row[f"omega_{i}"]) for i in ids}
    if bar_scale is None:
        bar_scale = 0.25 / max(omegas.values())
    if agent_targets is None:
        agent_targets = [int(s) for s in config["agents"]]

    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    for i, j in config["edges"]:
        (x0, y0), (x1, y1) = pos[int(i)], pos[int(j)]
        ax.plot([x0, x1], [y0, y1], color=EDGE_COLOR, lw=1.0, zorder=1)
    # bars are built from raw Rectangle patches: Axes.bar stores the top edge
    # and re-derives the height, which costs an ulp and would break the exact
    # read-back contract of the rendered values
    bars = []
    for i in ids:
        x, y = pos[i]
        bars.append(Rectangle((x - BAR_WIDTH / 2.0, y), BAR_WIDTH,
                              omegas[i] * bar_scale, facecolor=BAR_COLOR,
                              edgecolor="black", linewidth=0.4, zorder=2))
        ax.add_patch(bars[-1])
    ax.add_container(BarContainer(tuple(bars), None,
                                  datavalues=[omegas[i] for i in ids],
                                  orientation="vertical"))
    ax.scatter([pos[i][0] for i in ids], [pos[i][1] for i in ids],
               s=70, color=NODE_COLOR, zorder=4)
    for i in ids:
        ax.annotate(str(i), pos[i], textcoords="offset points",
                    xytext=(5, -11), fontsize=8)
    stops = [pos[int(i)] for i in agent_targets if i is not None]
    ax.scatter([p[0] for p in stops], [p[1] for p in stops], s=150,
               marker="^", color=AGENT_COLOR, zorder=5)
    if cycles:
        for cyc in cycles:
            ring = [pos[int(i)] for i in cyc] + [pos[int(cyc[0])]]
            ax.plot([p[0] for p in ring], [p[1] for p in ring],
                    color=CYCLE_COLOR, lw=1.8, zorder=3)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(f"t = {float(row['t']):g}")
    if out is not None:
        fig.savefig(out, dpi=SAVE_DPI)
    return fig


def plot_objective_curves(runs: Sequence[RunArtifacts], metric: str = "J_t",
                          out=None):
    """Overlay one metric series per run, labeled from the run summaries."""
    if not runs:
        raise ValueError("no runs to plot")
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for run in runs:
        if metric not in run.metrics.columns:
            raise ValueError(f"metric {metric!r} not recorded")
        ax.plot(run.metrics["t"], run.metrics[metric],
                label=str(run.summary.get("controller", "run")))
    ax.set_xlabel("t")
    ax.set_ylabel(metric)
    ax.legend()
    if out is not None:
        fig.savefig(out, dpi=SAVE_DPI)
    return fig


def plot_solver_walls(runs: Sequence[RunArtifacts], window: int = 25,
                      out=None):
    """Rolling mean of per-decision solver wall time, one line per run.

    Runs recorded without --timing have all-zero wall columns; the plot is
    then a flat line, which read-back tests still verify exactly.
    """
    if not runs:
        raise ValueError("no runs to plot")
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for run in runs:
        dec = run.events[run.events["kind"].isin(DECISION_KINDS)]
        rolled = dec["solver_wall_us"].rolling(window, min_periods=1).mean()
        ax.plot(dec["time"], rolled,
                label=str(run.summary.get("controller", "run")))
    ax.set_xlabel("t")
    ax.set_ylabel(f"solver wall time (us, rolling mean of {window})")
    ax.legend()
    if out is not None:
        fig.savefig(out, dpi=SAVE_DPI)
    return fig


@dataclass(frozen=True)
class PlotJob:
    """One batch rendering task: artifact inputs, figure kind, image path."""

    kind: str
    inputs: tuple[str, ...]
    out: str
    options: dict = field(default_factory=dict)


def run_job(job: PlotJob) -> str:
    """Render one job and return the written image path."""
    runs = [load_run(p) for p in job.inputs]
    if job.kind == "snapshot":
        fig = plot_network_snapshot(runs[0].config, runs[0].metrics,
                                    out=job.out, **job.options)
    elif job.kind == "curves":
        fig = plot_objective_curves(runs, out=job.out, **job.options)
    elif job.kind == "walls":
        fig = plot_solver_walls(runs, out=job.out, **job.options)
    else:
        raise ValueError(f"unknown figure kind {job.kind!r}")
    plt.close(fig)
    return job.out
