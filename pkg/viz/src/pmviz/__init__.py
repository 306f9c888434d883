"""Figure generation for persistent-monitoring run artifacts."""

from .artifacts import (RunArtifacts, SchemaError, agent_targets_at,
                        load_comparison, load_config, load_events,
                        load_metrics, load_run, load_summary)
from .figures import (PlotJob, plot_network_snapshot, plot_objective_curves,
                      plot_solver_walls, run_job)

__all__ = [
    "PlotJob", "RunArtifacts", "SchemaError", "agent_targets_at",
    "load_comparison", "load_config", "load_events", "load_metrics",
    "load_run", "load_summary", "plot_network_snapshot",
    "plot_objective_curves", "plot_solver_walls", "run_job",
]
