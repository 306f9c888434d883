"""Acceptance check: rendered quantities equal the source artifact values."""

from pmviz import load_run, plot_network_snapshot, plot_objective_curves


def test_s01_plot_readback_matches_source_artifacts(rhc_run):
    run = load_run(rhc_run)

    fig = plot_network_snapshot(run.config, run.metrics, bar_scale=1.0)
    ax = fig.axes[0]
    assert len(ax.collections[0].get_offsets()) == len(run.config["targets"])
    edge_lines = [ln for ln in ax.lines]
    assert len(edge_lines) == len(run.config["edges"])
    last = run.metrics.iloc[-1]
    for i, patch in enumerate(ax.containers[0]):
        assert patch.get_height() == last[f"omega_{i}"]

    curve = plot_objective_curves([run]).axes[0].lines[0]
    assert curve.get_ydata()[-1] == run.summary["J_T"]
