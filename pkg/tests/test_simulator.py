"""Event-loop bookkeeping, metrics, and the truth/estimator integration.

The simulator advances covariances between events with the closed forms, so
every accumulator can be cross-checked two independent ways: by composing the
closed-form contribution integrals over the recorded segments, and by
adaptive Simpson quadrature over the propagated trajectories.
"""

import math

import numpy as np
import pytest

from pmnet.covariance import (InvariantViolation, contribution_active,
                              contribution_inactive, propagate_active,
                              propagate_inactive)
from pmnet.network import NetworkGraph, ProblemConfig, generate_pc
from pmnet.controllers import BdcController, make_controller
from pmnet.simulator import (RunOptions, Simulation, integrate_truth_and_estimate,
                             instantaneous_series, run, tracking_control,
                             window_average, TRACK_K)

from helpers import make_target
from oracles import adaptive_simpson


def _strip_wall(events):
    return [{k: v for k, v in e.items() if k != "solver_wall_us"}
            for e in events]


def _line_config(specs, starts, omega0, T=10.0, H=10.0, seed=0):
    """Targets on a line, consecutive pairs joined, spacing 0.5."""
    targets = []
    for i, (a, q, g) in enumerate(specs):
        p, _ = make_target(a, q, g, tid=i, pos=(0.5 * i, 0.0))
        targets.append(p)
    edges = frozenset(frozenset((i, i + 1)) for i in range(len(specs) - 1))
    graph = NetworkGraph(targets=tuple(targets), edges=edges)
    return ProblemConfig(graph=graph, agent_starts=tuple(starts),
                         omega0=tuple(omega0), mission_time=T, horizon=H,
                         seed=seed)


class ParkController:
    """Dwells at the start until past mission end."""

    def on_arrival(self, sim, agent):
        sim.commit_dwell(agent, sim.config.mission_time + 1.0)

    def on_dwell_end(self, sim, agent):
        raise AssertionError("parked dwell must outlive the mission")

    def on_cover_change(self, sim, agent, target, now_covered):
        pass


# -- runs without agents: pure closed-form evolution -------------------------


def test_no_agent_run_matches_closed_form():
    specs = [(-0.2, 0.8, 0.5), (0.15, 0.5, 0.4)]
    om0 = []
    for a, q, g in specs:
        _, td = make_target(a, q, g)
        hi = min(td.omega_bar_ss, 10.0 * td.omega_ss)
        om0.append(0.5 * (td.omega_ss + hi))
    cfg = _line_config(specs, starts=(), omega0=om0, T=5.0)
    res = run(cfg, None)

    ts = res.samples[:, 0]
    assert np.allclose(ts, np.arange(51) * 0.1, atol=1e-12)
    deriveds = cfg.derived()
    for i, td in enumerate(deriveds):
        expected = [propagate_inactive(td, om0[i], t) for t in ts]
        assert np.allclose(res.samples[:, 4 + i], expected, rtol=1e-12)
    area = sum(contribution_inactive(td, om0[i], 5.0)
               for i, td in enumerate(deriveds))
    assert res.summary["J_T"] == pytest.approx(area / 5.0, rel=1e-12)
    assert res.summary["Jhat_T"] == 0.0
    assert res.summary["decisions"] == 0
    assert [e["kind"] for e in res.events] == ["end"]
    # the t=0 metrics row reports the instantaneous-limit value sum(omega0)
    assert res.samples[0, 2] == pytest.approx(sum(om0), rel=1e-12)


def test_no_agent_stable_target_approaches_idle_ceiling():
    a, q, g = -0.3, 1.0, 0.5
    _, td = make_target(a, q, g)
    om0 = td.omega_ss + 0.1 * (td.omega_bar_ss - td.omega_ss)
    T = 200.0 / (2.0 * abs(a))
    cfg = _line_config([(a, q, g)], starts=(), omega0=[om0], T=T)
    res = run(cfg, None)
    assert res.sim.omega[0] == pytest.approx(td.omega_bar_ss, abs=1e-3)


# -- parked agent: active-mode limit and trivial metrics ---------------------


def test_parked_agent_reaches_active_steady_state():
    a, q, g = 0.2, 1.0, 0.5
    _, td = make_target(a, q, g)
    om0 = 4.0 * td.omega_ss
    T = 200.0 / td.lam
    cfg = _line_config([(a, q, g)], starts=(0,), omega0=[om0], T=T)
    res = run(cfg, ParkController(), RunOptions(collect_segments=True))
    assert res.sim.omega[0] == pytest.approx(td.omega_ss, abs=1e-3)
    # the sole target is observed for the whole mission
    assert res.summary["Jhat_T"] == pytest.approx(-1.0, abs=1e-15)
    assert res.summary["J_W"] == pytest.approx(om0)  # monotone decay
    segs = res.sim.segments[0]
    assert segs[0][2] == 1 and segs[0][3] == pytest.approx(om0)
    assert segs[0][0] == 0.0 and segs[-1][1] == pytest.approx(T)


def test_mission_end_truncates_pending_dwell():
    cfg = _line_config([(0.1, 0.5, 0.5)], starts=(0,), omega0=[6.0], T=3.0)
    res = run(cfg, ParkController())
    assert res.events[-1]["kind"] == "end"
    assert res.sim.t == 3.0
    td = cfg.derived()[0]
    assert res.sim.omega[0] == pytest.approx(
        propagate_active(td, 6.0, 3.0), rel=1e-12)


# -- conservation of the accumulators ---------------------------------------


@pytest.fixture(scope="module")
def bdc_run():
    cfg = generate_pc(6, 2, sigma=0.7, seed=77, mission_time=25.0)
    res = run(cfg, BdcController(), RunOptions(collect_segments=True))
    return cfg, res


def test_segments_tile_the_mission(bdc_run):
    cfg, res = bdc_run
    deriveds = cfg.derived()
    for i, segs in enumerate(res.sim.segments):
        assert segs[0][0] == 0.0
        assert segs[-1][1] == pytest.approx(cfg.mission_time)
        assert segs[0][3] == pytest.approx(cfg.omega0[i])
        for (s0, s1) in zip(segs, segs[1:]):
            assert s0[1] == pytest.approx(s1[0], abs=1e-12)
            prop = propagate_active if s0[2] else propagate_inactive
            assert s1[3] == pytest.approx(
                prop(deriveds[i], s0[3], s0[1] - s0[0]), rel=1e-9)


def test_accumulators_match_contribution_forms(bdc_run):
    cfg, res = bdc_run
    deriveds = cfg.derived()
    total = 0.0
    active = 0.0
    for i, segs in enumerate(res.sim.segments):
        for (t0, t1, eta, om0) in segs:
            w = t1 - t0
            if eta:
                a = contribution_active(deriveds[i], om0, w)
                active += a
            else:
                a = contribution_inactive(deriveds[i], om0, w)
            total += a
    assert res.sim.cum_total == pytest.approx(total, rel=1e-9)
    assert res.sim.cum_active == pytest.approx(active, rel=1e-9)


def test_accumulators_match_simpson_quadrature(bdc_run):
    cfg, res = bdc_run
    deriveds = cfg.derived()
    total = 0.0
    for i, segs in enumerate(res.sim.segments):
        td = deriveds[i]
        for (t0, t1, eta, om0) in segs:
            prop = propagate_active if eta else propagate_inactive
            total += adaptive_simpson(lambda s: prop(td, om0, s),
                                      0.0, t1 - t0, 1e-10)
    assert res.sim.cum_total == pytest.approx(total, rel=1e-7)


def test_peak_tracks_dense_trajectory_maximum(bdc_run):
    cfg, res = bdc_run
    deriveds = cfg.derived()
    for i, segs in enumerate(res.sim.segments):
        td = deriveds[i]
        dense = cfg.omega0[i]
        endpoint = cfg.omega0[i]
        for (t0, t1, eta, om0) in segs:
            prop = propagate_active if eta else propagate_inactive
            w = t1 - t0
            for s in np.linspace(0.0, w, 200):
                dense = max(dense, prop(td, om0, s))
            endpoint = max(endpoint, prop(td, om0, w))
        assert res.sim.peak[i] == pytest.approx(endpoint, rel=1e-12)
        # interval interiors are monotone, so endpoints already saw the max
        assert dense <= res.sim.peak[i] * (1.0 + 1e-9)
    assert res.summary["J_W"] == pytest.approx(max(res.sim.peak), rel=1e-15)


# -- determinism and pass separation ----------------------------------------


def test_repeat_runs_identical_modulo_wall_clock():
    cfg = generate_pc(5, 2, sigma=0.7, seed=8)
    r1 = run(cfg, make_controller("rhc", cfg))
    r2 = run(cfg, make_controller("rhc", cfg))
    assert np.array_equal(r1.samples, r2.samples)
    assert _strip_wall(r1.events) == _strip_wall(r2.events)
    s1 = {k: v for k, v in r1.summary.items() if k != "mean_solver_wall_us"}
    s2 = {k: v for k, v in r2.summary.items() if k != "mean_solver_wall_us"}
    assert s1 == s2


def test_tracking_pass_does_not_touch_monitoring():
    cfg = generate_pc(5, 2, sigma=0.7, seed=8, mission_time=20.0)
    plain = run(cfg, make_controller("rhc", cfg))
    tracked = run(cfg, make_controller("rhc", cfg), RunOptions(tracking=True))
    assert np.array_equal(plain.samples, tracked.samples)
    assert _strip_wall(plain.events) == _strip_wall(tracked.events)
    assert tracked.summary["J_T"] == plain.summary["J_T"]
    assert tracked.tracking is not None
    assert math.isfinite(tracked.summary["J_C"])
    assert tracked.summary["J_C"] > 0.0


# -- decision protocol edge cases -------------------------------------------


class CollidingController:
    """Forces a departure toward an occupied target."""

    def on_arrival(self, sim, agent):
        sim.commit_dwell(agent, 0.0)

    def on_dwell_end(self, sim, agent):
        sim.depart(agent, 1 - agent.target)

    def on_cover_change(self, sim, agent, target, now_covered):
        pass


def test_departing_to_covered_target_raises():
    cfg = _line_config([(0.1, 0.5, 0.5), (0.1, 0.5, 0.5)], starts=(0, 1),
                       omega0=[6.0, 6.0], T=5.0)
    with pytest.raises(InvariantViolation):
        run(cfg, CollidingController())


class RecommitOnCover:
    """Agent 0 stretches its dwell when notified; agent 1 hops once."""

    def __init__(self):
        self.dwell_end_times = []

    def on_arrival(self, sim, agent):
        if agent.id == 0:
            sim.commit_dwell(agent, 1.0)
        else:
            sim.commit_dwell(agent, sim.config.mission_time + 1.0
                             if agent.target == 1 else 0.5)

    def on_dwell_end(self, sim, agent):
        if agent.id == 0:
            self.dwell_end_times.append(sim.t)
            sim.commit_dwell(agent, sim.config.mission_time + 1.0)
        else:
            sim.depart(agent, 1)

    def on_cover_change(self, sim, agent, target, now_covered):
        if agent.id == 0 and now_covered:
            sim.commit_dwell(agent, 5.0)  # replaces the pending deadline


def test_recommit_invalidates_stale_dwell_end():
    # line 0-1-2; agent 0 parks at 0, agent 1 starts at 2 and moves to 1
    specs = [(0.1, 0.5, 0.5)] * 3
    cfg = _line_config(specs, starts=(0, 2), omega0=[6.0, 6.0, 6.0], T=10.0)
    ctrl = RecommitOnCover()
    run(cfg, ctrl)
    # agent 1 departs at t=0.5, covering target 1 immediately; agent 0's
    # original t=1 deadline must be superseded by the t=5.5 one
    assert ctrl.dwell_end_times == [pytest.approx(5.5)]


# -- windowed metrics --------------------------------------------------------


def test_window_average_matches_closed_form():
    a, q, g = 0.15, 0.7, 0.4
    _, td = make_target(a, q, g)
    cfg = _line_config([(a, q, g)], starts=(), omega0=[5.0], T=4.0)
    res = run(cfg, None)

    def area(t):
        return contribution_inactive(td, 5.0, t)

    got = window_average(res, 1.0, 3.0)
    assert got == pytest.approx((area(3.0) - area(1.0)) / 2.0, rel=1e-12)

    series = instantaneous_series(res)
    k = int(np.argmin(np.abs(series[:, 0] - 1.0)))
    assert series[k, 0] == pytest.approx(1.0)
    expected = (area(1.5) - area(1.0)) / 0.5
    assert series[k, 1] == pytest.approx(expected, rel=1e-12)
    assert np.all(series[:, 2] == 0.0)  # nothing observed, Jhat rate is zero


# -- truth and estimator integration ----------------------------------------


def _single_target_config(a=0.1, q=0.5, g=0.5, om0=3.0, T=10.0):
    return _line_config([(a, q, g)], starts=(), omega0=[om0], T=T, seed=5)


def test_oracle_tracking_error_is_tiny():
    cfg = _single_target_config(T=10.0)
    segs = [[(0.0, 10.0, 1, 3.0)]]
    res = integrate_truth_and_estimate(cfg, segs, seed=5, oracle_state=True)
    # feedback linearization gives de/dt = -K e with e(0) = 0 exactly
    assert res.j_c < 5e-3
    assert abs(res.final_err[0]) < 5e-3


def test_tracking_law_exponential_decay():
    p, _ = make_target(0.2, 0.6, 0.5)
    dt = 1e-5
    phi = 1.0  # output starts offset by 1 from r(0) = 0 (C=1, D=0)
    for k in range(100000):
        t = k * dt
        u = tracking_control(p, phi, t, tid=0)
        phi += dt * (p.a * phi + p.b * u)
    e1 = phi - 10.0 * math.sin(2.0)
    assert e1 == pytest.approx(math.exp(-TRACK_K), abs=1e-3)


def test_estimation_error_variance_matches_covariance():
    cfg = _single_target_config(a=0.1, q=0.5, g=0.5, om0=3.0, T=30.0)
    td = cfg.derived()[0]
    segs = [[(0.0, 30.0, 1, 3.0)]]
    finals = []
    for seed in range(150):
        _, _, est = integrate_truth_and_estimate(
            cfg, segs, seed=seed, return_trajectories=True)
        finals.append(est[-1, 0])
    var = float(np.var(finals))
    target = propagate_active(td, 3.0, 30.0)  # almost omega_ss by t=30
    assert var == pytest.approx(target, rel=0.25)
    assert abs(np.mean(finals)) < 3.0 * math.sqrt(target / 150)


def test_truth_integration_first_order_in_dt():
    cfg = _single_target_config(T=2.0)
    segs = [[(0.0, 2.0, 1, 3.0)]]
    rng = np.random.default_rng(42)
    n_fine = 8000  # dt = 2.5e-4
    wf = rng.standard_normal((n_fine, 1))
    vf = rng.standard_normal((n_fine, 1))

    def coarsen(x):
        return (x[0::2] + x[1::2]) / math.sqrt(2.0)

    levels = {}
    w, v = wf, vf
    for dt in (2.5e-4, 5e-4, 1e-3, 2e-3):
        _, traj_e, _ = integrate_truth_and_estimate(
            cfg, segs, seed=0, dt=dt, noise=(w, v), return_trajectories=True)
        levels[dt] = traj_e[-1, 0]
        w, v = coarsen(w), coarsen(v)

    err_mid = abs(levels[1e-3] - levels[2.5e-4])
    err_big = abs(levels[2e-3] - levels[2.5e-4])
    # additive noise makes Euler-Maruyama strong order 1
    assert err_big > err_mid
    assert err_big / err_mid == pytest.approx(2.0, rel=0.8)


def test_supplied_zero_noise_reduces_to_ode():
    cfg = _single_target_config(T=5.0)
    segs = [[(0.0, 5.0, 1, 3.0)]]
    n = 5000
    zeros = np.zeros((n, 1))
    res, traj_e, est = integrate_truth_and_estimate(
        cfg, segs, seed=9, dt=1e-3, noise=(zeros, zeros),
        return_trajectories=True)
    # no noise: the only estimation error is the initial draw, decaying
    assert abs(est[-1, 0]) < abs(est[0, 0]) * 0.1
    assert res.j_c < np.abs(traj_e).max() + 1e-12
