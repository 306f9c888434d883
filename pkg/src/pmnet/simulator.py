"""Deterministic event-driven simulation of agents monitoring a network.

State between events evolves by the closed-form covariance solutions, so the
event loop is exact: no time stepping, no drift.  Events at equal timestamps
process in a fixed priority order (dwell end, arrival, covering notice,
uncovering notice, mission end) and then by insertion order, which together
with synchronous cover-set commits makes whole runs bit-reproducible.

Cover bookkeeping: a target is covered while an agent occupies it or is en
route to it.  The cover set is edited at the moment a decision commits; the
covering/uncovering events carry no state of their own and only prompt nearby
agents to re-solve.  Stale dwell-end events are invalidated through per-agent
epoch counters instead of being removed from the heap.

The true state and its estimate (needed only when tracking metrics are on)
are integrated in a second pass after the event loop, over the recorded
constant-mode segments.  The covariance trajectory never depends on that
pass, so enabling tracking cannot perturb the monitoring run.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .covariance import (InvariantViolation, contribution_active,
                         contribution_inactive, propagate_active,
                         propagate_inactive)
from .network import ProblemConfig
from .rhcp import LocalState

EV_DWELL_END = 0
EV_ARRIVAL = 1
EV_COVERING = 2
EV_UNCOVERING = 3
EV_END = 4

# relative slack for the runtime containment monitor; the closed forms keep
# trajectories inside the invariant interval up to rounding
_CONTAIN_SLACK = 1e-7

# tracking-law constants: output y = C phi + D, feedback gain K, reference
# r_i(t) = REF_AMP sin(REF_FREQ t + i)
TRACK_C = 1.0
TRACK_D = 0.0
TRACK_K = 2.0
REF_AMP = 10.0
REF_FREQ = 2.0


@dataclass
class RunOptions:
    sample_dt: float = 0.1
    window: float = 0.5
    tracking: bool = False
    oracle_state: bool = False
    truth_dt: float = 1e-3
    collect_segments: bool = False


@dataclass
class TrackingResult:
    j_c: float
    j_c_per_target: np.ndarray
    final_err: np.ndarray


class Agent:
    """Mutable per-agent simulation state."""

    __slots__ = ("id", "target", "traveling", "dest", "waiting", "epoch",
                 "planned_next", "planned_u", "last_u", "last_calls")

    def __init__(self, aid: int, start: int):
        self.id = aid
        self.target = start
        self.traveling = False
        self.dest = -1
        self.waiting: str | None = None
        self.epoch = 0
        self.planned_next: int | None = None
        self.planned_u = 0.0
        self.last_u = 0.0
        self.last_calls = 0


class Simulation:
    """One monitoring run; construct, then call run()."""

    def __init__(self, config: ProblemConfig, controller, options: RunOptions | None = None):
        self.config = config
        self.graph = config.graph
        self.derived = config.derived()
        self.controller = controller
        self.options = options or RunOptions()
        m = self.graph.num_targets
        self.t = 0.0
        self.omega = list(config.omega0)
        self.eta = [0] * m
        self.acc_active = [0.0] * m
        self.acc_inactive = [0.0] * m
        self.peak = list(config.omega0)
        self.cum_total = 0.0
        self.cum_active = 0.0
        self.agents = [Agent(k, s) for k, s in enumerate(config.agent_starts)]
        self.covered: set[int] = set(config.agent_starts)
        self.heap: list = []
        self._seq = 0
        self.events: list[dict] = []
        self.samples: list[list[float]] = []
        self._sample_cums: list[tuple[float, float]] = []
        self.decisions = 0
        self.solver_calls = 0
        self._collect_segments = self.options.tracking or self.options.collect_segments
        self.segments: list[list[tuple[float, float, int, float]]] = [[] for _ in range(m)]
        self._finished = False

    # -- scheduling helpers ------------------------------------------------

    def _push(self, t: float, prio: int, a: int, b: int) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (t, prio, self._seq, a, b))

    def horizon_budget(self) -> float:
        if self.config.horizon_mode == "remaining":
            return max(self.config.mission_time - self.t, 0.0)
        return self.config.horizon

    # -- state advance -----------------------------------------------------

    def _advance_to(self, tn: float) -> None:
        dt = tn - self.t
        if dt < -1e-12:
            raise InvariantViolation(f"time went backwards: {self.t} -> {tn}")
        if dt <= 0.0:
            return
        for i, td in enumerate(self.derived):
            om = self.omega[i]
            if self.eta[i]:
                area = contribution_active(td, om, dt)
                om_new = propagate_active(td, om, dt)
                self.acc_active[i] += area
                self.cum_active += area
            else:
                area = contribution_inactive(td, om, dt)
                om_new = propagate_inactive(td, om, dt)
                self.acc_inactive[i] += area
            self.cum_total += area
            if self._collect_segments:
                self.segments[i].append((self.t, tn, self.eta[i], om))
            if om_new > self.peak[i]:
                self.peak[i] = om_new
            floor = td.omega_ss * (1.0 - _CONTAIN_SLACK)
            ceil = td.omega_bar_ss * (1.0 + _CONTAIN_SLACK)
            if om_new < floor or om_new > ceil:
                raise InvariantViolation(
                    f"target {i} covariance {om_new} escaped "
                    f"({td.omega_ss}, {td.omega_bar_ss}) at t={tn}")
            self.omega[i] = om_new
        self.t = tn

    def _record_sample(self) -> None:
        t = self.t
        total = sum(self.omega)
        j_t = self.cum_total / t if t > 0 else total
        jhat_t = -self.cum_active / self.cum_total if self.cum_total > 0 else 0.0
        self.samples.append([t, total, j_t, jhat_t] + list(self.omega))
        self._sample_cums.append((self.cum_total, self.cum_active))

    # -- controller-facing API --------------------------------------------

    def uncovered_neighbors(self, i: int) -> list[int]:
        return [j for j in self.graph.neighbors(i) if j not in self.covered]

    def local_state(self, i: int) -> LocalState:
        omegas = {i: self.omega[i]}
        for j in self.uncovered_neighbors(i):
            omegas[j] = self.omega[j]
        return LocalState(target=i, t=self.t, omegas=omegas)

    def is_covered(self, j: int) -> bool:
        return j in self.covered

    def commit_dwell(self, agent: Agent, u: float, solver_calls: int = 0) -> None:
        if u < 0.0:
            raise InvariantViolation(f"negative dwell {u} for agent {agent.id}")
        agent.epoch += 1
        agent.waiting = None
        agent.last_u = u
        agent.last_calls += solver_calls
        self._push(self.t + u, EV_DWELL_END, agent.id, agent.epoch)

    def depart(self, agent: Agent, j: int, planned_u: float = 0.0,
               solver_calls: int = 0, travel_time: float | None = None) -> None:
        i = agent.target
        if j in self.covered:
            raise InvariantViolation(
                f"agent {agent.id} departing to covered target {j} at t={self.t}")
        tt = self.graph.rho(i, j) if travel_time is None else travel_time
        self.eta[i] = 0
        self.covered.discard(i)
        self.covered.add(j)
        agent.epoch += 1
        agent.waiting = None
        agent.traveling = True
        agent.dest = j
        agent.planned_next = j
        agent.planned_u = planned_u
        agent.last_calls += solver_calls
        self._push(self.t + tt, EV_ARRIVAL, agent.id, j)
        self._push(self.t, EV_COVERING, j, 1)
        self._push(self.t, EV_UNCOVERING, i, 0)

    def enter_wait(self, agent: Agent, reason: str) -> None:
        agent.epoch += 1
        agent.waiting = reason
        agent.planned_next = None
        agent.planned_u = 0.0

    # -- event loop --------------------------------------------------------

    def _dispatch_decision(self, kind: str, agent: Agent, fn,
                           log_only_if_acted: bool = False) -> None:
        agent.last_calls = 0
        agent.last_u = math.nan
        agent.planned_next = None
        agent.planned_u = 0.0
        epoch0 = agent.epoch
        tic = time.perf_counter_ns()
        fn()
        wall_us = (time.perf_counter_ns() - tic) / 1000.0
        if log_only_if_acted and agent.epoch == epoch0:
            return
        self.decisions += 1
        self.solver_calls += agent.last_calls
        self.events.append({
            "t": self.t, "kind": kind, "agent": agent.id, "target": agent.target,
            "u_i": None if math.isnan(agent.last_u) else agent.last_u,
            "j": agent.planned_next, "u_j": agent.planned_u if agent.planned_next
            is not None else None,
            "solver_calls": agent.last_calls, "solver_wall_us": wall_us})

    def _notify_cover_change(self, j: int, now_covered: bool) -> None:
        kind = "covering" if now_covered else "uncovering"
        self.events.append({"t": self.t, "kind": kind, "agent": None, "target": j,
                            "u_i": None, "j": None, "u_j": None,
                            "solver_calls": 0, "solver_wall_us": 0.0})
        for ag in self.agents:
            if ag.traveling:
                continue
            # waiting agents listen network-wide (their way out may be far);
            # dwelling agents only react to changes in their own neighborhood
            if ag.waiting is not None or j in self.graph.neighbors(ag.target):
                self._dispatch_decision(
                    "resolve", ag,
                    lambda a=ag: self.controller.on_cover_change(self, a, j, now_covered),
                    log_only_if_acted=True)

    def run(self) -> "RunResult":
        cfg = self.config
        T = cfg.mission_time
        self._push(T, EV_END, 0, 0)
        for ag in self.agents:
            self._push(0.0, EV_ARRIVAL, ag.id, ag.target)
            ag.traveling = True  # treat initial placement as an arrival at t=0
            ag.dest = ag.target
        if hasattr(self.controller, "start"):
            self.controller.start(self)

        sample_dt = self.options.sample_dt
        next_k = 0

        def flush_samples(upto: float) -> None:
            nonlocal next_k
            while True:
                ts = next_k * sample_dt
                if ts > upto + 1e-12 or ts > T + 1e-12:
                    break
                self._advance_to(min(ts, T))
                self._record_sample()
                next_k += 1

        while self.heap:
            te, prio, _, a, b = heapq.heappop(self.heap)
            if te > T + 1e-12:
                break
            flush_samples(te)
            self._advance_to(te)
            if prio == EV_END:
                flush_samples(T)
                self.events.append({"t": self.t, "kind": "end", "agent": None,
                                    "target": None, "u_i": None, "j": None,
                                    "u_j": None, "solver_calls": 0,
                                    "solver_wall_us": 0.0})
                break
            if prio == EV_ARRIVAL:
                ag = self.agents[a]
                if not ag.traveling or ag.dest != b:
                    raise InvariantViolation(f"arrival event desynchronized for agent {a}")
                for other in self.agents:
                    if other is not ag and not other.traveling and other.target == b:
                        raise InvariantViolation(
                            f"agents {other.id} and {a} both at target {b} at t={self.t}")
                ag.traveling = False
                ag.target = b
                ag.dest = -1
                self.eta[b] = 1
                self._dispatch_decision(
                    "arrival", ag, lambda: self.controller.on_arrival(self, ag))
            elif prio == EV_DWELL_END:
                ag = self.agents[a]
                if ag.epoch != b or ag.traveling or ag.waiting is not None:
                    continue  # superseded by a later decision
                self._dispatch_decision(
                    "dwell_end", ag, lambda: self.controller.on_dwell_end(self, ag))
            elif prio == EV_COVERING:
                self._notify_cover_change(a, True)
            elif prio == EV_UNCOVERING:
                self._notify_cover_change(a, False)
        flush_samples(T)
        self._advance_to(T)
        self._finished = True

        tracking = None
        if self.options.tracking:
            tracking = integrate_truth_and_estimate(
                cfg, self.segments, seed=cfg.seed, dt=self.options.truth_dt,
                oracle_state=self.options.oracle_state)
        return RunResult(summary=metrics_finalize(self, tracking),
                         samples=np.array(self.samples),
                         events=self.events, sim=self, tracking=tracking)


@dataclass
class RunResult:
    summary: dict
    samples: np.ndarray
    events: list[dict]
    sim: Simulation
    tracking: TrackingResult | None = None


def run(config: ProblemConfig, controller, options: RunOptions | None = None) -> RunResult:
    return Simulation(config, controller, options).run()


def tracking_control(td, phi_hat: float, t: float, tid: int) -> float:
    """Feedback linearizing tracking law for one target's input channel.

    Drives the output y = C phi + D toward r(t) = REF_AMP sin(REF_FREQ t + id)
    with first-order error dynamics de/dt = -K e under exact integration.
    """
    r = REF_AMP * math.sin(REF_FREQ * t + tid)
    rdot = REF_AMP * REF_FREQ * math.cos(REF_FREQ * t + tid)
    return -(TRACK_C * (td.a + TRACK_K) * phi_hat + TRACK_K * TRACK_D
             - (rdot + TRACK_K * r)) / (TRACK_C * td.b)


def _mode_and_omega_grids(config, segments, n, dt):
    """Per-step observation flags and closed-form covariances on the dt grid."""
    m = config.graph.num_targets
    derived = config.derived()
    eta = np.zeros((n, m), dtype=np.uint8)
    omega = np.empty((n, m))
    for i in range(m):
        td = derived[i]
        if not segments[i]:
            segs = [(0.0, config.mission_time, 0, config.omega0[i])]
        else:
            segs = segments[i]
        for (t0, t1, et, om0) in segs:
            k0 = int(round(t0 / dt))
            k1 = min(int(round(t1 / dt)), n)
            if k1 <= k0:
                continue
            rel = (np.arange(k0, k1) * dt) - t0
            if et:
                eta[k0:k1, i] = 1
                c1 = td.v2 * om0 - 1.0
                c2 = 1.0 - td.v1 * om0
                e = np.exp(-td.lam * rel)
                omega[k0:k1, i] = (c1 + c2 * e) / (td.v1 * c1 + td.v2 * c2 * e)
            else:
                a, q = td.a, td.q
                if abs(a) <= 1e-9:
                    omega[k0:k1, i] = om0 + q * rel
                else:
                    em = np.expm1(2.0 * a * rel)
                    omega[k0:k1, i] = om0 * (em + 1.0) + q * em / (2.0 * a)
    return eta, omega


def integrate_truth_and_estimate(config: ProblemConfig, segments, seed: int,
                                 dt: float = 1e-3, oracle_state: bool = False,
                                 noise: tuple[np.ndarray, np.ndarray] | None = None,
                                 return_trajectories: bool = False):
    """Euler-Maruyama truth and explicit-Euler estimator over a finished run.

    The estimator applies the innovation gain eta * omega * h / r with omega
    taken from the exact covariance trajectory, so this pass never feeds back
    into the monitoring simulation.  In oracle-state mode the estimator is
    clamped to the truth and process noise is disabled, which isolates the
    tracking law itself.  Optional pre-drawn standard-normal arrays (process,
    measurement), each of shape (n, m), support convergence studies on a
    common noise path.  With return_trajectories the tracking-error and
    estimation-error paths come back alongside the result.
    """
    m = config.graph.num_targets
    T = config.mission_time
    n = int(round(T / dt))
    derived = config.derived()
    eta, omega = _mode_and_omega_grids(config, segments, n, dt)

    a = np.array([t.a for t in config.graph.targets])
    b = np.array([t.b for t in config.graph.targets])
    q = np.array([t.q for t in config.graph.targets])
    h = np.array([t.h for t in config.graph.targets])
    r_var = np.array([t.r for t in config.graph.targets])
    ids = np.arange(m, dtype=float)

    rng = np.random.default_rng([seed, 0x7C1])
    err0 = rng.standard_normal(m) * np.sqrt(np.asarray(config.omega0))
    if noise is None:
        w_nrm = rng.standard_normal((n, m))
        v_nrm = rng.standard_normal((n, m))
    else:
        w_nrm, v_nrm = noise

    phi = (REF_AMP * np.sin(ids) - TRACK_D) / TRACK_C
    phi_hat = phi.copy() if oracle_state else phi - err0

    w_scale = 0.0 if oracle_state else math.sqrt(dt)
    v_scale = math.sqrt(1.0 / dt)

    abs_err_sum = np.zeros(m)
    traj_e = np.empty((n + 1, m)) if return_trajectories else None
    traj_est = np.empty((n + 1, m)) if return_trajectories else None
    e = TRACK_C * phi + TRACK_D - REF_AMP * np.sin(ids)
    if return_trajectories:
        traj_e[0] = e
        traj_est[0] = phi - phi_hat
    # trapezoid accumulation of |e|
    abs_err_sum += 0.5 * np.abs(e)
    for k in range(n):
        t = k * dt
        ref = REF_AMP * np.sin(REF_FREQ * t + ids)
        rdot = REF_AMP * REF_FREQ * np.cos(REF_FREQ * t + ids)
        u = -(TRACK_C * (a + TRACK_K) * phi_hat + TRACK_K * TRACK_D
              - (rdot + TRACK_K * ref)) / (TRACK_C * b)
        drift = a * phi + b * u
        phi = phi + dt * drift + np.sqrt(q) * w_scale * w_nrm[k]
        if oracle_state:
            phi_hat = phi.copy()
        else:
            z = h * phi + np.sqrt(r_var) * v_scale * v_nrm[k]
            gain = eta[k] * omega[k] * h / r_var
            phi_hat = phi_hat + dt * (a * phi_hat + b * u
                                      + gain * (z - h * phi_hat))
        t_next = (k + 1) * dt
        e = TRACK_C * phi + TRACK_D - REF_AMP * np.sin(REF_FREQ * t_next + ids)
        weight = 0.5 if k == n - 1 else 1.0
        abs_err_sum += weight * np.abs(e)
        if return_trajectories:
            traj_e[k + 1] = e
            traj_est[k + 1] = phi - phi_hat
    j_c_per = abs_err_sum * dt / T
    res = TrackingResult(j_c=float(np.mean(j_c_per)), j_c_per_target=j_c_per,
                         final_err=e)
    if return_trajectories:
        return res, traj_e, traj_est
    return res


def metrics_finalize(sim: Simulation, tracking: TrackingResult | None = None) -> dict:
    """Aggregate objectives of a finished run into a flat summary mapping."""
    T = sim.config.mission_time
    j_t = sim.cum_total / T
    jhat = -sim.cum_active / sim.cum_total if sim.cum_total > 0 else 0.0
    dec_rows = [ev for ev in sim.events if ev["kind"] in ("arrival", "dwell_end", "resolve")]
    walls = [ev["solver_wall_us"] for ev in dec_rows]
    return {
        "J_T": j_t,
        "Jhat_T": jhat,
        "J_W": max(sim.peak),
        "J_C": None if tracking is None else tracking.j_c,
        "decisions": len(dec_rows),
        "solver_calls": sim.solver_calls,
        "mean_solver_wall_us": float(np.mean(walls)) if walls else 0.0,
        "T": T,
        "seed": sim.config.seed,
    }


def window_average(result: RunResult, t0: float, t1: float) -> float:
    """Average instantaneous accumulation rate over [t0, t1] from samples."""
    samples = result.samples
    cums = result.sim._sample_cums
    ts = samples[:, 0]
    k0 = int(np.argmin(np.abs(ts - t0)))
    k1 = int(np.argmin(np.abs(ts - t1)))
    if k1 <= k0:
        raise ValueError("empty averaging window")
    return (cums[k1][0] - cums[k0][0]) / (ts[k1] - ts[k0])


def instantaneous_series(result: RunResult, window: float | None = None):
    """Windowed objective rates (t, J, Jhat) derived from the sample grid."""
    opts = result.sim.options
    win = opts.window if window is None else window
    step = max(1, int(round(win / opts.sample_dt)))
    ts = result.samples[:, 0]
    cums = np.array(result.sim._sample_cums)
    if len(ts) <= step:
        return np.empty((0, 3))
    d_tot = cums[step:, 0] - cums[:-step, 0]
    d_act = cums[step:, 1] - cums[:-step, 1]
    dt = ts[step:] - ts[:-step]
    j = d_tot / dt
    with np.errstate(invalid="ignore", divide="ignore"):
        jhat = np.where(d_tot > 0, -d_act / d_tot, 0.0)
    return np.column_stack([ts[:-step], j, jhat])
