"""Decision policies driving the event simulator.

Three families:

* RhcController re-solves a two-variable dwell/next-dwell problem at every
  arrival (and whenever the local cover set changes mid-dwell) and a
  one-variable next-dwell problem when the dwell ends.  Candidates are the
  uncovered graph neighbors; ties break toward the lowest target id.
* BdcController dwells until the covariance drops to a small margin above its
  active steady state, then hops to the uncovered neighbor with the largest
  covariance.  No numeric solver involved.
* PeriodicController executes per-agent closed tours planned once up front by
  mtsp_plan: targets are split into one cluster per agent (spectral cut +
  k-means on the shortest-path geometry), each cluster gets a nearest-neighbor
  tour improved by 2-opt, and per-target dwells are a common scale times
  covariance-gap weights, the scale tuned by golden-section search on a
  finite-horizon cost surrogate.  Travel between consecutive tour stops uses
  shortest-path time; intermediate targets on such a leg are not observed.
  The three modes share the plan and differ only in how the dwell at each stop
  is chosen: the planned value (mtsp), a fresh one-shot receding-horizon solve
  (rhc-p), or the threshold rule (bdc-p).

Agents never travel to a covered target.  When a policy has no admissible
move it parks the agent in a waiting state; the simulator replays the pending
decision on every uncovering event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.random import default_rng
from scipy.cluster.vq import kmeans2
from scipy.sparse.csgraph import shortest_path

from .covariance import (active_crossing_time, propagate_active,
                         propagate_inactive)
from .network import ConfigError, ProblemConfig
from .rhcp import (LocalState, build_rhcp1, build_rhcp2, select_next_visit,
                   solve_rhcp1, solve_rhcp2, SolverResult)

# Fractional margin above the active steady state at which the threshold
# controller stops dwelling.
BDC_EPSILON = 0.075

CONTROLLER_NAMES = ("rhc", "bdc", "mtsp", "rhc-p", "bdc-p", "rhc-l", "rhc-al")


def bdc_dwell_time(td, omega: float, epsilon: float = BDC_EPSILON) -> float:
    """Dwell needed to bring omega down to (1 + epsilon) * omega_ss, or 0."""
    thr = (1.0 + epsilon) * td.omega_ss
    if omega <= thr:
        return 0.0
    return active_crossing_time(td, omega, thr)


class RhcController:
    """Event-driven receding-horizon policy."""

    name = "rhc"

    # -- single-candidate solves, overridable by the learning variants ------

    def _solve_arrival(self, sim, ls: LocalState, j: int,
                       budget_total: float) -> SolverResult:
        i = ls.target
        derived = sim.derived
        rho = sim.graph.rho(i, j)
        others = [(derived[k], ls.omegas[k]) for k in ls.omegas
                  if k not in (i, j)]
        coeffs = build_rhcp1(derived[i], ls.omegas[i], derived[j],
                             ls.omegas[j], rho, others)
        return solve_rhcp1(coeffs, budget_total - rho)

    def _solve_dwell_end(self, sim, ls: LocalState, j: int,
                         budget_total: float) -> SolverResult:
        i = ls.target
        derived = sim.derived
        rho = sim.graph.rho(i, j)
        idle = [(derived[k], ls.omegas[k]) for k in ls.omegas if k != j]
        coeffs = build_rhcp2(derived[j], ls.omegas[j], rho, idle)
        return solve_rhcp2(coeffs, budget_total - rho)

    def _record_full_solve(self, sim, agent, kind: str, ls: LocalState,
                           j_star: int) -> None:
        """Hook for the learning variants; the plain policy keeps nothing."""

    # -- decision bodies ----------------------------------------------------

    def _dwell_decision(self, sim, agent) -> None:
        """Joint dwell/next choice; runs at arrival and on mid-dwell re-solves."""
        ls = sim.local_state(agent.target)
        budget_total = sim.horizon_budget()
        cands = [j for j in ls.candidates()
                 if sim.graph.rho(agent.target, j) <= budget_total]
        if not cands:
            if agent.waiting is None:
                sim.enter_wait(agent, "arrival")
            return
        results = {j: self._solve_arrival(sim, ls, j, budget_total)
                   for j in cands}
        j_star = select_next_visit(results)
        self._record_full_solve(sim, agent, "arrival", ls, j_star)
        res = results[j_star]
        agent.planned_next = j_star
        agent.planned_u = res.u_j
        sim.commit_dwell(agent, res.u_i, solver_calls=len(results))

    def _depart_decision(self, sim, agent) -> None:
        ls = sim.local_state(agent.target)
        budget_total = sim.horizon_budget()
        cands = [j for j in ls.candidates()
                 if sim.graph.rho(agent.target, j) <= budget_total]
        if not cands:
            if agent.waiting is None:
                sim.enter_wait(agent, "dwell_end")
            return
        results = {j: self._solve_dwell_end(sim, ls, j, budget_total)
                   for j in cands}
        j_star = select_next_visit(results)
        self._record_full_solve(sim, agent, "dwell_end", ls, j_star)
        sim.depart(agent, j_star, planned_u=results[j_star].u_j,
                   solver_calls=len(results))

    # -- simulator hooks ----------------------------------------------------

    def on_arrival(self, sim, agent) -> None:
        self._dwell_decision(sim, agent)

    def on_dwell_end(self, sim, agent) -> None:
        self._depart_decision(sim, agent)

    def on_cover_change(self, sim, agent, target: int, now_covered: bool) -> None:
        if agent.waiting == "arrival":
            if not now_covered:
                self._dwell_decision(sim, agent)
        elif agent.waiting == "dwell_end":
            if not now_covered:
                self._depart_decision(sim, agent)
        elif agent.waiting is None:
            # dwelling with a committed deadline: the candidate set changed,
            # so re-solve from the current state and replace the deadline
            self._dwell_decision(sim, agent)


class BdcController:
    """Threshold dwell, highest-covariance next hop."""

    name = "bdc"

    def __init__(self, epsilon: float = BDC_EPSILON):
        self.epsilon = epsilon

    def on_arrival(self, sim, agent) -> None:
        i = agent.target
        u = bdc_dwell_time(sim.derived[i], sim.omega[i], self.epsilon)
        sim.commit_dwell(agent, u)

    def on_dwell_end(self, sim, agent) -> None:
        cands = sim.uncovered_neighbors(agent.target)
        if not cands:
            if agent.waiting is None:
                sim.enter_wait(agent, "dwell_end")
            return
        j = max(cands, key=lambda k: (sim.omega[k], -k))
        sim.depart(agent, j)

    def on_cover_change(self, sim, agent, target: int, now_covered: bool) -> None:
        if agent.waiting == "dwell_end" and not now_covered:
            self.on_dwell_end(sim, agent)


# -- periodic tours ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CycleAssignment:
    """Per-agent closed tours with planned dwells.

    cycles[a] lists target ids in visiting order for agent a; dwells maps
    target id to its planned dwell; labels[i] is the cluster (agent) owning
    target i; scales[a] is the tuned dwell scale of cycle a; sp is the full
    shortest-path travel-time matrix.
    """

    cycles: tuple[tuple[int, ...], ...]
    dwells: dict[int, float]
    labels: tuple[int, ...]
    scales: tuple[float, ...]
    sp: np.ndarray


def _sp_matrix(graph) -> np.ndarray:
    m = graph.num_targets
    dist = np.full((m, m), np.inf)
    np.fill_diagonal(dist, 0.0)
    for e in graph.edges:
        i, j = sorted(e)
        d = graph.rho(i, j)
        dist[i, j] = dist[j, i] = d
    return shortest_path(dist, method="D", directed=False)


def _spectral_labels(graph, k: int, seed: int) -> np.ndarray:
    """Split targets into k groups by spectral clustering on edge lengths.

    Gaussian similarity exp(-d^2 / 2 sbar^2) on graph edges with sbar the
    mean edge length, symmetric normalized Laplacian, k-means on the
    row-normalized bottom eigenvectors.  Falls back to a round-robin split
    if k-means keeps producing empty groups.
    """
    m = graph.num_targets
    if k >= m:
        return np.arange(m)
    if k == 1:
        return np.zeros(m, dtype=int)
    lengths = [graph.rho(*sorted(e)) for e in graph.edges]
    sbar = float(np.mean(lengths)) if lengths else 1.0
    if sbar <= 0.0:
        sbar = 1.0
    aff = np.zeros((m, m))
    for e in graph.edges:
        i, j = sorted(e)
        aff[i, j] = aff[j, i] = math.exp(-graph.rho(i, j) ** 2
                                         / (2.0 * sbar * sbar))
    deg = aff.sum(axis=1)
    deg[deg == 0.0] = 1.0
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(m) - (dinv[:, None] * aff) * dinv[None, :]
    _, vecs = np.linalg.eigh(lap)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    emb = emb / norms
    for attempt in range(10):
        _, labels = kmeans2(emb, k, minit="++",
                            seed=default_rng([seed, attempt]))
        if len(set(labels.tolist())) == k:
            return labels.astype(int)
    return np.arange(m) % k


def _assign_clusters(labels: np.ndarray, starts, sp: np.ndarray) -> list[int]:
    """Match agents to clusters, preferring the cluster holding the start."""
    k = len(starts)
    members = {c: np.flatnonzero(labels == c) for c in range(k)}
    owner = [-1] * k
    assigned = [-1] * k
    for aid, s in enumerate(starts):
        c = int(labels[s])
        if owner[c] == -1:
            owner[c] = aid
            assigned[aid] = c
    for aid, s in enumerate(starts):
        if assigned[aid] != -1:
            continue
        free = [c for c in range(k) if owner[c] == -1]
        best = min(free, key=lambda c: (min(sp[s, mm] for mm in members[c]), c))
        owner[best] = aid
        assigned[aid] = best
    return assigned


def _nn_tour(members: list[int], first: int, sp: np.ndarray) -> list[int]:
    tour = [first]
    rest = set(members) - {first}
    while rest:
        nxt = min(rest, key=lambda c: (sp[tour[-1], c], c))
        tour.append(nxt)
        rest.discard(nxt)
    return tour


def _two_opt(tour: list[int], sp: np.ndarray) -> list[int]:
    n = len(tour)
    if n < 4:
        return tour
    for _ in range(30):
        improved = False
        for a in range(1, n - 1):
            for b in range(a + 1, n):
                i0, i1 = tour[a - 1], tour[a]
                j0, j1 = tour[b], tour[(b + 1) % n]
                if i0 == j1:
                    continue  # full reversal, same cycle
                delta = sp[i0, j0] + sp[i1, j1] - sp[i0, i1] - sp[j0, j1]
                if delta < -1e-9:
                    tour[a:b + 1] = tour[a:b + 1][::-1]
                    improved = True
        if not improved:
            break
    return tour


def _dwell_weights(derived, members) -> np.ndarray:
    """Mean-one weights proportional to each target's covariance gap."""
    gaps = []
    for i in members:
        d = derived[i]
        hi = min(d.omega_bar_ss, 10.0 * d.omega_ss)
        gaps.append(max(hi - d.omega_ss, 1e-6))
    g = np.array(gaps)
    return g / g.mean()


_PEAK_DIVERGED = 1e12
_PEAK_ITERS = 300
_PEAK_TOL = 1e-10


def cycle_peak(derived, cycle, weights, sp: np.ndarray, scale: float) -> float:
    """Periodic steady-state peak covariance of the cycle at a dwell scale.

    Each target sees one observed stretch of scale * weight per period and
    idles the rest; its covariance peaks just before the dwell.  The
    per-period map is iterated to its fixed point from the active steady
    state (it increases monotonically, so divergence means the scale cannot
    stabilize that target and the value is infinite).  Returns the largest
    per-target peak.
    """
    n = len(cycle)
    legs = [sp[cycle[p], cycle[(p + 1) % n]] for p in range(n)]
    dwell = [scale * w for w in weights]
    period = sum(legs) + sum(dwell)
    if period <= 1e-9:
        return math.inf
    worst = 0.0
    for p, i in enumerate(cycle):
        td = derived[i]
        idle = period - dwell[p]
        om = td.omega_ss
        for _ in range(_PEAK_ITERS):
            nxt = propagate_inactive(td, propagate_active(td, om, dwell[p]),
                                     idle)
            if not math.isfinite(nxt) or nxt > _PEAK_DIVERGED:
                return math.inf
            if abs(nxt - om) <= _PEAK_TOL * max(1.0, om):
                om = nxt
                break
            om = nxt
        worst = max(worst, om)
    return worst


# dwell-scale search interval (seconds) and golden-section iteration count
SCALE_LO = 0.01
SCALE_HI = 30.0
_GOLDEN_ITERS = 60


def golden_section(fn, lo: float, hi: float, iters: int = _GOLDEN_ITERS) -> float:
    """Argmin of fn on [lo, hi] assuming a single valley."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def mtsp_plan(config: ProblemConfig, seed: int | None = None) -> CycleAssignment:
    """Plan one closed tour per agent covering all targets.

    Clustering, tours and dwell scales are all deterministic in the seed
    (config.seed unless overridden).
    """
    if seed is None:
        seed = config.seed
    graph = config.graph
    derived = config.derived()
    sp = _sp_matrix(graph)
    if not np.all(np.isfinite(sp)):
        raise ConfigError("target network must be connected to plan tours")
    k = config.num_agents
    labels = _spectral_labels(graph, k, seed)
    assigned = _assign_clusters(labels, config.agent_starts, sp)

    cycles: list[tuple[int, ...]] = []
    scales: list[float] = []
    dwells: dict[int, float] = {}
    relabeled = np.empty(graph.num_targets, dtype=int)
    for aid in range(k):
        members = [int(i) for i in np.flatnonzero(labels == assigned[aid])]
        relabeled[members] = aid
        start = config.agent_starts[aid]
        if start in members:
            first = start
        else:
            first = min(members, key=lambda c: (sp[start, c], c))
        tour = _two_opt(_nn_tour(members, first, sp), sp)
        weights = _dwell_weights(derived, tour)
        if len(tour) == 1:
            scale = 1.0
        else:
            scale = golden_section(
                lambda s: cycle_peak(derived, tour, weights, sp, s),
                SCALE_LO, SCALE_HI)
        for i, w in zip(tour, weights):
            dwells[i] = scale * float(w)
        cycles.append(tuple(tour))
        scales.append(scale)
    return CycleAssignment(cycles=tuple(cycles), dwells=dwells,
                           labels=tuple(int(x) for x in relabeled),
                           scales=tuple(scales), sp=sp)


class PeriodicController:
    """Executes the planned tours; mode picks the dwell rule at each stop."""

    def __init__(self, config: ProblemConfig, mode: str,
                 plan: CycleAssignment | None = None):
        if mode not in ("mtsp", "rhc-p", "bdc-p"):
            raise ConfigError(f"unknown periodic mode {mode!r}")
        self.name = mode
        self.mode = mode
        self.plan = plan if plan is not None else mtsp_plan(config)
        self._cycle_of = {aid: cyc for aid, cyc in enumerate(self.plan.cycles)}
        self._pos: dict[int, int] = {}
        self._planned_uj: dict[int, float] = {}

    def _go_to_entry(self, sim, agent) -> None:
        cyc = self._cycle_of[agent.id]
        open_members = [c for c in cyc if not sim.is_covered(c)]
        if not open_members:
            if agent.waiting is None:
                sim.enter_wait(agent, "entry")
            return
        here = agent.target
        entry = min(open_members, key=lambda c: (self.plan.sp[here, c], c))
        sim.depart(agent, entry, travel_time=float(self.plan.sp[here, entry]))

    def _dwell_here(self, sim, agent) -> None:
        i = agent.target
        cyc = self._cycle_of[agent.id]
        pos = cyc.index(i)
        self._pos[agent.id] = pos
        if len(cyc) == 1:
            # sole charge of this target: park on it for the rest of the run
            sim.commit_dwell(agent, sim.config.mission_time - sim.t + 1.0)
            return
        j = cyc[(pos + 1) % len(cyc)]
        rho = float(self.plan.sp[i, j])
        if self.mode == "mtsp":
            u = self.plan.dwells[i]
            self._planned_uj[agent.id] = self.plan.dwells[j]
            sim.commit_dwell(agent, u)
        elif self.mode == "bdc-p":
            u = bdc_dwell_time(sim.derived[i], sim.omega[i])
            self._planned_uj[agent.id] = 0.0
            sim.commit_dwell(agent, u)
        else:  # rhc-p: one-shot joint solve with the successor fixed
            ls = sim.local_state(i)
            derived = sim.derived
            others = [(derived[k], ls.omegas[k]) for k in ls.omegas
                      if k not in (i, j) and k in cyc]
            coeffs = build_rhcp1(derived[i], ls.omegas[i], derived[j],
                                 sim.omega[j], rho, others)
            budget = sim.horizon_budget() - rho
            if budget <= 0.0:
                self._planned_uj[agent.id] = 0.0
                sim.commit_dwell(agent, 0.0)
                return
            res = solve_rhcp1(coeffs, budget)
            self._planned_uj[agent.id] = res.u_j
            agent.planned_next = j
            agent.planned_u = res.u_j
            sim.commit_dwell(agent, res.u_i, solver_calls=1)

    def on_arrival(self, sim, agent) -> None:
        if agent.target not in self._cycle_of[agent.id]:
            self._go_to_entry(sim, agent)
            return
        self._dwell_here(sim, agent)

    def on_dwell_end(self, sim, agent) -> None:
        cyc = self._cycle_of[agent.id]
        i = agent.target
        pos = self._pos.get(agent.id, cyc.index(i) if i in cyc else 0)
        j = cyc[(pos + 1) % len(cyc)]
        if sim.is_covered(j):
            # another agent is still passing through on its way to its own
            # cycle; hold position until it leaves
            if agent.waiting is None:
                sim.enter_wait(agent, "dwell_end")
            return
        sim.depart(agent, j, planned_u=self._planned_uj.get(agent.id, 0.0),
                   travel_time=float(self.plan.sp[i, j]))

    def on_cover_change(self, sim, agent, target: int, now_covered: bool) -> None:
        if now_covered:
            return
        if agent.waiting == "entry":
            self._go_to_entry(sim, agent)
        elif agent.waiting == "dwell_end":
            self.on_dwell_end(sim, agent)


def make_controller(name: str, config: ProblemConfig, *,
                    dataset_size: int | None = None,
                    al_threshold: float = 0.25):
    """Build a controller by name; learning variants import lazily."""
    if name == "rhc":
        return RhcController()
    if name == "bdc":
        return BdcController()
    if name in ("mtsp", "rhc-p", "bdc-p"):
        return PeriodicController(config, name)
    if name == "rhc-l":
        from .learning import RhcLController
        return RhcLController(config, dataset_size=dataset_size or 25)
    if name == "rhc-al":
        from .learning import RhcAlController
        return RhcAlController(config, dataset_size=dataset_size or 25,
                               threshold=al_threshold)
    raise ConfigError(f"unknown controller {name!r}")
