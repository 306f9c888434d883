"""Target networks and problem instances for persistent monitoring.

A problem instance is an undirected geometric graph of scalar targets plus a
team of point agents that travel along edges at unit speed.  Each target i
carries linear stochastic dynamics

    dphi_i = (a_i * phi_i + b_i * u_i) dt + dw_i,   Var[dw_i] = q_i dt,

observed through z_i = h_i * phi_i + v_i with measurement noise variance r_i
whenever an agent is present.  The per-target constant g_i = h_i^2 / r_i is
the information rate that drives the error-covariance dynamics.

This module owns instance generation, derived per-target constants used by the
closed-form covariance solutions, and YAML (de)serialization of instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import yaml

CONFIG_SCHEMA = 1

# Parameter ranges for random instance generation.
_A_RANGE = (0.01, 0.41)
_B_RANGE = (0.01, 0.41)
_Q_RANGE = (0.1, 2.1)
_R_RANGE = (2.0, 10.0)
_H_GAIN = 1.0

# Below this magnitude the state gain is treated as zero and limit formulas
# are used throughout the covariance code.
A_EPS = 1e-9


class ConfigError(ValueError):
    """Raised for malformed or infeasible problem configurations."""


@dataclass(frozen=True)
class TargetParams:
    """Static parameters of one target."""

    id: int
    position: tuple[float, float]
    a: float  # state gain
    b: float  # control gain
    q: float  # process noise intensity (> 0)
    h: float  # observation gain (!= 0)
    r: float  # measurement noise variance (> 0)

    @property
    def g(self) -> float:
        """Information rate h^2 / r of an active (observed) target."""
        return self.h * self.h / self.r


@dataclass(frozen=True)
class TargetDerived:
    """Constants derived from one target's parameters.

    lam is the exponential rate of the active covariance transient,
    v1 > 0 > v2 are the two roots of g*v^2 + 2*a*v - q = 0 scaled so that
    omega_ss = 1/v1 is the active steady state, and omega_bar_ss is the
    idle steady state (finite only for a < 0, +inf otherwise).
    """

    a: float
    q: float
    g: float
    lam: float
    v1: float
    v2: float
    omega_ss: float
    omega_bar_ss: float


def derive_target(p: TargetParams) -> TargetDerived:
    """Precompute the closed-form constants for one target."""
    a, q, g = p.a, p.q, p.g
    s = math.sqrt(a * a + q * g)
    lam = 2.0 * s
    v1 = (-a + s) / q
    v2 = (-a - s) / q
    omega_ss = q / (s - a)  # equals 1/v1, written to avoid a division chain
    omega_bar_ss = -q / (2.0 * a) if a < -A_EPS else math.inf
    return TargetDerived(a=a, q=q, g=g, lam=lam, v1=v1, v2=v2,
                         omega_ss=omega_ss, omega_bar_ss=omega_bar_ss)


@dataclass(frozen=True)
class NetworkGraph:
    """Undirected target network with Euclidean travel times on edges."""

    targets: tuple[TargetParams, ...]
    edges: frozenset[frozenset[int]]
    _adj: dict[int, tuple[int, ...]] = field(repr=False, compare=False, default_factory=dict)
    _rho: dict[tuple[int, int], float] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        adj: dict[int, list[int]] = {t.id: [] for t in self.targets}
        rho: dict[tuple[int, int], float] = {}
        pos = {t.id: t.position for t in self.targets}
        for e in self.edges:
            i, j = sorted(e)
            adj[i].append(j)
            adj[j].append(i)
            d = math.dist(pos[i], pos[j])
            rho[(i, j)] = d
            rho[(j, i)] = d
        object.__setattr__(self, "_adj", {k: tuple(sorted(v)) for k, v in adj.items()})
        object.__setattr__(self, "_rho", rho)

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    def neighbors(self, i: int, include_self: bool = False) -> tuple[int, ...]:
        """Neighbor target ids of i in ascending order, optionally with i itself first."""
        if include_self:
            return (i,) + self._adj[i]
        return self._adj[i]

    def rho(self, i: int, j: int) -> float:
        """Travel time along edge (i, j); raises KeyError if not adjacent."""
        return self._rho[(i, j)]

    def has_edge(self, i: int, j: int) -> bool:
        return (i, j) in self._rho

    def is_connected(self) -> bool:
        if not self.targets:
            return True
        seen = {self.targets[0].id}
        stack = [self.targets[0].id]
        while stack:
            for j in self._adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == len(self.targets)


@dataclass(frozen=True)
class ProblemConfig:
    """A full simulation problem: network, agents, horizon and initial state."""

    graph: NetworkGraph
    agent_starts: tuple[int, ...]
    omega0: tuple[float, ...]
    mission_time: float  # T
    horizon: float       # H for the receding-horizon controllers
    seed: int
    horizon_mode: str = "fixed"  # "fixed" or "remaining" (H := T - t)

    @property
    def num_agents(self) -> int:
        return len(self.agent_starts)

    def derived(self) -> tuple[TargetDerived, ...]:
        return tuple(derive_target(t) for t in self.graph.targets)


def _connected(n: int, adj: dict[int, list[int]]) -> bool:
    if n == 0:
        return True
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def generate_pc(num_targets: int, num_agents: int, sigma: float, seed: int,
                mission_time: float = 50.0, horizon: float = 10.0) -> ProblemConfig:
    """Generate a random connected problem instance.

    Positions are uniform on the unit square and targets are adjacent when
    closer than sigma.  Dynamics parameters are drawn once; positions are
    redrawn (up to 100 attempts) until the graph is connected.  Initial
    covariances are placed strictly inside the invariant interval
    (omega_ss, omega_bar_ss), using 10 * omega_ss as a stand-in upper bound
    for targets whose idle covariance grows without bound.
    """
    import numpy as np

    if num_agents < 1 or num_targets < 1:
        raise ConfigError("need at least one agent and one target")
    if num_agents > num_targets:
        raise ConfigError("more agents than targets is not supported")

    rng = np.random.default_rng(seed)
    a = rng.uniform(*_A_RANGE, num_targets)
    b = rng.uniform(*_B_RANGE, num_targets)
    q = rng.uniform(*_Q_RANGE, num_targets)
    r = rng.uniform(*_R_RANGE, num_targets)

    positions = None
    edge_list: list[tuple[int, int]] = []
    for _ in range(100):
        pts = rng.uniform(0.0, 1.0, (num_targets, 2))
        cand = []
        adj: dict[int, list[int]] = {i: [] for i in range(num_targets)}
        for i in range(num_targets):
            for j in range(i + 1, num_targets):
                if math.dist(tuple(pts[i]), tuple(pts[j])) < sigma:
                    cand.append((i, j))
                    adj[i].append(j)
                    adj[j].append(i)
        if num_targets == 1 or _connected(num_targets, adj):
            positions = pts
            edge_list = cand
            break
    if positions is None:
        raise ConfigError(
            f"could not generate a connected network for seed {seed} "
            f"(n={num_targets}, sigma={sigma}) in 100 attempts")

    targets = tuple(
        TargetParams(id=i, position=(float(positions[i, 0]), float(positions[i, 1])),
                     a=float(a[i]), b=float(b[i]), q=float(q[i]), h=_H_GAIN, r=float(r[i]))
        for i in range(num_targets))
    graph = NetworkGraph(targets=targets,
                         edges=frozenset(frozenset(e) for e in edge_list))

    omega0 = []
    for t in targets:
        d = derive_target(t)
        hi = d.omega_bar_ss if d.omega_bar_ss < math.inf else 10.0 * d.omega_ss
        u = float(rng.uniform(0.05, 0.95))
        omega0.append(d.omega_ss + u * (hi - d.omega_ss))

    starts = tuple(k % num_targets for k in range(num_agents))
    return ProblemConfig(graph=graph, agent_starts=starts, omega0=tuple(omega0),
                         mission_time=mission_time, horizon=horizon, seed=seed)


def config_to_dict(cfg: ProblemConfig) -> dict:
    """Plain-dict form of a config, suitable for YAML dumping."""
    doc: dict = {
        "schema": CONFIG_SCHEMA,
        "seed": cfg.seed,
        "T": cfg.mission_time,
        "H": cfg.horizon,
        "agents": list(cfg.agent_starts),
        "targets": [
            {"id": t.id, "pos": [t.position[0], t.position[1]],
             "A": t.a, "B": t.b, "Q": t.q, "H": t.h, "R": t.r,
             "omega0": cfg.omega0[t.id]}
            for t in cfg.graph.targets
        ],
        "edges": sorted(sorted(e) for e in cfg.graph.edges),
    }
    if cfg.horizon_mode != "fixed":
        doc["horizon_mode"] = cfg.horizon_mode
    return doc


def config_from_dict(doc: dict) -> ProblemConfig:
    """Parse and validate a config document; raises ConfigError on problems."""
    try:
        if doc.get("schema") != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {doc.get('schema')!r}")
        raw_targets = doc["targets"]
        ids = [t["id"] for t in raw_targets]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError("target ids must be 0..n-1 without gaps")
        targets = [None] * len(ids)
        omega0 = [0.0] * len(ids)
        for t in raw_targets:
            tp = TargetParams(id=int(t["id"]),
                              position=(float(t["pos"][0]), float(t["pos"][1])),
                              a=float(t["A"]), b=float(t["B"]), q=float(t["Q"]),
                              h=float(t["H"]), r=float(t["R"]))
            if tp.q <= 0 or tp.r <= 0 or tp.h == 0:
                raise ConfigError(f"target {tp.id}: need Q > 0, R > 0, H != 0")
            targets[tp.id] = tp
            om = float(t["omega0"])
            if om <= 0:
                raise ConfigError(f"target {tp.id}: omega0 must be positive")
            omega0[tp.id] = om
        edges = []
        for e in doc.get("edges", []):
            i, j = int(e[0]), int(e[1])
            if i == j or not (0 <= i < len(ids)) or not (0 <= j < len(ids)):
                raise ConfigError(f"bad edge {e!r}")
            edges.append(frozenset((i, j)))
        graph = NetworkGraph(targets=tuple(targets), edges=frozenset(edges))
        if not graph.is_connected():
            raise ConfigError("network graph must be connected")
        agents = tuple(int(x) for x in doc["agents"])
        if len(set(agents)) != len(agents):
            raise ConfigError("agent start targets must be distinct")
        for s in agents:
            if not (0 <= s < len(ids)):
                raise ConfigError(f"agent start {s} is not a target id")
        mission_time = float(doc["T"])
        horizon = float(doc["H"])
        if mission_time <= 0 or horizon <= 0:
            raise ConfigError("T and H must be positive")
        mode = doc.get("horizon_mode", "fixed")
        if mode not in ("fixed", "remaining"):
            raise ConfigError(f"unknown horizon_mode {mode!r}")
        return ProblemConfig(graph=graph, agent_starts=agents, omega0=tuple(omega0),
                             mission_time=mission_time, horizon=horizon,
                             seed=int(doc.get("seed", 0)), horizon_mode=mode)
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"malformed config document: {exc!r}") from exc


def save_config(cfg: ProblemConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def load_config(path: str) -> ProblemConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config file does not contain a mapping")
    return config_from_dict(doc)
