"""Receding-horizon subproblems solved at event times.

Two subproblem shapes arise.  On arriving at target i an agent jointly picks
its dwell time u_i at i and a provisional dwell u_j at a candidate next
neighbor j (the "arrival" problem, two variables on the triangle
u_i, u_j >= 0, u_i + u_j <= H - rho_ij).  When the dwell ends it picks only
u_j (the "dwell-end" problem, one variable on [0, H - rho_ij]).  Both
minimize the normalized objective

    Jbar(u) = -A(u) / (A(u) + B(u)),

where A is the accumulated covariance of targets while observed inside the
horizon and B the accumulated covariance of the unobserved stretches.  A and
B have closed forms; this module carries its own expansions of those forms
(log terms for observation stretches, exponential/linear tails for idle
stretches) so that tests can cross-check them against composition of the
covariance-module integrals.  Jbar always lies in [-1, 0] and equals 0 when
nothing is observed.

One modeling subtlety: the closed neighborhood sums behind B include the
current target i itself, since i sits unobserved from the moment the agent
departs.  Near-zero state gains switch to polynomial limit branches, mirroring
the covariance module.

The solvers are projected gradient descent with Armijo backtracking; the
candidate-ranking helper breaks value ties toward the lowest target id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .covariance import InvariantViolation, propagate_active, propagate_inactive
from .network import A_EPS, TargetDerived

_EXP_MAX = 700.0

# Projected-gradient solver constants.
MAX_ITERS = 200
GRAD_TOL = 1e-8
STEP_INIT = 1.0
STEP_SHRINK = 0.5
STEP_MIN = 1e-12
ARMIJO = 1e-4
_STEP_MAX = 1e8


def _exp(x: float) -> float:
    return math.exp(x) if x < _EXP_MAX else math.inf


@dataclass(frozen=True)
class LocalState:
    """Decision-time snapshot for one agent at target i.

    omegas holds the covariances of i and its currently uncovered neighbors
    (i first, then ascending ids); covered neighbors are absent.
    """

    target: int
    t: float
    omegas: dict[int, float]

    def candidates(self) -> tuple[int, ...]:
        return tuple(k for k in self.omegas if k != self.target)


@dataclass(frozen=True)
class ControlDecision:
    """Outcome of one decision: dwell here u_i, then go to next for u_j."""

    u_i: float
    next_target: int | None
    u_j: float
    value: float
    solver_calls: int


@dataclass(frozen=True)
class SolverResult:
    u_i: float
    u_j: float
    value: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class Rhcp2Coefficients:
    """Dwell-end objective pieces for one candidate next target j.

    A(u) = c1 + c2 * log(1 + c3 * exp(-lam_j u)) + c4 u  with
    c1 = -c2 * log1p(c3) exactly, so A(0) = 0 without cancellation, and
    B(u) = c5 + c6 u + quad u^2 + sum_k c7[k] * exp(rates[k] * u)
    collecting the idle tails of every non-next target in the closed
    neighborhood (including the current target).
    """

    lam_j: float
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    c6: float
    c7: tuple[float, ...]
    rates: tuple[float, ...]
    quad: float


def _idle_tail(td: TargetDerived, omega0: float, offset: float):
    """Expand the idle-stretch area over [0, offset+u] as a function of u.

    Returns (coef, rate, lin, const, quad) with
    area(u) = coef * e^{rate u} + lin * u + quad * u^2 + const.
    """
    a, q = td.a, td.q
    if abs(a) <= A_EPS:
        return (0.0, 0.0, omega0 + q * offset,
                omega0 * offset + 0.5 * q * offset * offset, 0.5 * q)
    grow = (2.0 * a * omega0 + q) / (4.0 * a * a)
    coef = grow * _exp(2.0 * a * offset)
    lin = -q / (2.0 * a)
    const = -grow + lin * offset
    return (coef, 2.0 * a, lin, const, 0.0)


def build_rhcp2(td_j: TargetDerived, omega_j: float, rho: float,
                idle: Sequence[tuple[TargetDerived, float]]) -> Rhcp2Coefficients:
    """Assemble dwell-end coefficients for next target j at distance rho.

    idle lists (derived, omega) for every other target in the agent's closed
    neighborhood, the departed target included.
    """
    om_prime = propagate_inactive(td_j, omega_j, rho)
    num = td_j.g * om_prime + td_j.q * td_j.v2
    den = td_j.g * om_prime + td_j.q * td_j.v1
    if num <= 0.0 or den <= 0.0:
        raise InvariantViolation(
            f"next-target covariance {om_prime} at or below its active floor")
    c3 = -num / den
    c2 = 1.0 / td_j.g
    c1 = -c2 * math.log1p(c3)
    c4 = 1.0 / td_j.v1

    c5 = 0.0
    c6 = 0.0
    quad = 0.0
    c7: list[float] = []
    rates: list[float] = []
    for td_k, om_k in idle:
        coef, rate, lin, const, qd = _idle_tail(td_k, om_k, rho)
        c5 += const
        c6 += lin
        quad += qd
        if coef != 0.0:
            c7.append(coef)
            rates.append(rate)
    c5 += _idle_area(td_j, omega_j, rho)
    return Rhcp2Coefficients(lam_j=td_j.lam, c1=c1, c2=c2, c3=c3, c4=c4,
                             c5=c5, c6=c6, c7=tuple(c7), rates=tuple(rates),
                             quad=quad)


def _idle_area(td: TargetDerived, omega0: float, w: float) -> float:
    """Idle-stretch area written out locally (kept independent of the
    covariance module's integral so the two can be cross-checked)."""
    a, q = td.a, td.q
    if w == 0.0:
        return 0.0
    if abs(a) <= A_EPS:
        return omega0 * w + 0.5 * q * w * w
    x = 2.0 * a * w
    if x >= _EXP_MAX:
        return math.inf
    em = math.expm1(x)
    return omega0 * em / (2.0 * a) + q * (em - x) / (4.0 * a * a)


def eval_rhcp2(c: Rhcp2Coefficients, u: float) -> tuple[float, float]:
    """Objective value and derivative of the dwell-end problem at u >= 0."""
    e = math.exp(-c.lam_j * u)
    one_p = 1.0 + c.c3 * e
    a_val = c.c1 + c.c2 * math.log(one_p) + c.c4 * u if u > 0.0 else 0.0
    a_der = -c.c2 * c.lam_j * c.c3 * e / one_p + c.c4
    b_val = c.c5 + c.c6 * u + c.quad * u * u
    b_der = c.c6 + 2.0 * c.quad * u
    for coef, rate in zip(c.c7, c.rates):
        ex = _exp(rate * u)
        b_val += coef * ex
        b_der += coef * rate * ex
    den = a_val + b_val
    if not math.isfinite(b_val):
        return 0.0, 0.0
    if den <= 0.0:
        return 0.0, 0.0
    value = -a_val / den
    deriv = -(a_der * b_val - a_val * b_der) / (den * den)
    return value, deriv


@dataclass(frozen=True)
class Rhcp1Coefficients:
    """Arrival objective pieces for current target i and candidate j.

    The observed part is two log terms.  For the dwell at i, with
    E_i = exp(-lam_i u_i):

        (1/g_i) log((act_p_i + act_q_i E_i) / (-lam_i)) + u_i / v_i1,

    whose numerator constants come from omega_i.  The dwell at j has the same
    shape in u_j but its constants depend on u_i through the idle propagation
    of omega_j over rho + u_i, so they are formed at evaluation time from
    (g_j, qv1_j, qv2_j).  The idle part B collects: target i idle over
    rho + u_j from its post-dwell covariance, target j idle over rho + u_i
    (tail in u_i), and every other neighbor idle over rho + u_i + u_j
    (aggregated tail in s = u_i + u_j).
    """

    rho: float
    td_i: TargetDerived
    td_j: TargetDerived
    omega_i: float
    omega_j: float
    # log-term constants for the dwell at i
    act_p_i: float
    act_q_i: float
    slope_i: float
    # log-term constants for the dwell at j
    qv1_j: float
    qv2_j: float
    slope_j: float
    # idle tail of target j in u_i: coef e^{rate u} + lin u + quad u^2 + const
    jt_coef: float
    jt_rate: float
    jt_lin: float
    jt_const: float
    jt_quad: float
    # aggregated idle tails of the remaining neighbors in s = u_i + u_j
    kt_coefs: tuple[float, ...]
    kt_rates: tuple[float, ...]
    kt_lin: float
    kt_const: float
    kt_quad: float


def build_rhcp1(td_i: TargetDerived, omega_i: float, td_j: TargetDerived,
                omega_j: float, rho: float,
                others: Sequence[tuple[TargetDerived, float]]) -> Rhcp1Coefficients:
    """Assemble arrival coefficients for dwell target i and candidate j.

    others lists (derived, omega) for the uncovered neighbors of i besides j.
    """
    p_i = -(td_i.g * omega_i + td_i.q * td_i.v1)
    q_i = td_i.g * omega_i + td_i.q * td_i.v2
    if q_i <= 0.0:
        raise InvariantViolation(
            f"current covariance {omega_i} at or below its active floor")
    jt_coef, jt_rate, jt_lin, jt_const, jt_quad = _idle_tail(td_j, omega_j, rho)
    kt_coefs: list[float] = []
    kt_rates: list[float] = []
    kt_lin = 0.0
    kt_const = 0.0
    kt_quad = 0.0
    for td_k, om_k in others:
        coef, rate, lin, const, qd = _idle_tail(td_k, om_k, rho)
        kt_const += const
        kt_lin += lin
        kt_quad += qd
        if coef != 0.0:
            kt_coefs.append(coef)
            kt_rates.append(rate)
    return Rhcp1Coefficients(
        rho=rho, td_i=td_i, td_j=td_j, omega_i=omega_i, omega_j=omega_j,
        act_p_i=p_i, act_q_i=q_i, slope_i=1.0 / td_i.v1,
        qv1_j=td_j.q * td_j.v1, qv2_j=td_j.q * td_j.v2, slope_j=1.0 / td_j.v1,
        jt_coef=jt_coef, jt_rate=jt_rate, jt_lin=jt_lin, jt_const=jt_const,
        jt_quad=jt_quad, kt_coefs=tuple(kt_coefs), kt_rates=tuple(kt_rates),
        kt_lin=kt_lin, kt_const=kt_const, kt_quad=kt_quad)


def eval_rhcp1(c: Rhcp1Coefficients, u_i: float, u_j: float
               ) -> tuple[float, float, float]:
    """Objective value and gradient of the arrival problem at (u_i, u_j)."""
    td_i, td_j = c.td_i, c.td_j

    # observed stretch at i
    e_i = math.exp(-td_i.lam * u_i)
    d_i = c.act_p_i + c.act_q_i * e_i
    a_val = (math.log(d_i / (-td_i.lam)) / td_i.g + u_i * c.slope_i
             if u_i > 0.0 else 0.0)
    a_di = -td_i.lam * c.act_q_i * e_i / (td_i.g * d_i) + c.slope_i
    a_dj = 0.0

    # observed stretch at j, constants refreshed from the idle propagation
    om_j_plus = propagate_inactive(td_j, c.omega_j, c.rho + u_i)
    q_j = td_j.g * om_j_plus + c.qv2_j
    e_j = math.exp(-td_j.lam * u_j)
    # grouped so the om_j_plus terms cancel exactly at u_j = 0; the naive
    # p_j + q_j e_j form loses every digit there once the idle covariance
    # dwarfs the q v1 / q v2 offsets
    d_j = td_j.g * om_j_plus * (e_j - 1.0) + c.qv2_j * e_j - c.qv1_j
    if u_j > 0.0:
        a_val += math.log(d_j / (-td_j.lam)) / td_j.g + u_j * c.slope_j
    rate_j = 2.0 * td_j.a * om_j_plus + td_j.q
    a_di += rate_j * (e_j - 1.0) / d_j
    a_dj += -td_j.lam * q_j * e_j / (td_j.g * d_j) + c.slope_j

    # idle stretch of i after its dwell
    om_i_plus = propagate_active(td_i, c.omega_i, u_i)
    w_i = c.rho + u_j
    a, q = td_i.a, td_i.q
    if abs(a) <= A_EPS:
        b_val = om_i_plus * w_i + 0.5 * q * w_i * w_i
        d_om0 = w_i
    else:
        x = 2.0 * a * w_i
        if x >= _EXP_MAX:
            return 0.0, 0.0, 0.0
        em = math.expm1(x)
        b_val = om_i_plus * em / (2.0 * a) + q * (em - x) / (4.0 * a * a)
        d_om0 = em / (2.0 * a)
    rate_i = 2.0 * a * om_i_plus + q - td_i.g * om_i_plus * om_i_plus
    b_di = d_om0 * rate_i
    b_dj = propagate_inactive(td_i, om_i_plus, w_i)

    # idle stretch of j before its dwell
    ex_j = _exp(c.jt_rate * u_i) if c.jt_coef != 0.0 else 0.0
    b_val += c.jt_coef * ex_j + c.jt_lin * u_i + c.jt_quad * u_i * u_i + c.jt_const
    b_di += c.jt_coef * c.jt_rate * ex_j + c.jt_lin + 2.0 * c.jt_quad * u_i

    # idle stretches of the remaining neighbors
    s = u_i + u_j
    tail = c.kt_lin * s + c.kt_quad * s * s + c.kt_const
    tail_d = c.kt_lin + 2.0 * c.kt_quad * s
    for coef, rate in zip(c.kt_coefs, c.kt_rates):
        ex = _exp(rate * s)
        tail += coef * ex
        tail_d += coef * rate * ex
    b_val += tail
    b_di += tail_d
    b_dj += tail_d

    if not (math.isfinite(a_val) and math.isfinite(b_val)):
        return 0.0, 0.0, 0.0
    den = a_val + b_val
    if den <= 0.0:
        return 0.0, 0.0, 0.0
    value = -a_val / den
    gi = -(a_di * b_val - a_val * b_di) / (den * den)
    gj = -(a_dj * b_val - a_val * b_dj) / (den * den)
    return value, gi, gj


def solve_rhcp2(c: Rhcp2Coefficients, budget: float) -> SolverResult:
    """Minimize the dwell-end objective over [0, budget] by projected descent."""
    if budget <= 0.0:
        return SolverResult(0.0, 0.0, 0.0, 0, True)

    def clip(x: float) -> float:
        return min(max(x, 0.0), budget)

    u = 0.5 * budget
    v, g = eval_rhcp2(c, u)
    best_u, best_v = u, v
    converged = False
    iters = 0
    # the accepted step carries over and may grow, so that shallow objectives
    # still reach the gradient tolerance within the iteration budget
    step_prev = 0.5 * STEP_INIT
    for iters in range(1, MAX_ITERS + 1):
        pg = u - clip(u - g)
        if abs(pg) <= GRAD_TOL:
            converged = True
            break
        step = min(2.0 * step_prev, _STEP_MAX)
        moved = False
        while step >= STEP_MIN:
            u_new = clip(u - step * g)
            v_new, g_new = eval_rhcp2(c, u_new)
            if v_new <= v + ARMIJO * g * (u_new - u):
                u, v, g = u_new, v_new, g_new
                step_prev = step
                moved = True
                break
            step *= STEP_SHRINK
        if v < best_v:
            best_u, best_v = u, v
        if not moved:
            converged = True
            break
    if v < best_v:
        best_u, best_v = u, v
    return SolverResult(0.0, best_u, best_v, iters, converged)


def _project_triangle(u_i: float, u_j: float, budget: float) -> tuple[float, float]:
    """Exact Euclidean projection onto {u_i, u_j >= 0, u_i + u_j <= budget}."""
    u_i = max(u_i, 0.0)
    u_j = max(u_j, 0.0)
    if u_i + u_j <= budget:
        return u_i, u_j
    t = min(max(0.5 * (budget + u_j - u_i), 0.0), budget)
    return budget - t, t


def solve_rhcp1(c: Rhcp1Coefficients, budget: float) -> SolverResult:
    """Minimize the arrival objective over the budget triangle.

    Runs projected descent from the three corners and the centroid, keeping
    the best accumulation point.
    """
    if budget <= 0.0:
        return SolverResult(0.0, 0.0, 0.0, 0, True)

    starts = ((0.0, 0.0), (budget, 0.0), (0.0, budget), (budget / 3.0, budget / 3.0))
    best = None
    total_iters = 0
    best_converged = False
    for s_i, s_j in starts:
        u_i, u_j = s_i, s_j
        v, g_i, g_j = eval_rhcp1(c, u_i, u_j)
        converged = False
        step_prev = 0.5 * STEP_INIT
        for _ in range(MAX_ITERS):
            total_iters += 1
            p_i, p_j = _project_triangle(u_i - g_i, u_j - g_j, budget)
            if math.hypot(u_i - p_i, u_j - p_j) <= GRAD_TOL:
                converged = True
                break
            step = min(2.0 * step_prev, _STEP_MAX)
            moved = False
            while step >= STEP_MIN:
                n_i, n_j = _project_triangle(u_i - step * g_i, u_j - step * g_j, budget)
                v_new, gn_i, gn_j = eval_rhcp1(c, n_i, n_j)
                if v_new <= v + ARMIJO * (g_i * (n_i - u_i) + g_j * (n_j - u_j)):
                    u_i, u_j, v, g_i, g_j = n_i, n_j, v_new, gn_i, gn_j
                    step_prev = step
                    moved = True
                    break
                step *= STEP_SHRINK
            if not moved:
                converged = True
                break
        if best is None or v < best[2]:
            best = (u_i, u_j, v)
            best_converged = converged
    return SolverResult(best[0], best[1], best[2], total_iters, best_converged)


def select_next_visit(results: dict[int, SolverResult]) -> int:
    """Pick the candidate with the lowest objective, ties to the lowest id."""
    if not results:
        raise ValueError("no candidates to select from")
    return min(results.items(), key=lambda kv: (kv[1].value, kv[0]))[0]
