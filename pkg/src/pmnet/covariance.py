"""Closed-form error-covariance propagation for scalar targets.

While an agent observes target i (active mode) the estimation error variance
omega follows the scalar Riccati equation

    d omega / dt = 2 a omega + q - g omega^2,

and while unobserved (inactive) the quadratic term is absent.  Both equations
admit closed forms, as do their time integrals (the "contribution" of a time
interval to the accumulated-uncertainty objective).  All functions here are
exact up to floating point; numerical integrators appear only in tests as
independent oracles.

Active mode, with E = exp(-lam w):

    omega(w) = (c1 + c2 E) / (v1 c1 + v2 c2 E),
    c1 = v2 omega0 - 1,  c2 = 1 - v1 omega0,

which decays monotonically to omega_ss = 1/v1.  Inactive mode:

    omega(w) = omega0 e^{2aw} + q (e^{2aw} - 1) / (2a),

growing toward omega_bar_ss = -q/(2a) when a < 0 and unboundedly otherwise.
Near-zero state gains (|a| <= A_EPS) switch to the polynomial limits.
"""

from __future__ import annotations

import math

import numpy as np

from .network import A_EPS, TargetDerived

# exp() overflows past ~709.78; treat larger exponents as +inf instead of
# raising so that diverging idle covariances degrade gracefully in searches.
_EXP_MAX = 700.0


class InvariantViolation(RuntimeError):
    """A covariance left its invariant set (or received impossible inputs)."""


def _exp(x: float) -> float:
    return math.exp(x) if x < _EXP_MAX else math.inf


def _check_w(w: float) -> None:
    if w < 0.0:
        raise ValueError(f"negative duration w={w}")


def propagate_active(td: TargetDerived, omega0: float, w: float) -> float:
    """Covariance after observing for time w, starting from omega0."""
    _check_w(w)
    if w == 0.0:
        return omega0
    c1 = td.v2 * omega0 - 1.0
    c2 = 1.0 - td.v1 * omega0
    e = math.exp(-td.lam * w)
    den = td.v1 * c1 + td.v2 * c2 * e
    if den >= 0.0:
        raise InvariantViolation(
            f"active propagation denominator {den} >= 0 (omega0={omega0}, w={w})")
    return (c1 + c2 * e) / den


def propagate_inactive(td: TargetDerived, omega0: float, w: float) -> float:
    """Covariance after being unobserved for time w, starting from omega0."""
    _check_w(w)
    if w == 0.0:
        return omega0
    a, q = td.a, td.q
    if abs(a) <= A_EPS:
        return omega0 + q * w
    x = 2.0 * a * w
    if x >= _EXP_MAX:
        return math.inf
    em = math.expm1(x)
    return omega0 * (em + 1.0) + q * em / (2.0 * a)


def contribution_active(td: TargetDerived, omega0: float, w: float) -> float:
    """Integral of the covariance over an observation interval of length w."""
    _check_w(w)
    if w == 0.0:
        return 0.0
    c1 = td.v2 * omega0 - 1.0
    c2 = 1.0 - td.v1 * omega0
    e = math.exp(-td.lam * w)
    num = td.v1 * c1 + td.v2 * c2 * e
    den = td.v2 - td.v1
    ratio = num / den
    if ratio <= 0.0:
        raise InvariantViolation(
            f"active contribution log argument {ratio} <= 0 (omega0={omega0}, w={w})")
    return math.log(ratio) / td.g + w / td.v1


def contribution_inactive(td: TargetDerived, omega0: float, w: float) -> float:
    """Integral of the covariance over an unobserved interval of length w."""
    _check_w(w)
    if w == 0.0:
        return 0.0
    a, q = td.a, td.q
    if abs(a) <= A_EPS:
        return omega0 * w + 0.5 * q * w * w
    x = 2.0 * a * w
    if x >= _EXP_MAX:
        return math.inf
    em = math.expm1(x)
    return omega0 * em / (2.0 * a) + q * (em - x) / (4.0 * a * a)


def steady_states(td: TargetDerived) -> tuple[float, float]:
    """(active steady state, idle steady state); the latter is +inf for a >= 0."""
    return td.omega_ss, td.omega_bar_ss


def active_crossing_time(td: TargetDerived, omega0: float, omega_target: float) -> float:
    """Observation time needed to bring the covariance down to omega_target.

    Returns 0 when omega0 is already at or below the threshold.  The threshold
    must sit strictly above omega_ss, which the active dynamics never cross.
    """
    if omega_target <= td.omega_ss:
        raise ValueError(
            f"threshold {omega_target} not reachable (omega_ss={td.omega_ss})")
    if omega0 <= omega_target:
        return 0.0
    c1 = td.v2 * omega0 - 1.0
    c2 = 1.0 - td.v1 * omega0
    # Solve omega(w) = omega_target for E = exp(-lam w).
    e = c1 * (1.0 - omega_target * td.v1) / (c2 * (omega_target * td.v2 - 1.0))
    if not (0.0 < e < 1.0):
        raise InvariantViolation(
            f"crossing-time solve produced E={e} (omega0={omega0}, target={omega_target})")
    return -math.log(e) / td.lam


def propagate_matrix(a: np.ndarray, q: np.ndarray, g: np.ndarray,
                     omega0: np.ndarray, eta: int, w: float) -> np.ndarray:
    """Matrix-valued covariance propagation over one constant-mode interval.

    Solves d Omega/dt = A Omega + Omega A^T + Q - eta Omega G Omega by the
    standard linearization: stack [C; D] with Omega = C D^{-1}, then

        d/dt [C; D] = [[A, Q], [eta G, -A^T]] [C; D],  C(0)=Omega0, D(0)=I,

    and take a single matrix exponential of the block matrix.
    """
    from scipy.linalg import expm

    _check_w(w)
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    omega0 = np.asarray(omega0, dtype=float)
    if w == 0.0:
        return omega0.copy()
    psi = np.zeros((2 * n, 2 * n))
    psi[:n, :n] = a
    psi[:n, n:] = np.asarray(q, dtype=float)
    psi[n:, :n] = float(eta) * np.asarray(g, dtype=float)
    psi[n:, n:] = -a.T
    phi = expm(psi * w)
    c = phi[:n, :n] @ omega0 + phi[:n, n:]
    d = phi[n:, :n] @ omega0 + phi[n:, n:]
    omega = c @ np.linalg.inv(d)
    return 0.5 * (omega + omega.T)
