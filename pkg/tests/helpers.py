"""Small builders shared across the test modules."""

from __future__ import annotations

from pmnet.network import TargetParams, TargetDerived, derive_target


def make_target(a: float, q: float, g: float, tid: int = 0,
                pos: tuple[float, float] = (0.0, 0.0),
                b: float = 0.1) -> tuple[TargetParams, TargetDerived]:
    """Build a target with a requested information rate g (via h=1, r=1/g)."""
    p = TargetParams(id=tid, position=pos, a=a, b=b, q=q, h=1.0, r=1.0 / g)
    return p, derive_target(p)
