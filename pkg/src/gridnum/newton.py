"""Newton acceleration of the dual price iteration.

Under quadratic utilities and box-only constraints every coupling lives
inside a slot, so the dual Hessian is diagonal and the Newton direction is
computable per slot from the local slopes each agent attaches to its reply.
Slots whose curvature vanishes (everyone clamped) fall back to a subgradient
step; agents that do not report slopes degrade the affected slots the same
way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dual_market import (
    DualConfig,
    _run_market,
    provider_supply_response,
    user_best_response,
)
from .model import Scenario

__all__ = [
    "NewtonConfig",
    "SmoothnessError",
    "require_smooth",
    "dual_gradient_and_curvature",
    "newton_price_step",
    "run_newton",
]


class SmoothnessError(ValueError):
    """The scenario's dual is not differentiable, so slopes are meaningless."""


@dataclass
class NewtonConfig(DualConfig):
    alpha: float = 1.0  # damping; halved automatically when the gap grows
    h_floor: float = 1e-9
    max_alpha_retries: int = 6


def require_smooth(s: Scenario) -> None:
    """Reject scenario kinds whose best responses are not differentiable in
    prices: non-quadratic utilities, deferrable windows, batteries, and
    flat-priced spot markets."""
    for u in s.users:
        if u.utility.kind != "quadratic":
            raise SmoothnessError(f"user {u.id}: utility kind {u.utility.kind!r} has no quadratic dual")
        if u.deferrables:
            raise SmoothnessError(f"user {u.id}: deferrable windows couple slots; dual is piecewise linear")
        if u.battery is not None:
            raise SmoothnessError(f"user {u.id}: battery schedules couple slots; dual is piecewise linear")
    if s.spot is not None and np.any(s.spot.kappa == 0):
        raise SmoothnessError("flat spot price makes purchases bang-bang; dual is non-smooth")


def dual_gradient_and_curvature(s: Scenario, p: np.ndarray):
    """Per-slot balance gap g_t = demand - supply and its price derivative
    h_t (sum of agent-local slopes; clamped coordinates contribute zero)."""
    for u in s.users:
        if u.utility.kind != "quadratic" or u.deferrables or u.battery is not None:
            raise SmoothnessError("dual curvature requires box-only quadratic users")
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("prices must be nonnegative")
    demand = np.zeros(s.T)
    h = np.zeros(s.T)
    for u in s.users:
        raw = u.utility.demand(p)
        q = np.clip(raw, u.q_min, u.q_max)
        demand += q
        interior = (raw > u.q_min) & (raw < u.q_max)
        h += np.where(interior, -u.utility.a, 0.0)
    supply = provider_supply_response(s.provider, p)
    raw_s = (p - s.provider.c1) / s.provider.c2
    s_int = (raw_s > 0) & (raw_s < s.provider.capacity)
    h -= np.where(s_int, 1.0 / s.provider.c2, 0.0)
    return demand - supply, h


def newton_price_step(
    p: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    alpha: float = 1.0,
    gamma0: float = 0.1,
    h_floor: float = 1e-9,
) -> np.ndarray:
    """Damped projected Newton step p - alpha*g/h per slot, with a
    subgradient fallback wherever the curvature is below ``h_floor``."""
    p = np.asarray(p, dtype=float)
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    usable = np.abs(h) >= h_floor
    step = np.where(usable, -alpha * g / np.where(usable, h, 1.0), gamma0 * g)
    return np.maximum(0.0, p + step)


def run_newton(s: Scenario, cfg: NewtonConfig | None = None, bus=None, record_prices: bool = False):
    """Market iteration with Newton price updates.

    Same convergence contract as run_dual; divergence (a growing balance gap)
    halves the damping factor up to a retry cap.  Only smooth scenario kinds
    are accepted.
    """
    require_smooth(s)
    cfg = cfg or NewtonConfig()
    return _run_market(s, cfg, bus, use_spot=False, newton=cfg, record_prices=record_prices)
