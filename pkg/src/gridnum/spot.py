"""Spot-market extension: the provider covers part of demand with external
purchases at a (possibly purchase-sensitive) price.

Two views of the purchase/price interaction are implemented and cross-checked:

* the internalized solve, where the provider optimizes against the integrated
  outlay pi0*g + (kappa/2)*g^2, and
* a fixed-point iteration, where agents treat the current effective price
  pi0 + kappa*g_bar as exogenous and purchases are re-derived until they stop
  moving.

With interior purchases both views share the optimality condition
p = pi0 + kappa*g, so their solutions coincide; the fixed point reports the
observed deviation as a consistency field rather than assuming it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dual_market import (
    DualConfig,
    _run_market,
    _spot_purchase_response,
    provider_supply_response,
    user_best_response,
)
from .model import Allocation, ProviderCost, Scenario, SpotMarket, make_allocation
from .solver_core import ConvergenceReport

__all__ = [
    "provider_spot_response",
    "solve_sys_spot",
    "spot_interaction_fixed_point",
    "SpotFixedPoint",
]


def provider_spot_response(c: ProviderCost, m: SpotMarket, p: np.ndarray):
    """Jointly profit-maximizing own production and spot purchases.

    The two decisions decouple: production clamps the margin against the own
    marginal cost, purchases clamp it against the spot price curve (bang-bang
    at g_max when kappa == 0).
    """
    p = np.asarray(p, dtype=float)
    return provider_supply_response(c, p), _spot_purchase_response(m, p)


def solve_sys_spot(s: Scenario, cfg: DualConfig | None = None, bus=None, record_prices: bool = False):
    """Dual price iteration with the spot-aware provider.

    Same contract as run_dual; at convergence demand is covered by own supply
    plus purchases within ``tol_balance`` and welfare accounts for the
    internalized spot outlay.
    """
    if s.spot is None:
        raise ValueError("scenario has no spot market")
    return _run_market(s, cfg, bus, use_spot=True, record_prices=record_prices)


def _is_static(s: Scenario) -> bool:
    return all(not u.deferrables and u.battery is None for u in s.users)


def _static_spot_equilibrium(s: Scenario, pi_eff: np.ndarray):
    """Exact per-slot equilibrium when nothing couples slots and the spot
    price is exogenous (flat supply segment at pi_eff up to g_max)."""
    T = s.T
    prices = np.zeros(T)
    g = np.zeros(T)
    for t in range(T):
        c1 = float(s.provider.c1[t])
        c2 = float(s.provider.c2[t])
        cap = float(s.provider.capacity[t])
        gmax = float(s.spot.g_max[t])
        pi = float(pi_eff[t])

        def demand(lam: float) -> float:
            tot = 0.0
            for u in s.users:
                if u.utility.kind == "quadratic":
                    raw = u.utility.a[t] * (u.utility.b[t] - lam)
                else:
                    raw = u.utility.b[t] / lam - u.utility.a[t] if lam > 0 else np.inf
                tot += float(np.clip(raw, u.q_min[t], u.q_max[t]))
            return tot

        def own(lam: float) -> float:
            return float(np.clip((lam - c1) / c2, 0.0, cap))

        shortfall = demand(pi) - own(pi)
        if 0.0 <= shortfall <= gmax:
            prices[t] = pi
            g[t] = shortfall
            continue
        extra = gmax if shortfall > gmax else 0.0
        lo, hi = 0.0, pi
        if shortfall > gmax:
            lo = pi
            hi = pi
            while demand(hi) - own(hi) - extra > 0 and hi < 1e9:
                hi = max(2.0 * hi, 1.0)
        if demand(lo) - own(lo) - extra <= 0:
            prices[t] = lo
            g[t] = extra
            continue
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if demand(mid) - own(mid) - extra > 0:
                lo = mid
            else:
                hi = mid
        prices[t] = 0.5 * (lo + hi)
        g[t] = extra
    q = np.zeros((s.n_users, T))
    for i, u in enumerate(s.users):
        q[i] = np.clip(u.utility.demand(prices), u.q_min, u.q_max)
    supply = provider_supply_response(s.provider, prices)
    e = [[np.zeros(T) for _ in u.deferrables] for u in s.users]
    zeros = np.zeros((s.n_users, T))
    alloc = make_allocation(s, q, e, zeros, zeros, supply=supply, spot_g=g)
    return prices, alloc


@dataclass
class SpotFixedPoint:
    """Equilibrium of the purchase/price feedback loop."""

    g: np.ndarray
    effective_price: np.ndarray
    prices: np.ndarray
    allocation: Allocation
    fp_iterations: int
    converged: bool
    oscillation: bool
    last_change: float
    linear_outlay: float
    internalized_g: np.ndarray | None = None
    internalized_consistency: float | None = None


def spot_interaction_fixed_point(
    s: Scenario,
    cfg: DualConfig | None = None,
    max_outer: int = 60,
    tol_fp: float = 1e-6,
    damping: float = 0.5,
    check_consistency: bool = True,
) -> SpotFixedPoint:
    """Iterate purchases against the price they induce until they agree.

    Each pass solves the market with the current effective spot price held
    exogenous (kappa = 0 inside), then damps the purchase estimate toward the
    response.  Stops when the response stops moving; a kappa of zero
    everywhere needs a single pass because there is no feedback.
    """
    if s.spot is None:
        raise ValueError("scenario has no spot market")
    spot = s.spot
    T = s.T

    def solve_at(pi_eff: np.ndarray):
        frozen = SpotMarket(pi0=np.asarray(pi_eff, float), kappa=np.zeros(T), g_max=spot.g_max)
        inner = Scenario(horizon=s.horizon, users=s.users, provider=s.provider, spot=frozen, seed=s.seed)
        if _is_static(inner):
            return _static_spot_equilibrium(inner, pi_eff)
        p, alloc, _ = solve_sys_spot(inner, cfg)
        return p, alloc

    g_bar = np.zeros(T)
    changes: list[float] = []
    prices = np.zeros(T)
    alloc = None
    no_feedback = bool(np.all(spot.kappa == 0))
    iterations = 0
    converged = False
    for k in range(1, max_outer + 1):
        iterations = k
        pi_eff = spot.pi0 + spot.kappa * g_bar
        prices, alloc = solve_at(pi_eff)
        g_new = np.asarray(alloc.spot_g, dtype=float)
        change = float(np.max(np.abs(g_new - g_bar), initial=0.0))
        changes.append(change)
        if no_feedback or change <= tol_fp:
            g_bar = g_new
            converged = True
            break
        g_bar = g_bar + damping * (g_new - g_bar)
    oscillation = (
        not converged
        and len(changes) >= 4
        and changes[-1] >= changes[-3] - tol_fp
        and changes[-2] >= changes[-4] - tol_fp
    )
    pi_star = spot.pi0 + spot.kappa * g_bar
    result = SpotFixedPoint(
        g=g_bar,
        effective_price=pi_star,
        prices=prices,
        allocation=alloc,
        fp_iterations=iterations,
        converged=converged,
        oscillation=oscillation,
        last_change=changes[-1] if changes else 0.0,
        linear_outlay=float((pi_star * g_bar).sum()),
    )
    if check_consistency:
        _, alloc_int, _ = solve_sys_spot(s, cfg)
        result.internalized_g = np.asarray(alloc_int.spot_g, dtype=float)
        result.internalized_consistency = float(np.max(np.abs(result.internalized_g - g_bar), initial=0.0))
    return result
