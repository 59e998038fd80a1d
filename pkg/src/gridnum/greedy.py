"""Greedy per-slot approximation and its computable optimality-gap bound.

Slots are processed in order; each solves a static clearing problem over
that slot's variables alone.  Deferrable service is myopic: a window serves
now whenever the marginal utility of its remaining requirement (evaluated at
the even-spread rate) beats the slot's clearing marginal cost, and whatever
must be served to stay feasible is forced regardless.  Batteries compare the
slot's estimated marginal cost against the running average of past clearing
costs.  The clearing marginal cost of each slot doubles as a dual-price
guess, which by weak duality turns the greedy welfare into a certified bound
on the distance to the optimum, whatever the greedy rule missed.
"""

from __future__ import annotations

import numpy as np

from .dual_market import dual_value
from .model import Allocation, Scenario, make_allocation, welfare

__all__ = ["greedy_solve", "gap_upper_bound"]

_BAND = 1e-9


def _flexible_demand(s: Scenario, t: int, lam: float) -> float:
    total = 0.0
    for u in s.users:
        if u.utility.kind == "quadratic":
            raw = u.utility.a[t] * (u.utility.b[t] - lam)
        else:
            raw = (u.utility.b[t] / lam - u.utility.a[t]) if lam > 0 else np.inf
        total += float(np.clip(raw, u.q_min[t], u.q_max[t]))
    return total


def _supply(s: Scenario, t: int, lam: float) -> float:
    return float(
        np.clip((lam - s.provider.c1[t]) / s.provider.c2[t], 0.0, s.provider.capacity[t])
    )


def _clear_slot(s: Scenario, t: int, items: list[dict], beta: float):
    """Clearing marginal cost of the slot's static problem.

    ``items`` carry each open deferrable's proxy value theta, its forced and
    full service rates; demand steps down at each theta, supply follows the
    provider's marginal cost curve, and the crossing is found by bisection.
    """

    def demand(lam: float) -> float:
        tot = _flexible_demand(s, t, lam) + beta
        for it in items:
            tot += it["full"] if lam < it["theta"] else it["forced"]
        return tot

    hi = float(s.provider.c1[t] + s.provider.c2[t] * max(demand(0.0), 1.0)) + 1.0
    for it in items:
        hi = max(hi, it["theta"] + 1.0)
    if demand(0.0) - _supply(s, t, 0.0) <= 0:
        lam = 0.0
    else:
        lo = 0.0
        while demand(hi) - _supply(s, t, hi) > 0:
            if hi > 1e12:
                raise RuntimeError(f"slot {t}: forced load exceeds capacity; cannot clear")
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if demand(mid) - _supply(s, t, mid) > 0:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
    # resolve service levels; windows whose theta sits on the clearing price
    # absorb the residual slack in deterministic (user, deferrable) order
    supply = _supply(s, t, lam)
    base = _flexible_demand(s, t, lam) + beta + sum(it["forced"] for it in items)
    extras = {}
    slack = supply - base
    margin_band = max(1e-7, 1e-7 * lam)
    for it in items:
        if it["theta"] > lam + margin_band:
            take = it["full"] - it["forced"]
            extras[(it["i"], it["k"])] = take
            slack -= take
        else:
            extras[(it["i"], it["k"])] = 0.0
    if slack > _BAND:
        for it in items:
            if abs(it["theta"] - lam) <= margin_band:
                room = it["full"] - it["forced"] - extras[(it["i"], it["k"])]
                take = min(room, max(slack, 0.0))
                extras[(it["i"], it["k"])] += take
                slack -= take
                if slack <= _BAND:
                    break
    service = {
        (it["i"], it["k"]): it["forced"] + extras[(it["i"], it["k"])] for it in items
    }
    return lam, service


def greedy_solve(s: Scenario):
    """Feasible allocation built slot by slot, plus the per-slot clearing
    marginal costs used as dual-price guesses.

    Any spot market in the scenario is ignored; the greedy rule approximates
    the internal-production problem only.
    """
    n, T, dt = s.n_users, s.T, s.dt
    q = np.zeros((n, T))
    r = np.zeros((n, T))
    d = np.zeros((n, T))
    e = [[np.zeros(T) for _ in u.deferrables] for u in s.users]
    remaining = {
        (i, k): dl.energy_required
        for i, u in enumerate(s.users)
        for k, dl in enumerate(u.deferrables)
    }
    level = {i: u.battery.initial_level for i, u in enumerate(s.users) if u.battery is not None}
    lam_hat = np.zeros(T)
    lam_hist: list[float] = []
    prior = float(np.mean(s.provider.c1))
    for t in range(T):
        items = []
        for (i, k), rem in remaining.items():
            dl = s.users[i].deferrables[k]
            if not (dl.window_start <= t <= dl.window_end) or rem <= 1e-12:
                continue
            slots_after = dl.window_end - t
            full = min(dl.per_slot_max, rem / dt)
            forced = float(np.clip(rem / dt - slots_after * dl.per_slot_max, 0.0, full))
            rho = rem / ((slots_after + 1) * dt)
            u = s.users[i]
            if u.utility.kind == "quadratic":
                theta = float(u.utility.b[t] - rho / u.utility.a[t])
            else:
                theta = float(u.utility.b[t] / (u.utility.a[t] + rho))
            items.append({"i": i, "k": k, "theta": theta, "forced": forced, "full": full})
        lam_bar = float(np.mean(lam_hist)) if lam_hist else prior
        lam_est, _ = _clear_slot(s, t, items, beta=0.0)
        beta = 0.0
        for i in sorted(level):
            b = s.users[i].battery
            r_it = d_it = 0.0
            if lam_est > lam_bar * 1.02:
                avail = (level[i] - b.initial_level) / dt  # never dip below the start level
                d_it = min(b.discharge_rate_max, max(avail, 0.0))
            elif lam_est < lam_bar / 1.02:
                headroom = (b.capacity - level[i]) / (b.efficiency * dt)
                cap_margin = float(s.provider.capacity[t]) - (
                    _flexible_demand(s, t, lam_est) + sum(it["full"] for it in items)
                )
                r_it = min(b.charge_rate_max, max(headroom, 0.0), max(cap_margin, 0.0))
            r[i, t], d[i, t] = r_it, d_it
            level[i] += b.efficiency * r_it * dt - d_it * dt
            beta += r_it - d_it
        lam, service = _clear_slot(s, t, items, beta=beta)
        lam_hat[t] = lam
        lam_hist.append(lam)
        for i, u in enumerate(s.users):
            if u.utility.kind == "quadratic":
                raw = u.utility.a[t] * (u.utility.b[t] - lam)
            else:
                raw = (u.utility.b[t] / lam - u.utility.a[t]) if lam > 0 else np.inf
            q[i, t] = float(np.clip(raw, u.q_min[t], u.q_max[t]))
        for (i, k), amount in service.items():
            e[i][k][t] = amount
            remaining[(i, k)] -= amount * dt
    leftovers = max((abs(v) for v in remaining.values()), default=0.0)
    if leftovers > 1e-7:
        raise RuntimeError(f"greedy left {leftovers} kWh of deferrable energy unserved")
    demand = q.sum(axis=0) + r.sum(axis=0) - d.sum(axis=0)
    for row in e:
        for ek in row:
            demand = demand + ek
    alloc = make_allocation(s, q, e, r, d, supply=np.maximum(demand, 0.0))
    return alloc, lam_hat


def gap_upper_bound(s: Scenario, alloc: Allocation, multipliers: np.ndarray) -> float:
    """Certified bound on (optimal welfare - greedy welfare).

    Weak duality: the dual evaluated at any nonnegative price vector bounds
    every feasible welfare from above, so dual(multipliers) - welfare(greedy)
    dominates the true gap and is never negative.  The clamp at zero only
    absorbs float cancellation on instances where greedy is already optimal.
    """
    lam = np.maximum(np.asarray(multipliers, dtype=float), 0.0)
    return max(dual_value(s, lam, use_spot=False) - welfare(s, alloc), 0.0)
