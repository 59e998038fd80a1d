"""Euclidean projections onto the per-user feasible sets.

Three building blocks, acting on disjoint variable groups so that their
composition is the exact projection onto the product set:

* box clamp for elective consumption,
* capped-simplex projection for each deferrable window (fixed energy total,
  per-slot service bounds),
* a small dense active-set QP for the battery block (rate boxes plus the
  level corridor induced by the cumulative dynamics).
"""

from __future__ import annotations

import numpy as np

from .model import Battery, Scenario, Allocation, make_allocation

__all__ = [
    "capped_simplex_project",
    "project_polyhedron",
    "battery_halfspaces",
    "project_battery",
    "project_allocation",
]

_FEAS_ATOL = 1e-11


def capped_simplex_project(y, ub, total: float, atol: float = _FEAS_ATOL):
    """Project y onto {x : sum(x) = total, 0 <= x <= ub}.

    Exact breakpoint search on the piecewise-linear shift function
    f(tau) = sum(clip(y - tau, 0, ub)).  Already-feasible inputs are returned
    unchanged so that the projection is idempotent bit-for-bit.
    """
    y = np.asarray(y, dtype=float)
    ub = np.broadcast_to(np.asarray(ub, dtype=float), y.shape)
    scale = max(1.0, float(np.abs(y).max(initial=0.0)), float(ub.max(initial=0.0)))
    if total < -atol * scale or total > ub.sum() + atol * scale:
        raise ValueError("capped simplex is empty for the requested total")
    x0 = np.clip(y, 0.0, ub)
    if abs(float(x0.sum()) - total) <= atol * scale:
        return x0
    # f is nonincreasing in tau and linear between breakpoints {y_i, y_i - ub_i}
    bps = np.unique(np.concatenate([y, y - ub]))
    fvals = np.clip(y[None, :] - bps[:, None], 0.0, ub[None, :]).sum(axis=1)
    idx = int(np.searchsorted(-fvals, -total))
    if idx == 0:
        tau = bps[0]  # f is flat at sum(ub) below the first breakpoint
    elif idx >= len(bps):
        tau = bps[-1]
    else:
        lo, hi = bps[idx - 1], bps[idx]
        flo, fhi = fvals[idx - 1], fvals[idx]
        tau = lo if flo == fhi else lo + (flo - total) * (hi - lo) / (flo - fhi)
    return np.clip(y - tau, 0.0, ub)


def project_polyhedron(y, G, h, x0=None, max_iter: int = 500, tol: float = 1e-11):
    """Projection of y onto {x : G x <= h} by a primal active-set method.

    ``x0`` must be feasible (defaults to the origin, which every battery block
    admits).  Returns the projected point; raises if the iteration cap is hit,
    which signals a degenerate constraint set rather than a numerical hiccup.
    """
    y = np.asarray(y, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    x = np.zeros_like(y) if x0 is None else np.asarray(x0, dtype=float).copy()
    slack0 = h - G @ x
    if np.min(slack0, initial=0.0) < -1e-8:
        x = np.zeros_like(y)  # fall back to the safe interior start
    work: list[int] = [int(j) for j in np.flatnonzero(h - G @ x <= tol)]
    for _ in range(max_iter):
        gap = y - x
        if work:
            A = G[work]
            AAt = A @ A.T
            lam, *_ = np.linalg.lstsq(AAt, A @ gap, rcond=None)
            p = gap - A.T @ lam
        else:
            lam = np.zeros(0)
            p = gap
        if float(np.max(np.abs(p), initial=0.0)) <= tol:
            if lam.size == 0 or np.min(lam) >= -tol:
                return x
            work.pop(int(np.argmin(lam)))
            continue
        Gp = G @ p
        slack = h - G @ x
        blocking = -1
        alpha = 1.0
        candidates = np.flatnonzero(Gp > tol)
        for j in candidates:
            if j in work:
                continue
            a_j = slack[j] / Gp[j]
            if a_j < alpha:
                alpha = max(a_j, 0.0)
                blocking = int(j)
        x = x + alpha * p
        if blocking >= 0 and alpha < 1.0:
            work.append(blocking)
    raise RuntimeError("active-set projection did not converge")


def battery_halfspaces(b: Battery, T: int, dt: float):
    """Constraint system G z <= h for z = [r, d] covering rate boxes, the
    level corridor 0 <= s_k <= capacity and the terminal floor s_T >= s0."""
    L = np.tril(np.ones((T, T)))
    W = np.hstack([b.efficiency * dt * L, -dt * L])  # rows: s_k - s0
    eye = np.eye(T)
    zero = np.zeros((T, T))
    G = np.vstack(
        [
            np.hstack([-eye, zero]),  # r >= 0
            np.hstack([eye, zero]),  # r <= rmax
            np.hstack([zero, -eye]),  # d >= 0
            np.hstack([zero, eye]),  # d <= dmax
            W,  # s_k <= cap
            -W,  # s_k >= 0
            -W[-1:],  # s_T >= s0
        ]
    )
    h = np.concatenate(
        [
            np.zeros(T),
            np.full(T, b.charge_rate_max),
            np.zeros(T),
            np.full(T, b.discharge_rate_max),
            np.full(T, b.capacity - b.initial_level),
            np.full(T, b.initial_level),
            np.zeros(1),
        ]
    )
    return G, h


def _battery_feasible(b: Battery, r, d, dt: float, atol: float) -> bool:
    if np.min(r, initial=0.0) < -atol or np.max(r - b.charge_rate_max, initial=0.0) > atol:
        return False
    if np.min(d, initial=0.0) < -atol or np.max(d - b.discharge_rate_max, initial=0.0) > atol:
        return False
    lv = b.levels(r, d, dt)
    if np.min(lv, initial=0.0) < -atol or np.max(lv - b.capacity, initial=0.0) > atol:
        return False
    return lv[-1] >= b.initial_level - atol


def project_battery(b: Battery, r_raw, d_raw, dt: float, warm=None):
    """Exact projection of a raw (r, d) schedule onto the battery's feasible
    set.  ``warm`` is an optional feasible starting schedule (e.g. the
    previous projection result) that speeds up the active-set walk."""
    T = len(r_raw)
    r_raw = np.asarray(r_raw, dtype=float)
    d_raw = np.asarray(d_raw, dtype=float)
    if _battery_feasible(b, r_raw, d_raw, dt, _FEAS_ATOL):
        return r_raw.copy(), d_raw.copy()
    G, h = battery_halfspaces(b, T, dt)
    x0 = None
    if warm is not None:
        wr, wd = warm
        if _battery_feasible(b, wr, wd, dt, 0.0):
            x0 = np.concatenate([wr, wd])
    z = project_polyhedron(np.concatenate([r_raw, d_raw]), G, h, x0=x0)
    return z[:T], z[T:]


def project_allocation(s: Scenario, x: Allocation) -> Allocation:
    """Project an arbitrary allocation-shaped point onto the per-user
    constraints (boxes, deferrable energy equalities, battery dynamics).

    The supply field is recomputed as the capacity-clipped aggregate demand
    and spot purchases are clipped to their bounds; the aggregate capacity
    constraint itself is the solvers' concern, not the projection's.
    """
    dt = s.dt
    q = np.clip(x.q, [u.q_min for u in s.users], [u.q_max for u in s.users])
    e_out = []
    r = np.array(x.r, dtype=float)
    d = np.array(x.d, dtype=float)
    for i, u in enumerate(s.users):
        user_e = []
        for k, dl in enumerate(u.deferrables):
            ek = np.zeros(s.T)
            sl = slice(dl.window_start, dl.window_end + 1)
            ek[sl] = capped_simplex_project(
                np.asarray(x.e[i][k])[sl], dl.per_slot_max, dl.energy_required / dt
            )
            user_e.append(ek)
        e_out.append(tuple(user_e))
        if u.battery is None:
            r[i] = 0.0
            d[i] = 0.0
        else:
            r[i], d[i] = project_battery(u.battery, r[i], d[i], dt)
    demand = q.sum(axis=0) + r.sum(axis=0) - d.sum(axis=0)
    for user_e in e_out:
        for ek in user_e:
            demand = demand + ek
    g = np.zeros(s.T) if s.spot is None else np.clip(x.spot_g, 0.0, s.spot.g_max)
    supply = np.clip(demand - g, 0.0, s.provider.capacity)
    return make_allocation(s, q, e_out, r, d, supply=supply, spot_g=g)
