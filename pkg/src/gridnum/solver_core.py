"""Centralized welfare maximization and the brute-force lattice oracle.

The welfare problem is solved by projected gradient ascent over all user
variables (consumption, deferrable service, battery rates); the per-user
constraint sets are handled exactly by the projections module, and the
aggregate capacity constraint by an outer multiplier loop that activates only
when capacity actually binds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Allocation, Scenario, UtilityParams, make_allocation
from .projections import capped_simplex_project, project_battery

__all__ = [
    "SolverConfig",
    "LoggedIterate",
    "ConvergenceReport",
    "VariableLayout",
    "solve_system",
    "project_allocation_flat",
    "oracle_solve",
    "grid_error_bound",
    "implied_prices",
]


@dataclass
class SolverConfig:
    step_rule: str = "constant"  # "constant" or "diminishing" (gamma0/sqrt(k))
    gamma0: float | None = None  # None picks 1/L from the objective curvature
    max_iters: int = 30000
    tol_kkt: float = 1e-8
    tol_step: float = 1e-13


@dataclass
class LoggedIterate:
    iteration: int
    objective: float
    kkt: float
    dual_value: float | None = None
    primal_feasible: bool = True
    spot_g: float | None = None
    spot_price: float | None = None


@dataclass
class ConvergenceReport:
    """Trajectory summary shared by every solver in the package."""

    iterates_logged: list[LoggedIterate]
    final_objective: float
    kkt_residual: float
    iterations: int
    stop_reason: str  # "kkt" | "step" | "max_iters"
    extras: dict = field(default_factory=dict)
    price_trajectory: list[np.ndarray] | None = None

    @property
    def converged(self) -> bool:
        return self.stop_reason != "max_iters"

    def write_csv(self, path) -> None:
        """Emit ``iter,objective,kkt`` rows (plus spot columns when logged)."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        has_spot = any(it.spot_g is not None for it in self.iterates_logged)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["iter", "objective", "kkt"]
            if has_spot:
                header += ["spot_g", "spot_price"]
            w.writerow(header)
            for it in self.iterates_logged:
                row = [it.iteration, f"{it.objective:.4f}", f"{it.kkt:.6e}"]
                if has_spot:
                    row += [
                        "" if it.spot_g is None else f"{it.spot_g:.6f}",
                        "" if it.spot_price is None else f"{it.spot_price:.6f}",
                    ]
                w.writerow(row)


class VariableLayout:
    """Flat-vector packing of all primal decision variables of a scenario.

    Order: each user's q (T slots), then each of its deferrable windows, then
    its battery charge and discharge blocks.  Keeps index metadata so that
    objective, gradient and projection all run vectorized.
    """

    def __init__(self, s: Scenario):
        self.scenario = s
        T = s.T
        self.q_slices: list[slice] = []
        self.e_items: list[tuple[int, int, slice]] = []  # user, k, flat slice
        self.batt_items: list[tuple[int, slice, slice]] = []
        pos = 0
        lb, ub, slot, sign = [], [], [], []
        for i, u in enumerate(s.users):
            self.q_slices.append(slice(pos, pos + T))
            lb.append(u.q_min)
            ub.append(u.q_max)
            slot.append(np.arange(T))
            sign.append(np.ones(T))
            pos += T
        for i, u in enumerate(s.users):
            for k, dl in enumerate(u.deferrables):
                w = dl.width
                self.e_items.append((i, k, slice(pos, pos + w)))
                lb.append(np.zeros(w))
                ub.append(np.full(w, dl.per_slot_max))
                slot.append(np.arange(dl.window_start, dl.window_end + 1))
                sign.append(np.ones(w))
                pos += w
        for i, u in enumerate(s.users):
            if u.battery is not None:
                sr = slice(pos, pos + T)
                sd = slice(pos + T, pos + 2 * T)
                self.batt_items.append((i, sr, sd))
                lb.append(np.zeros(2 * T))
                ub.append(np.concatenate([np.full(T, u.battery.charge_rate_max), np.full(T, u.battery.discharge_rate_max)]))
                slot.append(np.tile(np.arange(T), 2))
                sign.append(np.concatenate([np.ones(T), -np.ones(T)]))
                pos += 2 * T
        self.n = pos
        self.lb = np.concatenate(lb) if lb else np.zeros(0)
        self.ub = np.concatenate(ub) if ub else np.zeros(0)
        self.slot = np.concatenate(slot).astype(int) if slot else np.zeros(0, int)
        self.sign = np.concatenate(sign) if sign else np.zeros(0)

    # -- evaluation ---------------------------------------------------------

    def demand(self, v: np.ndarray) -> np.ndarray:
        """Aggregate grid demand per slot."""
        D = np.zeros(self.scenario.T)
        np.add.at(D, self.slot, self.sign * v)
        return D

    def demand_batch(self, V: np.ndarray) -> np.ndarray:
        return V @ self.load_matrix().T

    def load_matrix(self) -> np.ndarray:
        """(T, n) matrix mapping the flat vector to per-slot aggregate load."""
        if not hasattr(self, "_load_mat"):
            M = np.zeros((self.scenario.T, self.n))
            M[self.slot, np.arange(self.n)] = self.sign
            self._load_mat = M
        return self._load_mat

    def welfare_internal(self, v: np.ndarray) -> float:
        """Utilities minus production cost at supply = aggregate demand."""
        s = self.scenario
        total = 0.0
        for i, u in enumerate(s.users):
            total += float(u.utility.value(v[self.q_slices[i]]).sum())
        total -= float(s.provider.cost(self.demand(v)).sum())
        return total

    def welfare_batch(self, V: np.ndarray) -> np.ndarray:
        s = self.scenario
        total = np.zeros(V.shape[0])
        for i, u in enumerate(s.users):
            total += u.utility.value(V[:, self.q_slices[i]]).sum(axis=1)
        total -= s.provider.cost(self.demand_batch(V)).sum(axis=1)
        return total

    def gradient(self, v: np.ndarray, mu: np.ndarray | None = None) -> np.ndarray:
        s = self.scenario
        mc = s.provider.marginal(self.demand(v))
        if mu is not None:
            mc = mc + mu
        g = -self.sign * mc[self.slot]
        for i, u in enumerate(s.users):
            sl = self.q_slices[i]
            g[sl] += u.utility.marginal(v[sl])
        return g

    def lipschitz(self) -> float:
        """Upper bound on the spectral norm of the welfare Hessian."""
        s = self.scenario
        vars_per_slot = np.zeros(s.T)
        np.add.at(vars_per_slot, self.slot, 1.0)
        L = float(np.max(s.provider.c2 * vars_per_slot, initial=0.0))
        curv = 0.0
        for u in s.users:
            if u.utility.kind == "quadratic":
                curv = max(curv, float(np.max(1.0 / u.utility.a)))
            else:
                curv = max(curv, float(np.max(u.utility.b / u.utility.a**2)))
        return L + curv

    # -- feasibility --------------------------------------------------------

    def feasible_start(self) -> np.ndarray:
        s = self.scenario
        v = np.zeros(self.n)
        for i, u in enumerate(s.users):
            v[self.q_slices[i]] = u.q_min
        for i, k, sl in self.e_items:
            dl = s.users[i].deferrables[k]
            v[sl] = dl.energy_required / (dl.width * s.dt)
        return v

    def project(self, v: np.ndarray, warm: dict | None = None):
        """Exact projection onto the per-user constraint product set.

        ``warm`` caches the previous battery projections to keep the
        active-set walks short; pass the returned dict back in."""
        s = self.scenario
        out = np.clip(v, self.lb, self.ub)
        for i, k, sl in self.e_items:
            dl = s.users[i].deferrables[k]
            out[sl] = capped_simplex_project(v[sl], dl.per_slot_max, dl.energy_required / s.dt)
        warm_out = {}
        for i, sr, sd in self.batt_items:
            b = s.users[i].battery
            prev = None if warm is None else warm.get(i)
            r, d = project_battery(b, v[sr], v[sd], s.dt, warm=prev)
            out[sr], out[sd] = r, d
            warm_out[i] = (r, d)
        return out, warm_out

    def to_allocation(self, v: np.ndarray) -> Allocation:
        s = self.scenario
        n, T = s.n_users, s.T
        q = np.stack([v[self.q_slices[i]] for i in range(n)]) if n else np.zeros((0, T))
        e = [[np.zeros(T) for _ in u.deferrables] for u in s.users]
        for i, k, sl in self.e_items:
            dl = s.users[i].deferrables[k]
            ek = np.zeros(T)
            ek[dl.window_start : dl.window_end + 1] = v[sl]
            e[i][k] = ek
        r = np.zeros((n, T))
        d = np.zeros((n, T))
        for i, sr, sd in self.batt_items:
            r[i] = v[sr]
            d[i] = v[sd]
        D = self.demand(v)
        supply = np.clip(D, 0.0, s.provider.capacity)
        return make_allocation(s, q, e, r, d, supply=supply)


def project_allocation_flat(layout: VariableLayout, v: np.ndarray) -> np.ndarray:
    out, _ = layout.project(v)
    return out


def _pgd(layout: VariableLayout, cfg: SolverConfig, gamma: float, mu, x0, log_every: int):
    """Projected gradient ascent; returns (x_best, logged, kkt, iters, reason).

    ``mu`` shifts the per-slot load price (capacity multipliers); the best
    iterate is tracked under the shifted objective so outer multiplier loops
    see the inner optimum, not the unconstrained one.
    """

    def inner_obj(v: np.ndarray) -> float:
        w = layout.welfare_internal(v)
        if mu is not None and np.any(mu):
            w -= float(np.dot(mu, layout.demand(v)))
        return w

    x, warm = layout.project(x0)
    logged: list[LoggedIterate] = []
    best_x = x
    best_obj = inner_obj(x)
    kkt = np.inf
    reason = "max_iters"
    k = 0
    for k in range(1, cfg.max_iters + 1):
        g = layout.gradient(x, mu)
        step = gamma if cfg.step_rule == "constant" else gamma / np.sqrt(k)
        x_new, warm = layout.project(x + step * g, warm)
        move = float(np.max(np.abs(x_new - x), initial=0.0))
        kkt = move / step
        obj = inner_obj(x_new)
        if obj > best_obj:
            best_obj, best_x = obj, x_new
        if k % log_every == 0 or k == 1:
            logged.append(LoggedIterate(iteration=k, objective=layout.welfare_internal(x_new), kkt=kkt))
        x = x_new
        if kkt <= cfg.tol_kkt:
            reason = "kkt"
            break
        if move <= cfg.tol_step:
            reason = "step"
            break
    if not logged or logged[-1].iteration != k:
        logged.append(LoggedIterate(iteration=k, objective=layout.welfare_internal(x), kkt=kkt))
    return best_x, logged, kkt, k, reason


def solve_system(s: Scenario, cfg: SolverConfig | None = None):
    """Centralized solution of the welfare problem (spot market ignored).

    Returns a feasible allocation and a convergence report.  The aggregate
    capacity constraint is enforced through a multiplier loop layered over
    the projected-gradient inner solver; on scenarios where capacity never
    binds the loop exits after its first pass.
    """
    cfg = cfg or SolverConfig()
    layout = VariableLayout(s)
    gamma = cfg.gamma0 if cfg.gamma0 is not None else 1.0 / layout.lipschitz()
    cap = s.provider.capacity
    mu = np.zeros(s.T)
    x = layout.feasible_start()
    log_every = max(1, cfg.max_iters // 200)
    logged_all: list[LoggedIterate] = []
    total_iters = 0
    reason = "max_iters"
    kkt = np.inf
    cap_tol = max(cfg.tol_kkt, 1e-9)
    # demand sensitivity to the capacity multiplier, for the outer dual step
    sens = 0.0
    for u in s.users:
        if u.utility.kind == "quadratic":
            sens += float(np.max(u.utility.a))
        else:
            p_lo = np.min(u.utility.b / (u.utility.a + u.q_max))
            sens += float(np.max(u.utility.b)) / max(p_lo, 1e-6) ** 2
    outer_step = 1.0 / max(sens, 1e-9)
    for outer in range(80):
        x, logged, kkt, iters, reason = _pgd(layout, cfg, gamma, mu, x, log_every)
        logged_all.extend(logged)
        total_iters += iters
        viol = layout.demand(x) - cap
        worst = float(np.max(viol, initial=0.0))
        if worst <= cap_tol * max(1.0, float(np.max(cap, initial=1.0))):
            break
        mu = np.maximum(0.0, mu + outer_step * viol)
    alloc = layout.to_allocation(x)
    final_obj = layout.welfare_internal(x)
    kkt_total = max(kkt, float(np.max(layout.demand(x) - cap, initial=0.0)))
    report = ConvergenceReport(
        iterates_logged=logged_all,
        final_objective=final_obj,
        kkt_residual=kkt_total,
        iterations=total_iters,
        stop_reason=reason,
        extras={"capacity_multipliers": mu},
    )
    return alloc, report


def implied_prices(s: Scenario, x: Allocation, mu: np.ndarray | None = None) -> np.ndarray:
    """Marginal production cost at the allocation's supply (plus any
    capacity multipliers): the market-clearing price of a welfare optimum."""
    p = s.provider.marginal(x.supply)
    if mu is not None:
        p = p + mu
    return p


# ---------------------------------------------------------------------------
# Brute-force lattice oracle
# ---------------------------------------------------------------------------

def _oracle_axes(layout: VariableLayout):
    """Free axes for the lattice; the last slot of every deferrable window is
    eliminated through the energy equality.  Degenerate boxes are pinned."""
    eliminated = {}
    for i, k, sl in layout.e_items:
        eliminated[sl.stop - 1] = (i, k, sl)
    axes = []
    fixed = {}
    for j in range(layout.n):
        if j in eliminated:
            continue
        if layout.ub[j] - layout.lb[j] <= 0:
            fixed[j] = layout.lb[j]
        else:
            axes.append(j)
    return axes, fixed, eliminated


def oracle_solve(s: Scenario, grid_n: int = 401, max_points_per_chunk: int = 400_000):
    """Exhaustive search over a per-axis lattice of the feasible box.

    Guards the total free dimension at 6.  Returns the best lattice
    allocation and its welfare; the true optimum exceeds it by at most
    ``grid_error_bound(s, grid_n)``.

    Utilities are additive per variable, so each axis carries a precomputed
    value table indexed by its lattice coordinate; only the production cost
    couples axes (through the per-slot aggregate), which keeps the full
    enumeration to a handful of vector passes per chunk.
    """
    layout = VariableLayout(s)
    axes, fixed, eliminated = _oracle_axes(layout)
    if len(axes) > 6:
        raise ValueError(f"oracle dimension guard exceeded: {len(axes)} free axes")
    T, dt = s.T, s.dt
    cap = s.provider.capacity
    grids = [np.linspace(layout.lb[j], layout.ub[j], grid_n) for j in axes]
    shape = tuple(grid_n for _ in axes)
    n_points = int(np.prod(shape)) if axes else 1

    # per-axis utility tables and the fixed-variable baseline
    def var_owner_q(j):
        for i in range(s.n_users):
            sl = layout.q_slices[i]
            if sl.start <= j < sl.stop:
                return i, j - sl.start
        return None

    util_tables: list[np.ndarray | None] = []
    for a, j in enumerate(axes):
        own = var_owner_q(j)
        if own is None:
            util_tables.append(None)
        else:
            i, t = own
            u = s.users[i].utility
            ut = UtilityParams(u.kind, u.a[t : t + 1], u.b[t : t + 1])
            util_tables.append(ut.value(grids[a][:, None]).ravel())
    util_const = 0.0
    base_load = np.zeros(T)
    for j, val in fixed.items():
        own = var_owner_q(j)
        if own is not None:
            i, t = own
            u = s.users[i].utility
            util_const += float(u.value(np.full(s.T, val))[t])
        base_load[layout.slot[j]] += layout.sign[j] * val
    # each eliminated service slot contributes its full requirement to its
    # own slot and subtracts the free window axes from it
    elim_info = []
    for last_j, (i, k, sl) in eliminated.items():
        dl = s.users[i].deferrables[k]
        base_load[layout.slot[last_j]] += dl.energy_required / dt
        free_axes = [axes.index(j) for j in range(sl.start, sl.stop - 1)]
        elim_info.append((layout.slot[last_j], free_axes, dl.per_slot_max, dl.energy_required / dt))

    best_obj = -np.inf
    best_vals: np.ndarray | None = None
    for start in range(0, n_points, max_points_per_chunk):
        stop = min(start + max_points_per_chunk, n_points)
        m = stop - start
        coords = np.unravel_index(np.arange(start, stop), shape) if axes else ()
        vals = [grids[a][coords[a]] for a in range(len(axes))]
        obj = np.full(m, util_const)
        for a in range(len(axes)):
            if util_tables[a] is not None:
                obj += util_tables[a][coords[a]]
        mask = np.ones(m, dtype=bool)
        D = [np.full(m, base_load[t]) for t in range(T)]
        for a, j in enumerate(axes):
            D[layout.slot[j]] += layout.sign[j] * vals[a]
        for slot_last, free_axes, emax, need in elim_info:
            e_last = np.full(m, need)
            for a in free_axes:
                e_last -= vals[a]
                D[slot_last] -= vals[a]  # the eliminated slot absorbs the residual
            mask &= (e_last >= -1e-12) & (e_last <= emax + 1e-12)
        for i, sr, sd in layout.batt_items:
            b = s.users[i].battery
            level = np.full(m, b.initial_level)
            lo_ok = np.ones(m, dtype=bool)
            hi_ok = np.ones(m, dtype=bool)
            for t in range(T):
                jr, jd = sr.start + t, sd.start + t
                rv = vals[axes.index(jr)] if jr in axes else np.full(m, fixed.get(jr, 0.0))
                dv = vals[axes.index(jd)] if jd in axes else np.full(m, fixed.get(jd, 0.0))
                level = level + b.efficiency * dt * rv - dt * dv
                lo_ok &= level >= -1e-12
                hi_ok &= level <= b.capacity + 1e-12
            mask &= lo_ok & hi_ok & (level >= b.initial_level - 1e-12)
        for t in range(T):
            obj -= s.provider.c1[t] * D[t] + 0.5 * s.provider.c2[t] * D[t] * D[t]
            mask &= D[t] <= cap[t] + 1e-9
        if not mask.any():
            continue
        obj[~mask] = -np.inf
        j_best = int(np.argmax(obj))
        if obj[j_best] > best_obj:
            best_obj = float(obj[j_best])
            best_vals = np.array([v[j_best] for v in vals])
    if best_vals is None and axes:
        raise ValueError("oracle found no feasible lattice point")
    v = np.zeros(layout.n)
    for j, val in fixed.items():
        v[j] = val
    for a, j in enumerate(axes):
        v[j] = best_vals[a]
    for last_j, (i, k, sl) in eliminated.items():
        dl = s.users[i].deferrables[k]
        v[last_j] = dl.energy_required / dt - v[sl.start : sl.stop - 1].sum()
    best_obj = layout.welfare_internal(v)  # exact value at the winning point
    return layout.to_allocation(v), best_obj


def grid_error_bound(s: Scenario, grid_n: int = 401) -> float:
    """Conservative bound on (true optimum - best lattice welfare)."""
    layout = VariableLayout(s)
    axes, _, eliminated = _oracle_axes(layout)
    D_hi = layout.demand(layout.ub)
    mc_hi = float(np.max(np.abs(s.provider.marginal(np.maximum(D_hi, 0.0))), initial=0.0))
    mc_hi = max(mc_hi, float(np.max(s.provider.c1)))
    bound = 0.0
    for j in axes:
        h = (layout.ub[j] - layout.lb[j]) / (grid_n - 1)
        owner = None
        for i, u in enumerate(s.users):
            if layout.q_slices[i].start <= j < layout.q_slices[i].stop:
                owner, t = u, j - layout.q_slices[i].start
                break
        if owner is not None:
            m = max(
                abs(float(owner.utility.marginal(np.asarray([owner.q_min[t]]))[0])),
                abs(float(owner.utility.marginal(np.asarray([owner.q_max[t]]))[0])),
            )
            L = m + mc_hi
        else:
            L = 2.0 * mc_hi  # deferrable / battery axes move load only
        bound += L * h
    return bound
