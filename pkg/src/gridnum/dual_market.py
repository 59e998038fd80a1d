"""Distributed price iteration by dual decomposition.

Prices are the multipliers of the per-slot supply-demand balance.  Each round
the supervisor broadcasts prices over a message bus, every user replies with
its surplus-maximizing schedule, the provider with its profit-maximizing
supply (plus spot purchases when enabled), and prices move along the
subgradient demand - supply (or a damped Newton step on slopes the agents
volunteer).

Primal recovery uses a tail running average of the replies: the average is
restarted whenever the round count crosses a power of two, so it always
covers roughly the most recent half of the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .bus import DEMAND_REPLY, SUPPLY_REPLY, InProcBus
from .model import (
    Allocation,
    Battery,
    ProviderCost,
    Scenario,
    SpotMarket,
    UserModel,
    make_allocation,
)
from .solver_core import ConvergenceReport, LoggedIterate

__all__ = [
    "DualConfig",
    "UserReply",
    "user_best_response",
    "user_surplus",
    "provider_supply_response",
    "price_update",
    "dual_value",
    "dual_lipschitz",
    "run_dual",
    "UserAgent",
    "ProviderAgent",
    "build_agents",
]


@dataclass
class DualConfig:
    gamma0: float | None = None  # None picks 1/L from the dual curvature
    step_rule: str = "diminishing"  # "diminishing" (gamma0/sqrt(k)) or "constant"
    max_rounds: int = 4000
    tol_balance: float = 1e-6
    tol_gap: float | None = 1e-6
    round_timeout: float = 5.0


# ---------------------------------------------------------------------------
# Best responses
# ---------------------------------------------------------------------------

@dataclass
class UserReply:
    """A user's surplus-maximizing schedule at given prices."""

    q: np.ndarray
    e: list[np.ndarray]
    r: np.ndarray
    d: np.ndarray

    @property
    def load(self) -> np.ndarray:
        out = np.array(self.q, dtype=float) + self.r - self.d
        for ek in self.e:
            out = out + ek
        return out


def _deferrable_response(dl, p: np.ndarray, dt: float) -> np.ndarray:
    """Cheapest-slots-first fill of the window's energy requirement."""
    e = np.zeros(len(p))
    need = dl.energy_required / dt
    order = sorted(dl.slots(), key=lambda t: (p[t], t))
    for t in order:
        if need <= 0:
            break
        take = min(dl.per_slot_max, need)
        e[t] = take
        need -= take
    return e


def _battery_response(b: Battery, p: np.ndarray, dt: float):
    """Exact LP solution of the storage arbitrage subproblem."""
    T = len(p)
    if b.capacity <= 0 or (b.charge_rate_max <= 0 and b.discharge_rate_max <= 0):
        return np.zeros(T), np.zeros(T)
    cost = np.concatenate([p, -p])  # pay p per kW charged, save p per kW discharged
    L = np.tril(np.ones((T, T)))
    W = np.hstack([b.efficiency * dt * L, -dt * L])  # rows: s_k - s0
    A_ub = np.vstack([W, -W, -W[-1:]])
    b_ub = np.concatenate(
        [np.full(T, b.capacity - b.initial_level), np.full(T, b.initial_level), [0.0]]
    )
    bounds = [(0.0, b.charge_rate_max)] * T + [(0.0, b.discharge_rate_max)] * T
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:  # z = 0 is always feasible, so this signals a bug
        raise RuntimeError(f"battery subproblem failed: {res.message}")
    return res.x[:T], res.x[T:]


def user_best_response(u: UserModel, p: np.ndarray, dt: float = 1.0) -> UserReply:
    """Maximize the user's surplus sum_t [u(q_t) - p_t * load_t].

    The subproblem separates: elective consumption has the closed form
    clamp(demand(p), q_min, q_max) slot-wise, each deferrable window fills its
    cheapest slots, and the battery solves a small arbitrage LP.
    """
    p = np.asarray(p, dtype=float)
    q = np.clip(u.utility.demand(p), u.q_min, u.q_max)
    e = [_deferrable_response(dl, p, dt) for dl in u.deferrables]
    if u.battery is not None:
        r, d = _battery_response(u.battery, p, dt)
    else:
        r = np.zeros(len(p))
        d = np.zeros(len(p))
    return UserReply(q=q, e=e, r=r, d=d)


def user_surplus(u: UserModel, reply: UserReply, p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    return float(u.utility.value(reply.q).sum() - (p * reply.load).sum())


def provider_supply_response(c: ProviderCost, p: np.ndarray) -> np.ndarray:
    """Profit-maximizing own production: clamp((p - c1)/c2, 0, capacity)."""
    p = np.asarray(p, dtype=float)
    return np.clip((p - c.c1) / c.c2, 0.0, c.capacity)


def _spot_purchase_response(m: SpotMarket, p: np.ndarray) -> np.ndarray:
    """Purchases maximizing p*g - (pi0*g + kappa/2 g^2) over [0, g_max]."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = (p - m.pi0) / np.where(m.kappa > 0, m.kappa, np.inf)
    bang = np.where(p > m.pi0, m.g_max, 0.0)
    g = np.where(m.kappa > 0, np.clip(interior, 0.0, m.g_max), bang)
    return g


def price_update(p: np.ndarray, demand: np.ndarray, supply: np.ndarray, gamma: float) -> np.ndarray:
    """Projected subgradient step: excess demand raises prices, excess supply
    lowers them toward zero."""
    return np.maximum(0.0, np.asarray(p, float) + gamma * (np.asarray(demand, float) - np.asarray(supply, float)))


def dual_value(s: Scenario, p: np.ndarray, use_spot: bool | None = None) -> float:
    """Lagrangian dual of the welfare problem at prices p.

    Sum of maximal user surpluses and maximal provider (and spot) profit; by
    weak duality an upper bound on the welfare of every feasible allocation.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("prices must be nonnegative")
    if use_spot is None:
        use_spot = s.spot is not None
    total = 0.0
    for u in s.users:
        total += user_surplus(u, user_best_response(u, p, s.dt), p)
    supply = provider_supply_response(s.provider, p)
    total += float((p * supply - s.provider.cost(supply)).sum())
    if use_spot and s.spot is not None:
        g = _spot_purchase_response(s.spot, p)
        total += float((p * g - s.spot.outlay(g)).sum())
    return total


def dual_lipschitz(s: Scenario, use_spot: bool = False) -> float:
    """Bound on the dual gradient's Lipschitz constant (smooth responses
    only; deferrable and battery replies are piecewise constant in p)."""
    slope = 1.0 / s.provider.c2
    for u in s.users:
        if u.utility.kind == "quadratic":
            slope = slope + u.utility.a
        else:
            with np.errstate(divide="ignore"):
                p_lo = u.utility.b / (u.utility.a + u.q_max)
            su = np.where(p_lo > 0, u.utility.b / np.maximum(p_lo, 1e-12) ** 2, 0.0)
            slope = slope + su
    if use_spot and s.spot is not None:
        slope = slope + np.where(s.spot.kappa > 0, 1.0 / np.where(s.spot.kappa > 0, s.spot.kappa, 1.0), 0.0)
    return float(np.max(slope))


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

class UserAgent:
    """Bus-facing wrapper computing one user's demand reply per round."""

    def __init__(self, index: int, user: UserModel, dt: float, report_slope: bool = True):
        self.name = f"user:{index:04d}"
        self.user = user
        self.dt = dt
        # slopes are only exact for box-constrained quadratic users
        self.report_slope = (
            report_slope
            and user.utility.kind == "quadratic"
            and not user.deferrables
            and user.battery is None
        )

    def __call__(self, round_idx: int, payload: dict) -> dict:
        p = np.asarray(payload["p"], dtype=float)
        reply = user_best_response(self.user, p, self.dt)
        out = {
            "agent": self.name,
            "q": reply.q.tolist(),
            "e": [ek.tolist() for ek in reply.e],
            "r": reply.r.tolist(),
            "d": reply.d.tolist(),
        }
        if self.report_slope:
            u = self.user
            raw = u.utility.demand(p)
            interior = (raw > u.q_min) & (raw < u.q_max)
            out["slope"] = np.where(interior, -u.utility.a, 0.0).tolist()
        return {"direction": DEMAND_REPLY, "payload": out}


class ProviderAgent:
    """Supply (and spot purchase) reply per round, with local slope."""

    def __init__(self, provider: ProviderCost, spot: SpotMarket | None = None, report_slope: bool = True):
        self.name = "provider"
        self.provider = provider
        self.spot = spot
        self.report_slope = report_slope

    def __call__(self, round_idx: int, payload: dict) -> dict:
        p = np.asarray(payload["p"], dtype=float)
        supply = provider_supply_response(self.provider, p)
        g = np.zeros(len(p)) if self.spot is None else _spot_purchase_response(self.spot, p)
        out = {"agent": self.name, "supply": supply.tolist(), "spot_g": g.tolist()}
        if self.report_slope:
            raw = (p - self.provider.c1) / self.provider.c2
            interior = (raw > 0) & (raw < self.provider.capacity)
            slope = np.where(interior, 1.0 / self.provider.c2, 0.0)
            if self.spot is not None:
                kp = self.spot.kappa
                smooth = kp > 0
                g_int = smooth & (g > 0) & (g < self.spot.g_max)
                slope = slope + np.where(g_int, 1.0 / np.where(smooth, kp, 1.0), 0.0)
            out["slope"] = slope.tolist()
        return {"direction": SUPPLY_REPLY, "payload": out}


def build_agents(s: Scenario, use_spot: bool = False, report_slope: bool = True) -> dict:
    agents = {}
    for i, u in enumerate(s.users):
        a = UserAgent(i, u, s.dt, report_slope=report_slope)
        agents[a.name] = a
    pa = ProviderAgent(s.provider, s.spot if use_spot else None, report_slope=report_slope)
    agents[pa.name] = pa
    return agents


# ---------------------------------------------------------------------------
# Market engine
# ---------------------------------------------------------------------------

class _TailAverager:
    """Running mean restarted at every power-of-two round, so the window
    always spans roughly the latest half of the iteration."""

    def __init__(self):
        self._sums: dict[str, np.ndarray] = {}
        self.count = 0

    def update(self, round_idx: int, fields: dict[str, np.ndarray]) -> None:
        if round_idx & (round_idx - 1) == 0:  # 1, 2, 4, 8, ...
            self._sums = {k: np.array(v, dtype=float) for k, v in fields.items()}
            self.count = 1
        else:
            for k, v in fields.items():
                self._sums[k] += v
            self.count += 1

    def mean(self) -> dict[str, np.ndarray]:
        return {k: v / self.count for k, v in self._sums.items()}


def _parse_replies(s: Scenario, replies: list[dict]):
    provider = None
    users: dict[str, dict] = {}
    for payload in replies:
        if payload["agent"] == "provider":
            provider = payload
        else:
            users[payload["agent"]] = payload
    n, T = s.n_users, s.T
    q = np.zeros((n, T))
    r = np.zeros((n, T))
    d = np.zeros((n, T))
    e_flat = []
    slopes = np.zeros(T)
    have_slopes = provider is not None and "slope" in provider
    for i in range(n):
        payload = users[f"user:{i:04d}"]
        q[i] = payload["q"]
        r[i] = payload["r"]
        d[i] = payload["d"]
        for ek in payload["e"]:
            e_flat.append(np.asarray(ek, dtype=float))
        if "slope" in payload:
            slopes += np.asarray(payload["slope"], dtype=float)
        else:
            have_slopes = False
    supply = np.asarray(provider["supply"], dtype=float)
    g = np.asarray(provider["spot_g"], dtype=float)
    if have_slopes:
        slopes -= np.asarray(provider["slope"], dtype=float)  # h_t <= 0
    e_stack = np.stack(e_flat) if e_flat else np.zeros((0, T))
    return q, e_stack, r, d, supply, g, (slopes if have_slopes else None)


def _mismatch(p: np.ndarray, demand: np.ndarray, supply_tot: np.ndarray) -> float:
    gap = demand - supply_tot
    short = float(np.max(gap, initial=0.0))
    # complementary slackness on oversupplied slots
    comp = float(np.max(np.minimum(p, np.maximum(-gap, 0.0)), initial=0.0))
    return max(short, comp)


def _alloc_from_fields(s: Scenario, q, e_stack, r, d, supply, g) -> Allocation:
    e_nested = []
    pos = 0
    for u in s.users:
        row = []
        for _ in u.deferrables:
            row.append(e_stack[pos])
            pos += 1
        e_nested.append(row)
    return make_allocation(s, q, e_nested, r, d, supply=supply, spot_g=g)


def _run_market(
    s: Scenario,
    cfg: DualConfig | None,
    bus=None,
    *,
    use_spot: bool = False,
    newton=None,
    record_prices: bool = False,
):
    cfg = cfg or DualConfig()
    own_bus = bus is None
    if own_bus:
        bus = InProcBus()
        for name, agent in build_agents(s, use_spot=use_spot).items():
            bus.register(name, agent)
    T = s.T
    gamma0 = cfg.gamma0 if cfg.gamma0 is not None else 1.0 / dual_lipschitz(s, use_spot)
    # start just above the zero-production marginal cost so the provider's
    # response is interior from the first round
    p = np.asarray(s.provider.c1, dtype=float) + 1e-6
    averager = _TailAverager()
    logged: list[LoggedIterate] = []
    prices: list[np.ndarray] = []
    log_every = max(1, cfg.max_rounds // 256)
    alpha = getattr(newton, "alpha", 1.0)
    h_floor = getattr(newton, "h_floor", 1e-9)
    retries_left = getattr(newton, "max_alpha_retries", 6)
    prev_gap_norm = np.inf
    stop_reason = "max_iters"
    rounds = 0
    final_fields = None
    kkt = np.inf
    try:
        for k in range(1, cfg.max_rounds + 1):
            rounds = k
            if record_prices:
                prices.append(p.copy())
            replies = bus.round_trip(k, {"p": p.tolist()})
            q, e_stack, r, d, supply, g, h = _parse_replies(s, replies)
            demand = q.sum(axis=0) + r.sum(axis=0) - d.sum(axis=0) + e_stack.sum(axis=0)
            supply_tot = supply + g
            gap = demand - supply_tot
            kkt = _mismatch(p, demand, supply_tot)
            averager.update(k, {"q": q, "e": e_stack, "r": r, "d": d, "supply": supply, "g": g})
            avg = averager.mean()
            avg_demand = avg["q"].sum(axis=0) + avg["r"].sum(axis=0) - avg["d"].sum(axis=0) + avg["e"].sum(axis=0)
            own_bar = avg_demand - avg["g"]
            feasible = bool(np.all(own_bar >= -1e-9) and np.all(own_bar <= s.provider.capacity + 1e-9))
            primal = np.nan
            if feasible:
                primal = 0.0
                for i, u in enumerate(s.users):
                    primal += float(u.utility.value(avg["q"][i]).sum())
                primal -= float(s.provider.cost(own_bar).sum())
                if use_spot and s.spot is not None:
                    primal -= float(s.spot.outlay(avg["g"]).sum())
            dual_v = 0.0
            for i, u in enumerate(s.users):
                reply = UserReply(q=q[i], e=[e for e in _user_e(s, e_stack, i)], r=r[i], d=d[i])
                dual_v += user_surplus(u, reply, p)
            dual_v += float((p * supply - s.provider.cost(supply)).sum())
            if use_spot and s.spot is not None:
                dual_v += float((p * g - s.spot.outlay(g)).sum())
            if k % log_every == 0 or k == 1:
                entry = LoggedIterate(
                    iteration=k,
                    objective=float(primal) if feasible else float("nan"),
                    kkt=kkt,
                    dual_value=dual_v,
                    primal_feasible=feasible,
                )
                if use_spot and s.spot is not None:
                    entry.spot_g = float(g.sum())
                    entry.spot_price = float(np.mean(s.spot.effective_price(g)))
                logged.append(entry)
            gap_ok = cfg.tol_gap is None or (feasible and dual_v - primal <= cfg.tol_gap)
            balance_raw = kkt <= cfg.tol_balance
            avg_mismatch = _mismatch(p, avg_demand, avg["supply"] + avg["g"])
            balance_avg = avg_mismatch <= cfg.tol_balance and averager.count >= min(8, k)
            if gap_ok and (balance_raw or balance_avg):
                stop_reason = "kkt"
                final_fields = (q, e_stack, r, d, supply, g) if balance_raw else tuple(
                    avg[key] for key in ("q", "e", "r", "d", "supply", "g")
                )
                break
            if newton is not None and h is not None:
                # enforce a decreasing balance gap; overshoot across response
                # breakpoints otherwise cycles between clamp regions
                gnorm = float(np.max(np.abs(gap), initial=0.0))
                if gnorm >= prev_gap_norm * (1.0 - 1e-12) and retries_left > 0:
                    alpha *= 0.5
                    retries_left -= 1
                prev_gap_norm = gnorm
                usable = np.abs(h) >= h_floor
                step = np.where(usable, -np.divide(gap, np.where(usable, h, 1.0)) * alpha, gamma0 * gap)
                p = np.maximum(0.0, p + step)
            else:
                gamma_k = gamma0 if cfg.step_rule == "constant" else gamma0 / np.sqrt(k)
                p = price_update(p, demand, supply_tot, gamma_k)
        if final_fields is None:
            avg = averager.mean()
            final_fields = tuple(avg[key] for key in ("q", "e", "r", "d", "supply", "g"))
    finally:
        if own_bus:
            bus.close()
    alloc = _alloc_from_fields(s, *final_fields)
    if logged and logged[-1].iteration != rounds:
        logged.append(LoggedIterate(iteration=rounds, objective=float("nan"), kkt=kkt))
    report = ConvergenceReport(
        iterates_logged=logged,
        final_objective=_final_welfare(s, alloc, use_spot),
        kkt_residual=kkt,
        iterations=rounds,
        stop_reason=stop_reason,
        extras={"gamma0": gamma0, "alpha_final": alpha if newton is not None else None},
        price_trajectory=prices if record_prices else None,
    )
    return p, alloc, report


def _user_e(s: Scenario, e_stack: np.ndarray, i: int):
    pos = 0
    for j, u in enumerate(s.users):
        for _ in u.deferrables:
            if j == i:
                yield e_stack[pos]
            pos += 1


def _final_welfare(s: Scenario, alloc: Allocation, use_spot: bool) -> float:
    from .model import welfare

    if use_spot:
        return welfare(s, alloc)
    # evaluate without the spot block even if the scenario declares one
    total = 0.0
    for i, u in enumerate(s.users):
        total += float(u.utility.value(alloc.q[i]).sum())
    total -= float(s.provider.cost(alloc.supply).sum())
    return total


def run_dual(s: Scenario, cfg: DualConfig | None = None, bus=None, record_prices: bool = False):
    """Distributed solution of the welfare problem (spot market ignored).

    Returns (prices, allocation, report).  On convergence the supply-demand
    mismatch per slot is at most ``tol_balance`` and, unless ``tol_gap`` is
    disabled, the recovered primal value sits within ``tol_gap`` of the dual
    value.  Non-convergence returns the best averaged iterate with
    ``stop_reason == "max_iters"``.
    """
    return _run_market(s, cfg, bus, use_spot=False, record_prices=record_prices)
