"""Single-user consumption/storage control against the production cost.

Solves the one-user welfare problem centrally, recovers the multipliers of
the battery level constraints from the converged schedule, and verifies the
qualitative structure of the optimum numerically: within every time segment
where the stored level stays strictly inside its bounds, the realized
marginal production cost is equalized (exactly so for lossless storage), and
slots partition into charge / idle / discharge in order of marginal cost.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Allocation, Horizon, ProviderCost, Scenario, UserModel, validate_scenario
from .solver_core import ConvergenceReport, SolverConfig, solve_system

__all__ = [
    "BatteryMultipliers",
    "SingleUserSolution",
    "solve_single_user",
    "StructureReport",
    "SegmentCheck",
    "verify_threshold_structure",
    "export_structure_csv",
]

_LEVEL_ATOL = 1e-6
_RATE_ATOL = 1e-6


@dataclass
class BatteryMultipliers:
    """KKT multipliers of the battery dynamics at the computed optimum.

    ``costate[t]`` prices the end-of-slot-t stored energy; it is constant
    between binding level constraints and jumps by the corresponding bound
    multiplier at each hit.
    """

    costate: np.ndarray
    level_lower: np.ndarray
    level_upper: np.ndarray
    terminal: float
    stationarity_residual: float
    comp_slackness_residual: float


@dataclass
class SingleUserSolution:
    scenario: Scenario
    allocation: Allocation
    report: ConvergenceReport
    marginal_cost: np.ndarray
    levels: np.ndarray  # s_0 .. s_T
    multipliers: BatteryMultipliers
    segments: list[tuple[int, int]]


def _segment_slots(levels: np.ndarray, cap: float, T: int) -> list[tuple[int, int]]:
    """Maximal slot runs split where an intermediate level hits a bound."""
    breaks = [
        t
        for t in range(1, T)
        if levels[t] <= _LEVEL_ATOL or levels[t] >= cap - _LEVEL_ATOL
    ]
    segments = []
    start = 0
    for t in breaks:
        segments.append((start, t - 1))
        start = t
    segments.append((start, T - 1))
    return segments


def _extract_multipliers(s: Scenario, alloc: Allocation, m: np.ndarray) -> tuple[BatteryMultipliers, np.ndarray, list]:
    u = s.users[0]
    T, dt = s.T, s.dt
    if u.battery is None:
        zero = np.zeros(T)
        mult = BatteryMultipliers(zero, zero.copy(), zero.copy(), 0.0, 0.0, 0.0)
        return mult, np.concatenate([[0.0], np.zeros(T)]), [(0, T - 1)]
    b = u.battery
    r, d = alloc.r[0], alloc.d[0]
    levels = np.concatenate([[b.initial_level], b.levels(r, d, dt)])
    segments = _segment_slots(levels, b.capacity, T)
    psi = np.zeros(T)
    for (ta, tb) in segments:
        eq, lo, hi = [], -np.inf, np.inf
        for t in range(ta, tb + 1):
            r_int = _RATE_ATOL < r[t] < b.charge_rate_max - _RATE_ATOL
            d_int = _RATE_ATOL < d[t] < b.discharge_rate_max - _RATE_ATOL
            if r_int:
                eq.append(m[t] / (b.efficiency * dt))
            elif r[t] <= _RATE_ATOL:
                hi = min(hi, m[t] / (b.efficiency * dt))
            else:
                lo = max(lo, m[t] / (b.efficiency * dt))
            if d_int:
                eq.append(m[t] / dt)
            elif d[t] <= _RATE_ATOL:
                lo = max(lo, m[t] / dt)
            else:
                hi = min(hi, m[t] / dt)
        if eq:
            val = float(np.mean(eq))
        elif np.isfinite(lo) and np.isfinite(hi):
            val = 0.5 * (lo + hi)
        elif np.isfinite(lo):
            val = lo
        elif np.isfinite(hi):
            val = max(hi, 0.0) if hi >= 0 else hi
        else:
            val = 0.0
        psi[ta : tb + 1] = val
    # decompose the terminal costate by which end constraint binds
    terminal = 0.0
    mu_lo = np.zeros(T + 1)
    mu_hi = np.zeros(T + 1)
    psi_end = psi[-1]
    if levels[T] <= b.initial_level + _LEVEL_ATOL and psi_end > 0:
        terminal = psi_end
    elif levels[T] >= b.capacity - _LEVEL_ATOL and psi_end < 0:
        mu_hi[T] = -psi_end
    elif levels[T] <= _LEVEL_ATOL and psi_end > 0:
        mu_lo[T] = psi_end
    for (ta, tb), (na, nb) in zip(segments[:-1], segments[1:]):
        t = na  # break sits between slot tb and slot na, at level index na
        jump = psi[tb] - psi[na]
        if levels[t] <= _LEVEL_ATOL:
            mu_lo[t] = max(jump, 0.0)
        else:
            mu_hi[t] = max(-jump, 0.0)
    # residuals: how well the recovered costate explains the schedule
    stat = 0.0
    for t in range(T):
        gr = -m[t] + b.efficiency * dt * psi[t]
        if r[t] <= _RATE_ATOL:
            stat = max(stat, gr)
        elif r[t] >= b.charge_rate_max - _RATE_ATOL:
            stat = max(stat, -gr)
        else:
            stat = max(stat, abs(gr))
        gd = m[t] - dt * psi[t]
        if d[t] <= _RATE_ATOL:
            stat = max(stat, gd)
        elif d[t] >= b.discharge_rate_max - _RATE_ATOL:
            stat = max(stat, -gd)
        else:
            stat = max(stat, abs(gd))
    comp = terminal * max(levels[T] - b.initial_level, 0.0)
    for t in range(1, T + 1):
        comp = max(comp, mu_lo[t] * max(levels[t], 0.0))
        comp = max(comp, mu_hi[t] * max(b.capacity - levels[t], 0.0))
    mult = BatteryMultipliers(
        costate=psi,
        level_lower=mu_lo[1:],
        level_upper=mu_hi[1:],
        terminal=terminal,
        stationarity_residual=float(max(stat, 0.0)),
        comp_slackness_residual=float(comp),
    )
    return mult, levels, segments


def solve_single_user(
    u: UserModel,
    c: ProviderCost,
    h: Horizon,
    cfg: SolverConfig | None = None,
):
    """Welfare-maximizing schedule for one user plus the battery-dynamics
    multipliers recovered from the optimum."""
    s = Scenario(horizon=h, users=(u,), provider=c)
    validate_scenario(s)
    cfg = cfg or SolverConfig(tol_kkt=1e-10, max_iters=60000)
    alloc, report = solve_system(s, cfg)
    mu_cap = report.extras.get("capacity_multipliers")
    m = c.marginal(alloc.aggregate_demand)
    if mu_cap is not None:
        m = m + mu_cap
    mult, levels, segments = _extract_multipliers(s, alloc, m)
    return SingleUserSolution(
        scenario=s,
        allocation=alloc,
        report=report,
        marginal_cost=m,
        levels=levels,
        multipliers=mult,
        segments=segments,
    )


@dataclass
class SegmentCheck:
    start: int
    end: int
    costate: float
    mc_spread: float
    equalized: bool
    n_checked: int
    threshold_charge: float | None
    threshold_discharge: float | None
    ordered: bool


@dataclass
class StructureReport:
    """Numerical verification of the optimal-control structure."""

    segments: list[SegmentCheck]
    equalized: bool
    ordered: bool
    comp_slackness_residual: float
    vacuous: bool
    rows: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.equalized and self.ordered


def verify_threshold_structure(sol: SingleUserSolution, tol: float = 1e-4) -> StructureReport:
    """Check (a) marginal-cost equalization on battery-interior slots within
    each segment and (b) the charge/idle/discharge partition ordered by
    marginal cost, with the two segment thresholds."""
    s = sol.scenario
    u = s.users[0]
    T, dt = s.T, s.dt
    m = sol.marginal_cost
    r, d = sol.allocation.r[0], sol.allocation.d[0]
    seg_checks: list[SegmentCheck] = []
    if u.battery is None:
        rows = _slot_rows(sol)
        return StructureReport([], True, True, 0.0, True, rows)
    b = u.battery
    net = b.efficiency * dt * r - dt * d
    lossless = b.efficiency >= 1.0 - 1e-12
    for seg_idx, (ta, tb) in enumerate(sol.segments):
        eligible = []
        charge_m, idle_m, discharge_m = [], [], []
        for t in range(ta, tb + 1):
            unclamped = (
                r[t] < b.charge_rate_max - _RATE_ATOL
                and d[t] < b.discharge_rate_max - _RATE_ATOL
            )
            active = abs(net[t]) > _RATE_ATOL * dt
            if unclamped and (active or lossless):
                eligible.append(m[t])
            if net[t] > _RATE_ATOL * dt:
                charge_m.append(m[t])
            elif net[t] < -_RATE_ATOL * dt:
                discharge_m.append(m[t])
            else:
                idle_m.append(m[t])
        spread = float(max(eligible) - min(eligible)) if len(eligible) > 1 else 0.0
        ordered = True
        if charge_m and idle_m:
            ordered &= max(charge_m) <= min(idle_m) + tol
        if idle_m and discharge_m:
            ordered &= max(idle_m) <= min(discharge_m) + tol
        if charge_m and discharge_m:
            ordered &= max(charge_m) <= min(discharge_m) + tol
        seg_checks.append(
            SegmentCheck(
                start=ta,
                end=tb,
                costate=float(sol.multipliers.costate[ta]),
                mc_spread=spread,
                equalized=spread <= tol,
                n_checked=len(eligible),
                threshold_charge=max(charge_m) if charge_m else None,
                threshold_discharge=min(discharge_m) if discharge_m else None,
                ordered=bool(ordered),
            )
        )
    report = StructureReport(
        segments=seg_checks,
        equalized=all(c.equalized for c in seg_checks),
        ordered=all(c.ordered for c in seg_checks),
        comp_slackness_residual=sol.multipliers.comp_slackness_residual,
        vacuous=not seg_checks,
        rows=_slot_rows(sol),
    )
    return report


def _slot_rows(sol: SingleUserSolution) -> list[dict]:
    alloc = sol.allocation
    total = alloc.total_consumption[0]
    seg_of = np.zeros(sol.scenario.T, dtype=int)
    for idx, (ta, tb) in enumerate(sol.segments):
        seg_of[ta : tb + 1] = idx
    return [
        {
            "slot": t,
            "q": float(total[t]),
            "r": float(alloc.r[0, t]),
            "d": float(alloc.d[0, t]),
            "level": float(sol.levels[t + 1]),
            "marginal_cost": float(sol.marginal_cost[t]),
            "segment": int(seg_of[t]),
        }
        for t in range(sol.scenario.T)
    ]


def export_structure_csv(sol: SingleUserSolution, path) -> None:
    """Write the per-slot structure table:
    ``slot,q,r,d,level,marginal_cost,segment``."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(
            fh,
            fieldnames=["slot", "q", "r", "d", "level", "marginal_cost", "segment"],
            lineterminator="\n",
        )
        w.writeheader()
        for row in _slot_rows(sol):
            w.writerow(row)
