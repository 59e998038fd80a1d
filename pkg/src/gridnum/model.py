"""Domain model for the demand-response market toolkit.

A scenario describes a finite-horizon electricity market: one provider with
convex quadratic production cost and per-slot capacity, a set of
price-responsive users (optionally carrying deferrable loads and a battery),
and an optional spot market the provider may buy from.

Unit conventions: powers in kW, energies in kWh, prices in $/kWh.
``slot_duration`` (hours) converts power to energy; utilities and production
costs are evaluated per slot directly on power, so the duration only enters
energy bookkeeping (deferrable totals, battery levels).

Scenario and Allocation instances are immutable after construction (their
numpy arrays are write-locked); every operation in this package is a pure
function of its inputs, so instances can be shared freely across concurrent
solver runs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ScenarioError",
    "ScenarioParseError",
    "ScenarioValidationError",
    "Horizon",
    "UtilityParams",
    "DeferrableLoad",
    "Battery",
    "UserModel",
    "ProviderCost",
    "SpotMarket",
    "Scenario",
    "Allocation",
    "ResidualReport",
    "load_scenario",
    "save_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "validate_scenario",
    "welfare",
    "feasibility_residuals",
    "allocation_from_consumption",
    "export_allocation_csv",
]


class ScenarioError(ValueError):
    """Base class for scenario ingestion failures."""


class ScenarioParseError(ScenarioError):
    """The file could not be parsed into the documented scenario format."""


class ScenarioValidationError(ScenarioError):
    """A parsed scenario violates an invariant; message names the first one."""


def _locked(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _per_slot(value, T: int, name: str) -> np.ndarray:
    """Broadcast a scalar or length-T sequence to a locked (T,) array."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(T, float(arr))
    if arr.shape != (T,):
        raise ScenarioValidationError(
            f"{name} must be a scalar or length-{T} sequence, got shape {arr.shape}"
        )
    return _locked(arr)


@dataclass(frozen=True)
class Horizon:
    """Discrete planning horizon: ``T`` slots of ``slot_duration`` hours."""

    T: int
    slot_duration: float = 1.0


@dataclass(frozen=True)
class UtilityParams:
    """Per-slot concave utility of consumption.

    kind="quadratic": u(q) = b*q - q^2 / (2*a)   (marginal value b at q=0)
    kind="logarithmic": u(q) = b*ln(1 + q/a)

    ``a`` and ``b`` are per-slot arrays; a > 0, b >= 0.
    """

    kind: str
    a: np.ndarray
    b: np.ndarray

    def value(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.kind == "quadratic":
            return self.b * q - q * q / (2.0 * self.a)
        return self.b * np.log1p(q / self.a)

    def marginal(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.kind == "quadratic":
            return self.b - q / self.a
        return self.b / (self.a + q)

    def curvature(self, q: np.ndarray) -> np.ndarray:
        """Second derivative of the utility (nonpositive)."""
        q = np.asarray(q, dtype=float)
        if self.kind == "quadratic":
            return -1.0 / self.a + 0.0 * q
        return -self.b / (self.a + q) ** 2

    def demand(self, p: np.ndarray) -> np.ndarray:
        """Unconstrained maximizer of u(q) - p*q (may be negative)."""
        p = np.asarray(p, dtype=float)
        if self.kind == "quadratic":
            return self.a * (self.b - p)
        with np.errstate(divide="ignore"):
            q = np.where(p > 0.0, self.b / np.maximum(p, 1e-300) - self.a, np.inf)
        return q


@dataclass(frozen=True)
class DeferrableLoad:
    """A load needing ``energy_required`` kWh inside [window_start, window_end].

    Service rate per slot is bounded by ``per_slot_max`` kW; timing within the
    window is the only freedom.  Served energy earns no utility: it is a
    commitment, not elective consumption.
    """

    window_start: int
    window_end: int
    energy_required: float
    per_slot_max: float

    @property
    def width(self) -> int:
        return self.window_end - self.window_start + 1

    def slots(self) -> range:
        return range(self.window_start, self.window_end + 1)


@dataclass(frozen=True)
class Battery:
    """User-side storage with one-sided charge efficiency.

    Level dynamics: s[t+1] = s[t] + efficiency * r[t] * dt - d[t] * dt, with
    s in [0, capacity] throughout and s[T] >= initial_level (the schedule may
    not monetize the initial charge).
    """

    capacity: float
    charge_rate_max: float
    discharge_rate_max: float
    efficiency: float = 1.0
    initial_level: float = 0.0

    def levels(self, r: np.ndarray, d: np.ndarray, dt: float) -> np.ndarray:
        """End-of-slot levels s[1..T] for a charge/discharge schedule."""
        flow = self.efficiency * np.asarray(r, float) * dt - np.asarray(d, float) * dt
        return self.initial_level + np.cumsum(flow)


@dataclass(frozen=True)
class UserModel:
    id: str
    utility: UtilityParams
    q_min: np.ndarray
    q_max: np.ndarray
    deferrables: tuple[DeferrableLoad, ...] = ()
    battery: Battery | None = None


@dataclass(frozen=True)
class ProviderCost:
    """Convex quadratic production cost c_t(Q) = c1_t*Q + (c2_t/2)*Q^2.

    ``capacity`` caps per-slot production; c2 > 0 keeps the marginal cost
    strictly increasing, which makes market prices well defined.
    """

    c1: np.ndarray
    c2: np.ndarray
    capacity: np.ndarray

    def cost(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        return self.c1 * Q + 0.5 * self.c2 * Q * Q

    def marginal(self, Q: np.ndarray) -> np.ndarray:
        return self.c1 + self.c2 * np.asarray(Q, dtype=float)


@dataclass(frozen=True)
class SpotMarket:
    """External supply source with purchase-sensitive price.

    The effective spot price for buying g kW is pi0 + kappa*g; kappa == 0 is a
    flat, purely exogenous price.  The internalized outlay used in welfare is
    the integrated cost pi0*g + (kappa/2)*g^2.
    """

    pi0: np.ndarray
    kappa: np.ndarray
    g_max: np.ndarray

    def outlay(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        return self.pi0 * g + 0.5 * self.kappa * g * g

    def effective_price(self, g: np.ndarray) -> np.ndarray:
        return self.pi0 + self.kappa * np.asarray(g, dtype=float)


@dataclass(frozen=True)
class Scenario:
    horizon: Horizon
    users: tuple[UserModel, ...]
    provider: ProviderCost
    spot: SpotMarket | None = None
    seed: int = 0

    @property
    def T(self) -> int:
        return self.horizon.T

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def dt(self) -> float:
        return self.horizon.slot_duration


@dataclass(frozen=True)
class Allocation:
    """Primal point: per-user consumption and battery schedules plus the
    provider side.

    q[i, t]     elective consumption (earns utility)
    e[i][k][t]  service rate of user i's k-th deferrable load (zero outside
                its window)
    r[i, t], d[i, t]  battery charge / discharge rates
    supply[t]   provider's own production
    spot_g[t]   spot purchases (zero when the scenario has no spot market)
    """

    q: np.ndarray
    e: tuple[tuple[np.ndarray, ...], ...]
    r: np.ndarray
    d: np.ndarray
    supply: np.ndarray
    spot_g: np.ndarray

    @property
    def total_consumption(self) -> np.ndarray:
        """q plus deferrable service, per user per slot."""
        out = np.array(self.q, dtype=float)
        for i, user_e in enumerate(self.e):
            for ek in user_e:
                out[i] += ek
        return out

    @property
    def load(self) -> np.ndarray:
        """Grid draw per user per slot: consumption + charging - discharging."""
        return self.total_consumption + self.r - self.d

    @property
    def aggregate_demand(self) -> np.ndarray:
        return self.load.sum(axis=0)


def allocation_zeros(s: Scenario) -> Allocation:
    n, T = s.n_users, s.T
    e = tuple(
        tuple(_locked(np.zeros(T)) for _ in u.deferrables) for u in s.users
    )
    z = lambda *shape: _locked(np.zeros(shape))
    return Allocation(z(n, T), e, z(n, T), z(n, T), z(T), z(T))


def make_allocation(s: Scenario, q, e, r, d, supply=None, spot_g=None) -> Allocation:
    """Assemble a locked Allocation; supply defaults to the aggregate demand
    net of spot purchases (clipped at zero)."""
    n, T = s.n_users, s.T
    q = np.asarray(q, dtype=float).reshape(n, T)
    r = np.asarray(r, dtype=float).reshape(n, T)
    d = np.asarray(d, dtype=float).reshape(n, T)
    e_locked = tuple(
        tuple(_locked(np.asarray(ek, dtype=float).reshape(T)) for ek in user_e)
        for user_e in e
    )
    g = np.zeros(T) if spot_g is None else np.asarray(spot_g, dtype=float).reshape(T)
    if supply is None:
        demand = q.sum(axis=0) + r.sum(axis=0) - d.sum(axis=0)
        for user_e in e_locked:
            for ek in user_e:
                demand = demand + ek
        supply = np.maximum(demand - g, 0.0)
    supply = np.asarray(supply, dtype=float).reshape(T)
    return Allocation(_locked(q), e_locked, _locked(r), _locked(d), _locked(supply), _locked(g))


def allocation_from_consumption(s: Scenario, q) -> Allocation:
    """Allocation with elective consumption only and supply = demand."""
    n, T = s.n_users, s.T
    e = tuple(tuple(np.zeros(T) for _ in u.deferrables) for u in s.users)
    return make_allocation(s, q, e, np.zeros((n, T)), np.zeros((n, T)))


# ---------------------------------------------------------------------------
# Scenario ingestion
# ---------------------------------------------------------------------------

def scenario_from_dict(data: dict) -> Scenario:
    """Build and validate a Scenario from the documented JSON structure."""
    try:
        hz = data["horizon"]
        T = int(hz["T"])
        horizon = Horizon(T=T, slot_duration=float(hz.get("slot_duration", 1.0)))
        users = []
        for u in data["users"]:
            util = u["utility"]
            utility = UtilityParams(
                kind=str(util["kind"]),
                a=_per_slot(util["a"], T, "utility.a"),
                b=_per_slot(util["b"], T, "utility.b"),
            )
            deferrables = tuple(
                DeferrableLoad(
                    window_start=int(dl["window_start"]),
                    window_end=int(dl["window_end"]),
                    energy_required=float(dl["energy_required"]),
                    per_slot_max=float(dl["per_slot_max"]),
                )
                for dl in u.get("deferrables", [])
            )
            battery = None
            if u.get("battery") is not None:
                b = u["battery"]
                battery = Battery(
                    capacity=float(b["capacity"]),
                    charge_rate_max=float(b["charge_rate_max"]),
                    discharge_rate_max=float(b["discharge_rate_max"]),
                    efficiency=float(b.get("efficiency", 1.0)),
                    initial_level=float(b.get("initial_level", 0.0)),
                )
            users.append(
                UserModel(
                    id=str(u["id"]),
                    utility=utility,
                    q_min=_per_slot(u.get("q_min", 0.0), T, "q_min"),
                    q_max=_per_slot(u["q_max"], T, "q_max"),
                    deferrables=deferrables,
                    battery=battery,
                )
            )
        pr = data["provider"]
        provider = ProviderCost(
            c1=_per_slot(pr["c1"], T, "provider.c1"),
            c2=_per_slot(pr["c2"], T, "provider.c2"),
            capacity=_per_slot(pr["capacity"], T, "provider.capacity"),
        )
        spot = None
        if data.get("spot") is not None:
            sp = data["spot"]
            spot = SpotMarket(
                pi0=_per_slot(sp["pi0"], T, "spot.pi0"),
                kappa=_per_slot(sp.get("kappa", 0.0), T, "spot.kappa"),
                g_max=_per_slot(sp["g_max"], T, "spot.g_max"),
            )
        scenario = Scenario(
            horizon=horizon,
            users=tuple(users),
            provider=provider,
            spot=spot,
            seed=int(data.get("seed", 0)),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioParseError(f"malformed scenario: {exc}") from exc
    validate_scenario(scenario)
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    def arr(a):
        return [float(v) for v in np.asarray(a)]

    data = {
        "horizon": {"T": s.T, "slot_duration": s.horizon.slot_duration},
        "users": [
            {
                "id": u.id,
                "utility": {"kind": u.utility.kind, "a": arr(u.utility.a), "b": arr(u.utility.b)},
                "q_min": arr(u.q_min),
                "q_max": arr(u.q_max),
                "deferrables": [
                    {
                        "window_start": dl.window_start,
                        "window_end": dl.window_end,
                        "energy_required": dl.energy_required,
                        "per_slot_max": dl.per_slot_max,
                    }
                    for dl in u.deferrables
                ],
                "battery": None
                if u.battery is None
                else {
                    "capacity": u.battery.capacity,
                    "charge_rate_max": u.battery.charge_rate_max,
                    "discharge_rate_max": u.battery.discharge_rate_max,
                    "efficiency": u.battery.efficiency,
                    "initial_level": u.battery.initial_level,
                },
            }
            for u in s.users
        ],
        "provider": {"c1": arr(s.provider.c1), "c2": arr(s.provider.c2), "capacity": arr(s.provider.capacity)},
        "seed": s.seed,
    }
    if s.spot is not None:
        data["spot"] = {"pi0": arr(s.spot.pi0), "kappa": arr(s.spot.kappa), "g_max": arr(s.spot.g_max)}
    return data


def validate_scenario(s: Scenario) -> None:
    """Check every invariant; raise ScenarioValidationError naming the first
    violated one."""
    if s.T < 1:
        raise ScenarioValidationError("horizon must have at least one slot")
    if not s.horizon.slot_duration > 0:
        raise ScenarioValidationError("slot_duration must be positive")
    if not s.users:
        raise ScenarioValidationError("scenario needs at least one user")
    ids = [u.id for u in s.users]
    if len(set(ids)) != len(ids):
        raise ScenarioValidationError("duplicate user ids")
    dt = s.dt
    for u in s.users:
        if u.utility.kind not in ("quadratic", "logarithmic"):
            raise ScenarioValidationError(f"user {u.id}: unknown utility kind {u.utility.kind!r}")
        if not np.all(u.utility.a > 0):
            raise ScenarioValidationError(f"user {u.id}: utility.a must be positive")
        if not np.all(u.utility.b >= 0):
            raise ScenarioValidationError(f"user {u.id}: utility.b must be nonnegative")
        if not np.all(u.q_min >= 0):
            raise ScenarioValidationError(f"user {u.id}: q_min must be nonnegative")
        if not np.all(u.q_min <= u.q_max):
            raise ScenarioValidationError(f"user {u.id}: q_min exceeds q_max")
        for k, dl in enumerate(u.deferrables):
            if not (0 <= dl.window_start <= dl.window_end):
                raise ScenarioValidationError(f"user {u.id}: deferrable {k} window is inverted")
            if dl.window_end >= s.T:
                raise ScenarioValidationError(
                    f"user {u.id}: deferrable window exceeds horizon"
                )
            if dl.energy_required < 0:
                raise ScenarioValidationError(f"user {u.id}: deferrable energy must be nonnegative")
            if not dl.per_slot_max > 0:
                raise ScenarioValidationError(f"user {u.id}: deferrable per_slot_max must be positive")
            if dl.energy_required > dl.width * dl.per_slot_max * dt + 1e-12:
                raise ScenarioValidationError(f"user {u.id}: infeasible deferrable load")
        if u.battery is not None:
            b = u.battery
            if b.capacity < 0:
                raise ScenarioValidationError(f"user {u.id}: battery capacity must be nonnegative")
            if b.charge_rate_max < 0 or b.discharge_rate_max < 0:
                raise ScenarioValidationError(f"user {u.id}: battery rates must be nonnegative")
            if not (0 < b.efficiency <= 1):
                raise ScenarioValidationError(f"user {u.id}: battery efficiency must lie in (0, 1]")
            if not (0 <= b.initial_level <= b.capacity):
                raise ScenarioValidationError(f"user {u.id}: battery initial level outside [0, capacity]")
    if not np.all(s.provider.c1 >= 0):
        raise ScenarioValidationError("provider.c1 must be nonnegative")
    if not np.all(s.provider.c2 > 0):
        raise ScenarioValidationError("provider.c2 must be positive")
    if not np.all(s.provider.capacity >= 0):
        raise ScenarioValidationError("provider.capacity must be nonnegative")
    if s.spot is not None:
        if not np.all(s.spot.pi0 >= 0):
            raise ScenarioValidationError("spot.pi0 must be nonnegative")
        if not np.all(s.spot.kappa >= 0):
            raise ScenarioValidationError("spot.kappa must be nonnegative")
        if not np.all(s.spot.g_max >= 0):
            raise ScenarioValidationError("spot.g_max must be nonnegative")
    # a slot whose mandatory consumption already exceeds capacity can never
    # be balanced by any solver
    min_demand = np.sum([u.q_min for u in s.users], axis=0)
    if np.any(min_demand > s.provider.capacity + (0 if s.spot is None else s.spot.g_max) + 1e-9):
        raise ScenarioValidationError("minimum demand exceeds provider capacity")


def load_scenario(path) -> Scenario:
    """Read, parse and validate a scenario JSON file."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioParseError(f"scenario file {path} must contain a JSON object")
    return scenario_from_dict(data)


def save_scenario(s: Scenario, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Objective and constraint evaluation
# ---------------------------------------------------------------------------

def welfare(s: Scenario, x: Allocation) -> float:
    """Total utility minus production cost (minus internalized spot outlay).

    Production cost is evaluated at the allocation's supply; spot outlay uses
    the integrated form pi0*g + (kappa/2)*g^2.
    """
    if x.q.shape != (s.n_users, s.T):
        raise ValueError(f"allocation shape {x.q.shape} does not match scenario ({s.n_users}, {s.T})")
    total = 0.0
    for i, u in enumerate(s.users):
        total += float(u.utility.value(x.q[i]).sum())
    total -= float(s.provider.cost(x.supply).sum())
    if s.spot is not None and np.any(x.spot_g != 0.0):
        total -= float(s.spot.outlay(x.spot_g).sum())
    return total


@dataclass
class ResidualReport:
    """Per-constraint violation magnitudes; all <= tol means feasible."""

    box: float
    deferrable_bounds: float
    deferrable_energy: float
    battery_rates: float
    battery_levels: float
    battery_terminal: float
    capacity: float
    balance: float
    spot_bounds: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    @property
    def max_violation(self) -> float:
        return max(self.as_dict().values())

    def feasible(self, tol: float = 1e-9) -> bool:
        return self.max_violation <= tol


def feasibility_residuals(s: Scenario, x: Allocation) -> ResidualReport:
    dt = s.dt
    box = 0.0
    def_bounds = 0.0
    def_energy = 0.0
    rates = 0.0
    levels = 0.0
    for i, u in enumerate(s.users):
        box = max(box, float(np.max(u.q_min - x.q[i], initial=0.0)))
        box = max(box, float(np.max(x.q[i] - u.q_max, initial=0.0)))
        for k, dl in enumerate(u.deferrables):
            ek = x.e[i][k]
            inside = np.zeros(s.T, dtype=bool)
            inside[dl.window_start : dl.window_end + 1] = True
            def_bounds = max(def_bounds, float(np.max(np.abs(ek[~inside]), initial=0.0)))
            def_bounds = max(def_bounds, float(np.max(-ek[inside], initial=0.0)))
            def_bounds = max(def_bounds, float(np.max(ek[inside] - dl.per_slot_max, initial=0.0)))
            def_energy = max(def_energy, abs(float(ek[inside].sum()) * dt - dl.energy_required))
        if u.battery is None:
            rates = max(rates, float(np.max(np.abs(x.r[i]), initial=0.0)))
            rates = max(rates, float(np.max(np.abs(x.d[i]), initial=0.0)))
        else:
            b = u.battery
            rates = max(rates, float(np.max(-x.r[i], initial=0.0)))
            rates = max(rates, float(np.max(x.r[i] - b.charge_rate_max, initial=0.0)))
            rates = max(rates, float(np.max(-x.d[i], initial=0.0)))
            rates = max(rates, float(np.max(x.d[i] - b.discharge_rate_max, initial=0.0)))
            lv = b.levels(x.r[i], x.d[i], dt)
            levels = max(levels, float(np.max(-lv, initial=0.0)))
            levels = max(levels, float(np.max(lv - b.capacity, initial=0.0)))
            levels = max(levels, max(0.0, b.initial_level - float(lv[-1])))
    demand = x.aggregate_demand
    capacity = float(np.max(x.supply - s.provider.capacity, initial=0.0))
    capacity = max(capacity, float(np.max(-x.supply, initial=0.0)))
    balance = float(np.max(demand - x.supply - x.spot_g, initial=0.0))
    spot_bounds = 0.0
    if s.spot is not None:
        spot_bounds = max(
            float(np.max(-x.spot_g, initial=0.0)),
            float(np.max(x.spot_g - s.spot.g_max, initial=0.0)),
        )
    else:
        spot_bounds = float(np.max(np.abs(x.spot_g), initial=0.0))
    return ResidualReport(
        box=box,
        deferrable_bounds=def_bounds,
        deferrable_energy=def_energy,
        battery_rates=rates,
        battery_levels=levels,
        capacity=capacity,
        balance=balance,
        spot_bounds=spot_bounds,
    )


def export_allocation_csv(s: Scenario, x: Allocation, path) -> None:
    """Write the allocation as CSV: header ``user,slot,q,r,d`` with one row
    per user and slot (q = elective plus deferrable consumption), plus a
    ``provider`` pseudo-row per slot carrying supply in the q column and spot
    purchases in the r column."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    total = x.total_consumption
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "slot", "q", "r", "d"])
        for i, u in enumerate(s.users):
            for t in range(s.T):
                w.writerow([u.id, t, repr(float(total[i, t])), repr(float(x.r[i, t])), repr(float(x.d[i, t]))])
        for t in range(s.T):
            w.writerow(["provider", t, repr(float(x.supply[t])), repr(float(x.spot_g[t])), repr(0.0)])
