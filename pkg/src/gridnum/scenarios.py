"""Scenario builders: bundled fixtures, random instances for studies and
tests, and the three CLI generator templates (uniform, peak, myopia-trap).

Everything is deterministic per seed.
"""

from __future__ import annotations

import numpy as np

from .model import Scenario, scenario_from_dict

__all__ = [
    "t1_scenario",
    "generate_scenario",
    "random_small_scenario",
    "random_market_fixture",
    "battery_control_fixture",
    "spot_fixture",
    "newton_benchmark_set",
]


def t1_scenario() -> Scenario:
    """One slot, one quadratic user, unit-slope marginal cost.

    First-order condition by hand: 4 - q = q, so q* = 2, p* = 2 and the
    welfare is 4.  Used as the sanity anchor across all solvers.
    """
    return scenario_from_dict(
        {
            "horizon": {"T": 1, "slot_duration": 1.0},
            "users": [
                {
                    "id": "u1",
                    "utility": {"kind": "quadratic", "a": 1.0, "b": 4.0},
                    "q_min": 0.0,
                    "q_max": 10.0,
                }
            ],
            "provider": {"c1": 0.0, "c2": 1.0, "capacity": 10.0},
            "seed": 0,
        }
    )


def _uniform_users(rng, T: int, n_users: int, peak_block=None) -> list[dict]:
    users = []
    for i in range(n_users):
        a = rng.uniform(0.6, 1.6)
        b = rng.uniform(2.0, 5.0, size=T) * rng.uniform(0.85, 1.15)
        if peak_block is not None:
            lo, hi = peak_block
            b[lo:hi] *= 2.5
        users.append(
            {
                "id": f"u{i}",
                "utility": {"kind": "quadratic", "a": a, "b": b.tolist()},
                "q_min": 0.0,
                "q_max": float(rng.uniform(3.0, 8.0)),
            }
        )
    return users


def generate_scenario(template: str, T: int, n_users: int, seed: int) -> Scenario:
    """The CLI generator.  ``uniform`` draws unstructured quadratic users;
    ``peak`` concentrates valuations in a short contiguous block so a small
    window dominates; ``myopia-trap`` plants a deferrable whose greedy-eager
    service is provably more expensive than deferring it."""
    if T < 1 or n_users < 1:
        raise ValueError("T and n_users must be at least 1")
    rng = np.random.default_rng(seed)
    if template == "uniform":
        users = _uniform_users(rng, T, n_users)
        qmax_sum = sum(u["q_max"] for u in users)
        data = {
            "horizon": {"T": T, "slot_duration": 1.0},
            "users": users,
            "provider": {
                "c1": rng.uniform(0.1, 0.6, size=T).tolist(),
                "c2": float(rng.uniform(0.3, 0.8)),
                "capacity": 1.5 * qmax_sum + 1.0,
            },
            "seed": seed,
        }
    elif template == "peak":
        width = max(1, T // 6)
        start = int(rng.integers(0, max(1, T - width + 1)))
        users = _uniform_users(rng, T, n_users, peak_block=(start, start + width))
        qmax_sum = sum(u["q_max"] for u in users)
        data = {
            "horizon": {"T": T, "slot_duration": 1.0},
            "users": users,
            "provider": {
                "c1": rng.uniform(0.1, 0.6, size=T).tolist(),
                "c2": float(rng.uniform(0.3, 0.8)),
                "capacity": 1.5 * qmax_sum + 1.0,
            },
            "seed": seed,
        }
    elif template == "myopia-trap":
        if T < 2:
            raise ValueError("myopia-trap needs T >= 2")
        energy = float(T // 2)  # half the window's service capacity
        b0 = float(rng.uniform(5.5, 6.5))
        theta0 = b0 - energy / T  # greedy's proxy value at slot 0
        early = theta0 - 0.2 - rng.uniform(0.0, 0.1, size=T)
        late = rng.uniform(0.1, 0.3, size=T)
        c1 = np.where(np.arange(T) < T // 2, early, late)
        users = [
            {
                "id": "carrier",
                "utility": {"kind": "quadratic", "a": 1.0, "b": b0},
                "q_min": 0.0,
                "q_max": 0.0,
                "deferrables": [
                    {
                        "window_start": 0,
                        "window_end": T - 1,
                        "energy_required": energy,
                        "per_slot_max": 1.0,
                    }
                ],
            }
        ]
        for i in range(1, n_users):
            users.append(
                {
                    "id": f"u{i}",
                    "utility": {"kind": "quadratic", "a": 1.0, "b": float(rng.uniform(0.8, 1.5))},
                    "q_min": 0.0,
                    "q_max": float(rng.uniform(1.0, 2.0)),
                }
            )
        qmax_sum = sum(u["q_max"] for u in users)
        data = {
            "horizon": {"T": T, "slot_duration": 1.0},
            "users": users,
            "provider": {
                "c1": c1.tolist(),
                "c2": 0.05,
                "capacity": qmax_sum + 2.0 + 1.0,
            },
            "seed": seed,
        }
    else:
        raise ValueError(f"unknown template {template!r}")
    return scenario_from_dict(data)


def random_small_scenario(seed: int) -> Scenario:
    """Tiny instance with at most three free decision axes, sized for the
    dense lattice oracle at grid_n = 401."""
    rng = np.random.default_rng(seed)
    kind = int(rng.integers(0, 6))
    layouts = {
        0: (1, 1, False, "quadratic"),
        1: (1, 2, False, "quadratic"),
        2: (2, 1, False, "quadratic"),
        3: (1, 3, False, "quadratic"),
        4: (1, 2, True, "quadratic"),
        5: (1, 2, False, "logarithmic"),
    }
    n_users, T, with_def, ukind = layouts[kind]
    users = []
    for i in range(n_users):
        users.append(
            {
                "id": f"u{i}",
                "utility": {
                    "kind": ukind,
                    "a": float(rng.uniform(0.5, 2.0)),
                    "b": rng.uniform(1.0, 5.0, size=T).tolist(),
                },
                "q_min": 0.0,
                "q_max": float(rng.uniform(2.0, 6.0)),
            }
        )
    emax_total = 0.0
    if with_def:
        emax = float(rng.uniform(0.8, 1.5))
        energy = float(rng.uniform(0.4, 0.9) * 2 * emax)
        users[0]["deferrables"] = [
            {"window_start": 0, "window_end": 1, "energy_required": energy, "per_slot_max": emax}
        ]
        emax_total = emax
    qmax_sum = sum(u["q_max"] for u in users)
    return scenario_from_dict(
        {
            "horizon": {"T": T, "slot_duration": 1.0},
            "users": users,
            "provider": {
                "c1": rng.uniform(0.0, 0.5, size=T).tolist(),
                "c2": float(rng.uniform(0.3, 1.0)),
                "capacity": qmax_sum + emax_total + 1.0,
            },
            "seed": seed,
        }
    )


def random_market_fixture(
    seed: int,
    n_users: int,
    T: int,
    n_deferrable: int = 0,
    n_battery: int = 0,
    efficiency: float = 1.0,
) -> Scenario:
    """Box-constrained quadratic market with optional intertemporal users;
    capacity is sized to stay slack so the dual and centralized optima agree
    on a smooth interior."""
    rng = np.random.default_rng(seed)
    users = []
    emax_sum = 0.0
    rmax_sum = 0.0
    for i in range(n_users):
        u = {
            "id": f"u{i}",
            "utility": {
                "kind": "quadratic",
                "a": float(rng.uniform(0.5, 1.5)),
                "b": (rng.uniform(1.5, 4.5, size=T) + rng.uniform(0.0, 1.0) * np.sin(np.linspace(0, np.pi, T))).tolist(),
            },
            "q_min": 0.0,
            "q_max": float(rng.uniform(2.0, 5.0)),
        }
        if i < n_deferrable and T >= 2:
            w = int(rng.integers(2, min(T, 5) + 1))
            start = int(rng.integers(0, T - w + 1))
            emax = float(rng.uniform(0.5, 1.5))
            u["deferrables"] = [
                {
                    "window_start": start,
                    "window_end": start + w - 1,
                    "energy_required": float(rng.uniform(0.3, 0.8) * w * emax),
                    "per_slot_max": emax,
                }
            ]
            emax_sum += emax
        if i < n_battery:
            cap = float(rng.uniform(2.0, 5.0))
            rate = float(rng.uniform(0.5, 1.5))
            u["battery"] = {
                "capacity": cap,
                "charge_rate_max": rate,
                "discharge_rate_max": rate,
                "efficiency": efficiency,
                "initial_level": float(rng.uniform(0.0, cap / 2)),
            }
            rmax_sum += rate
        users.append(u)
    qmax_sum = sum(u["q_max"] for u in users)
    return scenario_from_dict(
        {
            "horizon": {"T": T, "slot_duration": 1.0},
            "users": users,
            "provider": {
                "c1": rng.uniform(0.05, 0.5, size=T).tolist(),
                "c2": float(rng.uniform(0.2, 0.6)),
                "capacity": 1.4 * (qmax_sum + emax_sum + rmax_sum) + 1.0,
            },
            "seed": seed,
        }
    )


def battery_control_fixture(seed: int, T: int = 4, efficiency: float = 1.0) -> Scenario:
    """Single user with storage facing a marginal-cost profile that rewards
    shifting consumption across slots."""
    rng = np.random.default_rng(seed)
    c1 = rng.uniform(0.5, 3.5, size=T)
    cap = float(rng.uniform(3.0, 6.0))
    return scenario_from_dict(
        {
            "horizon": {"T": T, "slot_duration": 1.0},
            "users": [
                {
                    "id": "u0",
                    "utility": {"kind": "quadratic", "a": 1.0, "b": rng.uniform(4.0, 6.0, size=T).tolist()},
                    "q_min": 0.0,
                    "q_max": 8.0,
                    "battery": {
                        "capacity": cap,
                        "charge_rate_max": float(rng.uniform(1.0, 2.0)),
                        "discharge_rate_max": float(rng.uniform(1.0, 2.0)),
                        "efficiency": efficiency,
                        "initial_level": cap / 2,
                    },
                }
            ],
            "provider": {"c1": c1.tolist(), "c2": 1.0, "capacity": 30.0},
            "seed": seed,
        }
    )


def spot_fixture(seed: int, T: int = 4, n_users: int = 2, kappa: float = 0.5, pi0=None, capacity=None) -> Scenario:
    """Box-only quadratic market with a spot block attached."""
    base = random_market_fixture(seed, n_users, T)
    data = {
        "horizon": {"T": T, "slot_duration": 1.0},
        "users": [
            {
                "id": u.id,
                "utility": {"kind": "quadratic", "a": [float(v) for v in u.utility.a], "b": [float(v) for v in u.utility.b]},
                "q_min": [float(v) for v in u.q_min],
                "q_max": [float(v) for v in u.q_max],
            }
            for u in base.users
        ],
        "provider": {
            "c1": [float(v) for v in base.provider.c1],
            "c2": [float(v) for v in base.provider.c2],
            "capacity": [float(v) for v in base.provider.capacity] if capacity is None else capacity,
        },
        "spot": {
            "pi0": (np.full(T, 1.0) if pi0 is None else np.broadcast_to(np.asarray(pi0, float), (T,))).tolist(),
            "kappa": kappa,
            "g_max": 10.0,
        },
        "seed": seed,
    }
    return scenario_from_dict(data)


def newton_benchmark_set() -> list[Scenario]:
    """Strictly convex quadratic fixtures used for speed comparisons between
    the Newton and subgradient price iterations."""
    return [
        random_market_fixture(101, n_users=5, T=24),
        random_market_fixture(102, n_users=8, T=24),
        random_market_fixture(103, n_users=4, T=12),
    ]
