import numpy as np
import pytest

from gridnum import scenario_from_dict, t1_scenario


@pytest.fixture
def t1():
    return t1_scenario()


@pytest.fixture
def two_user_welfare_scenario():
    # u(q) = 2q - q^2/2 per user, c(Q) = Q^2/2
    return scenario_from_dict(
        {
            "horizon": {"T": 1},
            "users": [
                {"id": "a", "utility": {"kind": "quadratic", "a": 1.0, "b": 2.0}, "q_min": 0.0, "q_max": 5.0},
                {"id": "b", "utility": {"kind": "quadratic", "a": 1.0, "b": 2.0}, "q_min": 0.0, "q_max": 5.0},
            ],
            "provider": {"c1": 0.0, "c2": 1.0, "capacity": 10.0},
        }
    )


def make_battery_scenario(
    T=2,
    c1=(1.0, 3.0),
    capacity=10.0,
    rate=10.0,
    efficiency=1.0,
    initial=5.0,
    b=5.0,
):
    return scenario_from_dict(
        {
            "horizon": {"T": T},
            "users": [
                {
                    "id": "u",
                    "utility": {"kind": "quadratic", "a": 1.0, "b": b},
                    "q_min": 0.0,
                    "q_max": 10.0,
                    "battery": {
                        "capacity": capacity,
                        "charge_rate_max": rate,
                        "discharge_rate_max": rate,
                        "efficiency": efficiency,
                        "initial_level": initial,
                    },
                }
            ],
            "provider": {"c1": list(c1), "c2": 1.0, "capacity": 50.0},
        }
    )


def feasible_random_allocation(s, rng):
    """Random point satisfying every per-user constraint, supply = demand."""
    from gridnum import make_allocation

    n, T = s.n_users, s.T
    q = np.zeros((n, T))
    r = np.zeros((n, T))
    d = np.zeros((n, T))
    e = []
    for i, u in enumerate(s.users):
        q[i] = u.q_min + rng.random(T) * (u.q_max - u.q_min)
        row = []
        for dl in u.deferrables:
            ek = np.zeros(T)
            w = dl.width
            ek[dl.window_start : dl.window_end + 1] = dl.energy_required / (w * s.dt)
            row.append(ek)
        e.append(row)
        if u.battery is not None and u.battery.capacity > 0:
            hr = min(u.battery.charge_rate_max, (u.battery.capacity - u.battery.initial_level) / (T * s.dt))
            r[i] = rng.random(T) * hr * u.battery.efficiency
    return make_allocation(s, q, e, r, d)
