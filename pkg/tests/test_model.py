import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridnum import (
    ScenarioParseError,
    ScenarioValidationError,
    UtilityParams,
    allocation_from_consumption,
    feasibility_residuals,
    load_scenario,
    make_allocation,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    welfare,
)
from gridnum.scenarios import generate_scenario, random_market_fixture

from conftest import feasible_random_allocation


MINIMAL = {
    "horizon": {"T": 2},
    "users": [
        {"id": "u1", "utility": {"kind": "quadratic", "a": 1.0, "b": 3.0}, "q_min": 0.0, "q_max": 4.0}
    ],
    "provider": {"c1": 0.1, "c2": 0.5, "capacity": 10.0},
}


def test_load_minimal_scenario(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(MINIMAL))
    s = load_scenario(path)
    assert s.T == 2
    assert s.n_users == 1
    assert s.users[0].utility.a.shape == (2,)


def test_parse_error_on_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ScenarioParseError):
        load_scenario(path)


def test_parse_error_on_missing_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"horizon": {"T": 1}}))
    with pytest.raises(ScenarioParseError):
        load_scenario(path)


def test_deferrable_window_exceeds_horizon():
    data = json.loads(json.dumps(MINIMAL))
    data["users"][0]["deferrables"] = [
        {"window_start": 0, "window_end": 2, "energy_required": 1.0, "per_slot_max": 1.0}
    ]
    with pytest.raises(ScenarioValidationError, match="deferrable window exceeds horizon"):
        scenario_from_dict(data)


def test_infeasible_deferrable_load():
    data = json.loads(json.dumps(MINIMAL))
    data["users"][0]["deferrables"] = [
        {"window_start": 0, "window_end": 1, "energy_required": 5.0, "per_slot_max": 1.0}
    ]
    with pytest.raises(ScenarioValidationError, match="infeasible deferrable load"):
        scenario_from_dict(data)


def test_q_min_above_q_max_rejected():
    data = json.loads(json.dumps(MINIMAL))
    data["users"][0]["q_min"] = 5.0
    with pytest.raises(ScenarioValidationError, match="q_min exceeds q_max"):
        scenario_from_dict(data)


@pytest.mark.parametrize("template,T,n", [("uniform", 4, 2), ("peak", 24, 5), ("myopia-trap", 6, 1)])
def test_save_load_round_trip(tmp_path, template, T, n):
    s = generate_scenario(template, T, n, seed=5)
    path = tmp_path / "round.json"
    save_scenario(s, path)
    s2 = load_scenario(path)
    assert scenario_to_dict(s2) == scenario_to_dict(s)


def test_welfare_two_user_example(two_user_welfare_scenario):
    s = two_user_welfare_scenario
    x = allocation_from_consumption(s, np.array([[1.0], [1.0]]))
    assert welfare(s, x) == pytest.approx(1.0, abs=1e-12)


def test_welfare_zero_allocation(two_user_welfare_scenario):
    s = two_user_welfare_scenario
    x = allocation_from_consumption(s, np.zeros((2, 1)))
    assert welfare(s, x) == 0.0


def test_welfare_matches_independent_evaluator():
    # second evaluator coded directly from the definition, sharing no code
    s = random_market_fixture(42, n_users=3, T=5, n_deferrable=1, n_battery=1)
    rng = np.random.default_rng(0)
    x = feasible_random_allocation(s, rng)
    expected = 0.0
    for i, u in enumerate(s.users):
        for t in range(s.T):
            q = x.q[i, t]
            expected += u.utility.b[t] * q - q * q / (2 * u.utility.a[t])
    for t in range(s.T):
        Q = x.supply[t]
        expected += -(s.provider.c1[t] * Q + 0.5 * s.provider.c2[t] * Q * Q)
    assert welfare(s, x) == pytest.approx(expected, abs=1e-12)


def test_welfare_shape_mismatch(two_user_welfare_scenario):
    s = two_user_welfare_scenario
    x = allocation_from_consumption(s, np.array([[1.0], [1.0]]))
    bigger = scenario_from_dict(
        {**MINIMAL, "users": MINIMAL["users"] * 1}
    )
    with pytest.raises(ValueError, match="does not match"):
        welfare(bigger, x)


def test_residuals_zero_on_feasible():
    s = random_market_fixture(7, n_users=2, T=4, n_deferrable=1, n_battery=1)
    x = feasible_random_allocation(s, np.random.default_rng(1))
    rep = feasibility_residuals(s, x)
    assert rep.feasible(1e-9), rep.as_dict()


def test_residual_box_violation(two_user_welfare_scenario):
    s = two_user_welfare_scenario
    x = allocation_from_consumption(s, np.array([[5.5], [0.0]]))
    rep = feasibility_residuals(s, x)
    assert rep.box == pytest.approx(0.5, abs=1e-12)


def test_residual_battery_drain():
    s = scenario_from_dict(
        {
            "horizon": {"T": 2},
            "users": [
                {
                    "id": "u",
                    "utility": {"kind": "quadratic", "a": 1.0, "b": 1.0},
                    "q_min": 0.0,
                    "q_max": 2.0,
                    "battery": {
                        "capacity": 1.0,
                        "charge_rate_max": 1.0,
                        "discharge_rate_max": 1.0,
                        "efficiency": 1.0,
                        "initial_level": 0.4,
                    },
                }
            ],
            "provider": {"c1": 0.0, "c2": 1.0, "capacity": 10.0},
        }
    )
    d = np.array([[1.0, 0.0]])  # discharges 1.0 from a 0.4 level
    x = make_allocation(s, np.zeros((1, 2)), [[]], np.zeros((1, 2)), d)
    rep = feasibility_residuals(s, x)
    assert rep.battery_levels == pytest.approx(0.6, abs=1e-12)


# -- properties -------------------------------------------------------------

utility_params = st.tuples(
    st.sampled_from(["quadratic", "logarithmic"]),
    st.floats(0.1, 10.0),
    st.floats(0.0, 10.0),
)


@given(utility_params, st.floats(0.0, 50.0), st.floats(0.0, 50.0))
@settings(max_examples=150, deadline=None)
def test_utility_midpoint_concavity(params, x, y):
    kind, a, b = params
    u = UtilityParams(kind, np.array([a]), np.array([b]))
    mid = u.value(np.array([(x + y) / 2]))[0]
    avg = 0.5 * (u.value(np.array([x]))[0] + u.value(np.array([y]))[0])
    assert mid >= avg - 1e-10


@given(utility_params)
@settings(max_examples=100, deadline=None)
def test_marginal_utility_nonincreasing(params):
    kind, a, b = params
    u = UtilityParams(kind, np.array([a]), np.array([b]))
    grid = np.linspace(0.0, 20.0, 41)
    fd = np.diff(u.value(grid[:, None]).ravel())
    assert np.all(np.diff(fd) <= 1e-10)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_welfare_midpoint_concavity(seed):
    s = random_market_fixture(11, n_users=2, T=3)
    rng = np.random.default_rng(seed)
    x = feasible_random_allocation(s, rng)
    y = feasible_random_allocation(s, rng)
    mid = make_allocation(
        s,
        (x.q + y.q) / 2,
        [[(x.e[i][k] + y.e[i][k]) / 2 for k in range(len(x.e[i]))] for i in range(s.n_users)],
        (x.r + y.r) / 2,
        (x.d + y.d) / 2,
    )
    assert welfare(s, mid) >= 0.5 * (welfare(s, x) + welfare(s, y)) - 1e-10


def test_allocation_csv_export(tmp_path, two_user_welfare_scenario):
    from gridnum import export_allocation_csv

    s = two_user_welfare_scenario
    x = allocation_from_consumption(s, np.array([[1.0], [1.0]]))
    path = tmp_path / "alloc.csv"
    export_allocation_csv(s, x, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "user,slot,q,r,d"
    assert len(lines) == 1 + 2 + 1  # header, two users, provider pseudo-row
    assert lines[-1].startswith("provider,0,2.0")
