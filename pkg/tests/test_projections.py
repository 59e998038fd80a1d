import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from gridnum import Battery, capped_simplex_project, project_allocation, project_battery
from gridnum.projections import battery_halfspaces, project_polyhedron
from gridnum.scenarios import random_market_fixture
from gridnum.solver_core import VariableLayout

from conftest import feasible_random_allocation


def test_capped_simplex_spec_example():
    out = capped_simplex_project(np.array([3.0, 0.0]), 1.5, 2.0)
    assert out == pytest.approx([1.5, 0.5], abs=1e-12)


def test_capped_simplex_feasible_unchanged():
    y = np.array([0.4, 0.6, 1.0])
    out = capped_simplex_project(y, 1.5, 2.0)
    assert np.array_equal(out, y)


def test_capped_simplex_empty_raises():
    with pytest.raises(ValueError):
        capped_simplex_project(np.array([0.0, 0.0]), 1.0, 5.0)


@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=6),
    st.floats(0.3, 3.0),
    st.floats(0.0, 1.0),
)
@settings(max_examples=120, deadline=None)
def test_capped_simplex_against_qp(y, ub, frac):
    y = np.asarray(y)
    total = frac * ub * len(y)
    x = capped_simplex_project(y, ub, total)
    assert np.all(x >= -1e-10) and np.all(x <= ub + 1e-10)
    assert x.sum() == pytest.approx(total, abs=1e-8)
    # optimality: no feasible transfer between coordinates improves distance
    n = len(y)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            eps = min(1e-4, x[i], ub - x[j])
            if eps <= 0:
                continue
            trial = x.copy()
            trial[i] -= eps
            trial[j] += eps
            assert np.sum((trial - y) ** 2) >= np.sum((x - y) ** 2) - 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_battery_projection_matches_nlp(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 5))
    b = Battery(
        capacity=float(rng.uniform(0.5, 3.0)),
        charge_rate_max=float(rng.uniform(0.3, 2.0)),
        discharge_rate_max=float(rng.uniform(0.3, 2.0)),
        efficiency=float(rng.uniform(0.7, 1.0)),
        initial_level=float(rng.uniform(0.0, 0.5)),
    )
    b = Battery(b.capacity, b.charge_rate_max, b.discharge_rate_max, b.efficiency, min(b.initial_level, b.capacity))
    y_r = rng.uniform(-2, 3, T)
    y_d = rng.uniform(-2, 3, T)
    r, d = project_battery(b, y_r, y_d, 1.0)
    G, h = battery_halfspaces(b, T, 1.0)
    z = np.concatenate([r, d])
    assert np.all(G @ z <= h + 1e-8)
    y = np.concatenate([y_r, y_d])
    res = minimize(
        lambda v: np.sum((v - y) ** 2),
        x0=np.zeros(2 * T),
        jac=lambda v: 2 * (v - y),
        constraints=[{"type": "ineq", "fun": lambda v: h - G @ v, "jac": lambda v: -G}],
        method="SLSQP",
        options={"maxiter": 200, "ftol": 1e-12},
    )
    assert np.sum((z - y) ** 2) <= np.sum((res.x - y) ** 2) + 1e-6


def test_battery_projection_idempotent():
    b = Battery(capacity=2.0, charge_rate_max=1.0, discharge_rate_max=1.0, efficiency=0.9, initial_level=1.0)
    r, d = project_battery(b, np.array([3.0, -1.0, 0.5]), np.array([0.2, 4.0, -0.3]), 1.0)
    r2, d2 = project_battery(b, r, d, 1.0)
    assert np.array_equal(r, r2) and np.array_equal(d, d2)


def test_project_polyhedron_box():
    G = np.vstack([np.eye(2), -np.eye(2)])
    h = np.array([1.0, 1.0, 0.0, 0.0])
    x = project_polyhedron(np.array([2.0, -0.5]), G, h)
    assert x == pytest.approx([1.0, 0.0], abs=1e-10)


def test_project_allocation_idempotent_and_box():
    s = random_market_fixture(13, n_users=2, T=4, n_deferrable=1, n_battery=1)
    rng = np.random.default_rng(5)
    raw = feasible_random_allocation(s, rng)
    # blow it out of shape
    from gridnum import make_allocation

    dirty = make_allocation(
        s,
        raw.q + rng.normal(0, 3, raw.q.shape),
        [[ek + rng.normal(0, 2, ek.shape) for ek in row] for row in raw.e],
        raw.r + rng.normal(0, 2, raw.r.shape),
        raw.d + rng.normal(0, 2, raw.d.shape),
    )
    proj = project_allocation(s, dirty)
    from gridnum import feasibility_residuals

    assert feasibility_residuals(s, proj).max_violation <= 1e-8
    again = project_allocation(s, proj)
    assert np.max(np.abs(again.q - proj.q)) == 0.0
    assert np.max(np.abs(again.r - proj.r)) == 0.0
    assert np.max(np.abs(again.d - proj.d)) == 0.0


def test_project_allocation_feasible_unchanged():
    s = random_market_fixture(17, n_users=2, T=3, n_deferrable=1)
    x = feasible_random_allocation(s, np.random.default_rng(2))
    proj = project_allocation(s, x)
    assert np.allclose(proj.q, x.q, atol=0)
    for i in range(s.n_users):
        for k in range(len(x.e[i])):
            assert np.array_equal(proj.e[i][k], x.e[i][k])


def test_projection_clamps_only_violating_coordinate():
    s = random_market_fixture(19, n_users=1, T=3)
    from gridnum import allocation_from_consumption

    u = s.users[0]
    q = np.array([(u.q_min + u.q_max) / 2.0])
    q[0, 1] = u.q_max[1] + 2.0
    x = allocation_from_consumption(s, q)
    proj = project_allocation(s, x)
    assert proj.q[0, 1] == pytest.approx(u.q_max[1])
    assert proj.q[0, 0] == pytest.approx(q[0, 0])
    assert proj.q[0, 2] == pytest.approx(q[0, 2])
