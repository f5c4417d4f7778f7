from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringlock.resonator import analytic_alignment, combined_transmission, default_device
from ringlock.simplex import SimplexConfig, fit_curve, minimize

TIGHT = SimplexConfig(f_tol=0.0, x_tol=1e-9)


def rosenbrock(p):
    return (1 - p[0]) ** 2 + 100 * (p[1] - p[0] ** 2) ** 2


def test_quadratic_bowl():
    res = minimize(lambda p: (p[0] - 1) ** 2 + (p[1] + 2) ** 2, [0.0, 0.0], TIGHT)
    assert res.converged
    np.testing.assert_allclose(res.x_best, [1.0, -2.0], atol=1e-6)


def test_rosenbrock_within_default_budget():
    cfg = SimplexConfig(f_tol=0.0, x_tol=1e-6)
    assert cfg.max_evals == 500
    res = minimize(rosenbrock, [-1.2, 1.0], cfg)
    assert res.converged and res.n_evals <= 500
    np.testing.assert_allclose(res.x_best, [1.0, 1.0], atol=1e-4)


def test_locks_default_device_to_analytic_solution():
    dev = default_device()
    res = minimize(lambda v: 30.0 * combined_transmission(dev, v), [3.6, 3.56], TIGHT)
    np.testing.assert_allclose(res.x_best, analytic_alignment(dev), atol=1e-3)


def test_classical_coefficients_by_default():
    cfg = SimplexConfig()
    assert (cfg.reflect, cfg.expand, cfg.contract, cfg.shrink) == (1.0, 2.0, 0.5, 0.5)
    assert (cfg.f_tol, cfg.x_tol, cfg.initial_scale) == (1e-6, 1e-4, 0.2)


@pytest.mark.parametrize(
    "kw",
    [dict(reflect=0.0), dict(expand=1.0), dict(contract=1.0), dict(shrink=0.0), dict(max_evals=1)],
)
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        SimplexConfig(**kw)


def test_budget_must_cover_initial_simplex():
    with pytest.raises(ValueError):
        minimize(lambda p: float(p @ p), np.zeros(4), SimplexConfig(max_evals=4))


def test_non_finite_start_reported():
    res = minimize(lambda p: float("nan"), [0.0, 0.0])
    assert not res.converged
    assert "not finite" in res.message
    with pytest.raises(ValueError):
        minimize(lambda p: 0.0, [np.inf, 0.0])


def test_budget_respected_and_flagged():
    cfg = SimplexConfig(f_tol=0.0, x_tol=0.0, max_evals=40)
    res = minimize(rosenbrock, [-1.2, 1.0], cfg)
    assert res.n_evals <= 40
    assert not res.converged


def test_bounds_keep_answer_in_box():
    cfg = SimplexConfig(lower=(0.0, 0.0), upper=(5.0, 5.0), f_tol=0.0, x_tol=1e-8)
    res = minimize(lambda p: (p[0] + 1) ** 2 + (p[1] - 2) ** 2, [1.0, 1.0], cfg)
    np.testing.assert_allclose(res.x_best, [0.0, 2.0], atol=1e-6)


@st.composite
def convex_quadratics(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    a = q @ np.diag(rng.uniform(0.2, 5.0, n)) @ q.T
    c = rng.uniform(-3, 3, n)
    x0 = rng.uniform(-5, 5, n)
    return a, c, x0


@settings(max_examples=80, deadline=None)
@given(convex_quadratics())
def test_convex_quadratics_reach_minimum(problem):
    a, c, x0 = problem
    res = minimize(lambda x: float((x - c) @ a @ (x - c)), x0,
                   SimplexConfig(f_tol=0.0, x_tol=1e-9, initial_scale=1.0))
    assert res.n_evals <= 500
    assert res.f_best < 1e-8


@settings(max_examples=40, deadline=None)
@given(convex_quadratics())
def test_best_value_never_increases(problem):
    a, c, x0 = problem
    res = minimize(lambda x: float((x - c) @ a @ (x - c)), x0,
                   SimplexConfig(record_trace=True, initial_scale=1.0))
    values = [f for _, f in res.trace]
    assert all(b <= a_ for a_, b in zip(values, values[1:]))


@settings(max_examples=40, deadline=None)
@given(convex_quadratics(), st.floats(-100.0, 100.0))
def test_offset_invariance(problem, offset):
    a, c, x0 = problem
    cfg = SimplexConfig(f_tol=0.0, x_tol=1e-9, initial_scale=1.0)
    f = lambda x: float((x - c) @ a @ (x - c))
    r1 = minimize(f, x0, cfg)
    r2 = minimize(lambda x: f(x) + offset, x0, cfg)
    np.testing.assert_allclose(r1.x_best, r2.x_best, atol=1e-6)


def test_fit_line_recovers_coefficients():
    xs = np.linspace(30.0, 31.0, 5)
    ys = -0.06090 * xs + 5.568
    res = fit_curve(lambda x, a, b: a * x + b, (-0.05, 5.0), xs, ys)
    np.testing.assert_allclose(res.x_best, [-0.06090, 5.568], atol=1e-8)


def test_fit_quadratic_recovers_coefficients():
    xs = np.linspace(0.0, 6.5, 14)
    ys = -0.0007192 * xs**2 - 0.0003439 * xs + 3.746
    res = fit_curve(lambda x, a, b, c: (a * x + b) * x + c, (0.0, -0.005, 3.7), xs, ys)
    np.testing.assert_allclose(res.x_best, [-0.0007192, -0.0003439, 3.746], atol=1e-6)


def test_fit_constant_data_exactly():
    xs = np.arange(6.0)
    ys = np.full(6, 2.5)
    res = fit_curve(lambda x, c: np.full_like(x, c), (2.5,), xs, ys)
    assert res.f_best == 0.0
    assert res.x_best[0] == 2.5
    far = fit_curve(lambda x, c: np.full_like(x, c), (0.0,), xs, ys)
    assert far.x_best[0] == pytest.approx(2.5, abs=1e-9)


def test_fit_needs_enough_points():
    with pytest.raises(ValueError):
        fit_curve(lambda x, a, b, c: a + b * x + c * x * x, (0, 0, 0), [0.0, 1.0], [1.0, 2.0])
