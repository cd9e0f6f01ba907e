import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from potm.lme import (DegenerateSupportError, LmeConvergenceError, LmeParams, compute_beta,
                      evaluate, solve_lambda)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
CUBE = np.array([[i, j, k] for i in (0.0, 1.0) for j in (0.0, 1.0) for k in (0.0, 1.0)])


def primal_oracle(xp, X, beta):
    """Entropy + locality minimisation solved directly in the primal variables."""
    r = xp - X
    d2 = (r ** 2).sum(axis=1)

    def obj(N):
        Nc = np.clip(N, 1e-300, None)
        return beta * (Nc * d2).sum() + (Nc * np.log(Nc)).sum()

    cons = [{"type": "eq", "fun": lambda N: N.sum() - 1.0},
            {"type": "eq", "fun": lambda N: N @ r}]
    x0 = np.full(len(X), 1.0 / len(X))
    res = minimize(obj, x0, constraints=cons, bounds=[(0.0, 1.0)] * len(X),
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


def test_beta():
    assert compute_beta(1.8, 2.0) == pytest.approx(0.45)
    with pytest.raises(ValueError):
        compute_beta(1.0, 0.0)


def test_unit_square_matches_primal_oracle():
    xp = np.array([0.3, 0.2])
    beta = 1.6
    lam, N = solve_lambda(xp, SQUARE, beta)
    np.testing.assert_allclose(N, primal_oracle(xp, SQUARE, beta), atol=1e-6)


def test_square_reduces_to_bilinear():
    # product structure of a tensor grid support
    x, y = 0.3, 0.2
    _, N = solve_lambda([x, y], SQUARE, 1.6)
    bil = [(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y]
    np.testing.assert_allclose(N, bil, atol=1e-12)


def test_cube_centre_is_symmetric():
    res = evaluate([0.5, 0.5, 0.5], CUBE, LmeParams(gamma=1.8, h=1.0))
    np.testing.assert_allclose(res.N, 1 / 8, atol=1e-14)
    np.testing.assert_allclose(res.lam, 0.0, atol=1e-14)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(12, 3))
    xp = np.array([0.05, -0.1, 0.1])
    params = LmeParams(gamma=1.2, h=0.8)
    B = evaluate(xp, X, params).B
    for d in range(3):
        e = np.zeros(3)
        e[d] = 1e-6
        Np = evaluate(xp + e, X, params).N
        Nm = evaluate(xp - e, X, params).N
        np.testing.assert_allclose(B[:, d], (Np - Nm) / 2e-6, rtol=1e-6, atol=1e-9)


def test_outside_hull_fails():
    with pytest.raises(LmeConvergenceError):
        solve_lambda([2.0, 0.5], SQUARE, 1.0)


def test_collinear_support_is_degenerate():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises((DegenerateSupportError, LmeConvergenceError)):
        evaluate([1.0, 0.0], X, LmeParams())


def test_one_dimensional_support():
    X = np.array([[0.0], [1.0], [2.0]])
    res = evaluate([0.7], X, LmeParams(gamma=2.0, h=1.0))
    assert abs(res.N.sum() - 1) < 1e-14
    assert abs(res.N @ X[:, 0] - 0.7) < 1e-12


@st.composite
def configs(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n = draw(st.integers(6, 25))
    X = rng.uniform(-1, 1, size=(n, 3))
    w = rng.dirichlet(np.ones(n))
    return w @ X, X, draw(st.floats(0.8, 4.0))


@settings(max_examples=60, deadline=None)
@given(configs())
def test_consistency_properties(cfg):
    xp, X, gamma = cfg
    res = evaluate(xp, X, LmeParams(gamma=gamma, h=0.5))
    assert abs(res.N.sum() - 1) < 1e-12
    assert np.linalg.norm(res.N @ X - xp) < 1e-10 * 0.5
    assert np.all(res.N >= 0)
    np.testing.assert_allclose(res.B.sum(axis=0), 0.0, atol=1e-9 / 0.5)
    # linear reproduction of gradients: sum_I x_I (x) B_I = I
    np.testing.assert_allclose(X.T @ res.B, np.eye(3), atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(configs(), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_translation_invariance(cfg, a, b, c):
    xp, X, gamma = cfg
    t = np.array([a, b, c])
    p = LmeParams(gamma=gamma, h=0.5)
    np.testing.assert_allclose(evaluate(xp + t, X + t, p).N, evaluate(xp, X, p).N, atol=1e-10)


def test_locality_increases_with_gamma():
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, size=(20, 3))
    xp = np.zeros(3)
    near = np.argmin((X ** 2).sum(axis=1))
    vals = [evaluate(xp, X, LmeParams(gamma=g, h=0.5)).N[near] for g in (0.8, 1.5, 3.0, 4.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
