"""Tests for the nonmonotone proximal gradient solver."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from feedback_learning.optim import STEP_MAX, minimize, prox_residual, soft_threshold


def quadratic(A, b):
    def fun(X, rows):
        G = X @ A - b
        F = 0.5 * np.einsum("ki,ij,kj->k", X, A, X) - X @ b
        return F, G

    return fun


def spd(rng, n, cond=50.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T


def test_soft_threshold():
    assert_allclose(soft_threshold(np.array([1.0, -0.2, 0.3, -2.0]), 0.5), [0.5, 0.0, 0.0, -1.5])


def test_prox_residual_zero_at_lasso_optimum():
    # minimizer of 1/2 (x - 2)^2 + |x| is 1
    assert prox_residual(np.array([[1.0]]), np.array([[-1.0]]), 1.0)[0] == 0.0


@pytest.mark.parametrize("cond", [50.0, 1e4])
def test_smooth_quadratic(rng, cond):
    A = spd(rng, 8, cond)
    b = rng.standard_normal(8)
    res = minimize(quadratic(A, b), np.zeros(8), tol=1e-12, max_iters=20000)
    assert res.converged[0] and not res.failed[0]
    x = np.linalg.solve(A, b)
    assert np.abs(res.x[0] - x).max() <= 1e-12 * np.linalg.cond(A) * 10


def test_lasso_one_dimensional():
    # 1/2 a x^2 - b x + w |x|: minimizer sign(b) max(|b| - w, 0) / a
    a, b, w = 3.0, 2.0, 0.5
    res = minimize(quadratic(np.array([[a]]), np.array([b])), np.zeros(1), l1=w, tol=1e-13)
    assert res.x[0, 0] == pytest.approx((b - w) / a, rel=1e-10)


def test_rows_are_independent(rng):
    A = [spd(rng, 5) for _ in range(3)]
    B = rng.standard_normal((3, 5))
    calls = []

    def row_objective(r, x):
        g = A[r] @ x - B[r]
        return 0.5 * float(x @ (A[r] @ x)) - float(B[r] @ x), g

    def fun(X, rows):
        calls.append(rows.copy())
        out = [row_objective(r, x) for r, x in zip(rows, X)]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])

    batch = minimize(fun, np.zeros((3, 5)), l1=0.1, tol=1e-10, max_iters=3000)
    for r in range(3):
        single = minimize(lambda X, rows: fun(X, np.array([r])), np.zeros(5), l1=0.1, tol=1e-10, max_iters=3000)
        assert single.converged[0]
        assert np.array_equal(batch.x[r], single.x[0])
        assert batch.iters[r] == single.iters[0]
    assert all(np.all(np.diff(c) > 0) for c in calls)


def test_infinite_objective_rejected():
    # smooth objective that is undefined (inf) for x > 1; the minimizer of (x - 3)^2 on that set is 1
    def fun(X, rows):
        F = np.where(X[:, 0] > 1.0, np.inf, (X[:, 0] - 3.0) ** 2)
        return F, 2 * (X - 3.0)

    res = minimize(fun, np.zeros(1), tol=1e-12, max_iters=200)
    assert res.rejections[0] > 0
    assert np.all(res.x[0] <= 1.0)
    assert np.isfinite(res.objective[0])


def test_infeasible_start_fails():
    res = minimize(lambda X, rows: (np.full(X.shape[0], np.inf), np.zeros_like(X)), np.ones(2))
    assert res.failed[0] and not res.converged[0] and "infeasible" in res.messages[0]


def test_line_search_exhaustion():
    # gradient pointing uphill: no step is ever accepted
    def fun(X, rows):
        return X[:, 0], -np.ones_like(X)

    res = minimize(fun, np.zeros(1), max_backtracks=5)
    assert res.failed[0] and "exhausted 5" in res.messages[0]


def test_max_iters_zero(rng):
    x0 = rng.standard_normal(4)
    res = minimize(quadratic(np.eye(4), np.ones(4)), x0, max_iters=0)
    assert_allclose(res.x[0], x0) and res.iters[0] == 0


def test_step_safeguard():
    # a flat direction gives a huge BB step that must be clamped
    A = np.diag([1.0, 1e-12])
    res = minimize(quadratic(A, np.array([1.0, 0.0])), np.zeros(2), max_iters=3)
    assert np.all(np.isfinite(res.x))
    assert STEP_MAX == 1e8


@given(seed=st.integers(0, 10_000), window=st.integers(1, 5), w=st.floats(0.0, 0.5))
@settings(max_examples=25, deadline=None)
def test_nonmonotone_condition_on_trace(seed, window, w):
    rng = np.random.default_rng(seed)
    A = spd(rng, 6, cond=1e3)
    b = rng.standard_normal(6)
    res = minimize(quadratic(A, b), np.zeros(6), l1=w, window=window, kappa=1e-3, max_iters=200, tol=1e-12)
    phi = np.array([t[0] for t in res.objective_trace])
    for i in range(1, len(phi)):
        assert phi[i] <= max(phi[max(0, i - window) : i]) + 1e-12


def test_invalid_parameters():
    f = quadratic(np.eye(1), np.ones(1))
    with pytest.raises(ValueError):
        minimize(f, np.zeros(1), xi=1.0)
    with pytest.raises(ValueError):
        minimize(f, np.zeros(1), kappa=0.0)
    with pytest.raises(ValueError):
        minimize(f, np.zeros(1), window=0)


class TestPolish:
    def test_exact_candidate_finishes(self, rng):
        A = spd(rng, 6, cond=1e3)
        b = rng.standard_normal(6)
        x = np.linalg.solve(A, b)
        res = minimize(quadratic(A, b), np.zeros(6), tol=1e-12, max_iters=50, polish=lambda r, X, G: np.tile(x, (len(r), 1)), polish_every=5)
        assert res.converged[0] and res.iters[0] == 5
        assert_allclose(res.x[0], x)

    def test_bad_candidate_ignored(self, rng):
        A = spd(rng, 4)
        b = rng.standard_normal(4)
        base = minimize(quadratic(A, b), np.zeros(4), tol=1e-12, max_iters=40)
        calls = []

        def polish(rows, X, G):
            calls.append(len(rows))
            return np.where(rows[:, None] >= 0, 1e3, 0.0) * np.ones_like(X)

        res = minimize(quadratic(A, b), np.zeros(4), tol=1e-12, max_iters=40, polish=polish, polish_every=5)
        assert calls and np.array_equal(res.x, base.x)

    def test_no_proposal(self):
        f = quadratic(np.eye(2), np.ones(2))
        res = minimize(f, np.zeros(2), tol=1e-14, max_iters=9, polish=lambda r, X, G: np.full_like(X, np.nan), polish_every=1)
        assert_allclose(res.x[0], 1.0)
        with pytest.raises(ValueError):
            minimize(f, np.zeros(2), polish_every=0)
