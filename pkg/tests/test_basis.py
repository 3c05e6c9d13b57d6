"""Tests for the orthonormal polynomial ansatz."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import legendre as L
from numpy.testing import assert_allclose, assert_array_equal

from feedback_learning.basis import (
    OutOfDomainError,
    build_basis,
    index_set,
    legendre_tables,
    load_model,
    orthonormal_coeffs,
    save_model,
)

BOX = ((-6.0, 6.0), (-3.0, 3.0))


def quadrature_gram(k: int, C: np.ndarray) -> np.ndarray:
    """Order-k Gram matrix of the rows of ``C`` (Legendre coefficients) by Gauss quadrature.

    Independent of the exact integer Gram construction used by the library.
    """
    n = C.shape[0] - 1
    x, w = L.leggauss(n + 2)
    G = np.zeros((n + 1, n + 1))
    for order in range(k + 1):
        V = np.stack([L.legval(x, L.legder(c, order) if order else c) for c in C])
        G += 0.5 * (V * w) @ V.T
    return G


class TestIndexSet:
    def test_full_size(self):
        assert len(index_set("full", 2, 2)) == 9

    def test_hyperbolic_examples(self):
        assert index_set("hyperbolic", 3, 2).indices == ((0, 0), (0, 1), (0, 2), (1, 0), (2, 0))
        assert index_set("hyperbolic", 1, 2).indices == ((0, 0),)

    def test_lexicographic(self):
        for kind, n in (("full", 4), ("hyperbolic", 7)):
            idx = index_set(kind, n, 3).indices
            assert list(idx) == sorted(idx)

    @given(n=st.integers(1, 12), d=st.integers(1, 3))
    @settings(max_examples=40, deadline=None)
    def test_hyperbolic_subset_of_full(self, n, d):
        full = index_set("full", n, d)
        hyp = index_set("hyperbolic", n, d)
        assert set(hyp.indices) <= set(full.indices)
        assert (0,) * d in hyp.indices and (0,) * d in full.indices
        assert len(full) == (n + 1) ** d
        assert all(max(a) <= n for a in full.indices)
        assert all(math.prod(x + 1 for x in a) <= n for a in hyp.indices)

    def test_invalid(self):
        with pytest.raises(ValueError):
            index_set("full", -1, 2)
        with pytest.raises(ValueError):
            index_set("hyperbolic", 0, 2)
        with pytest.raises(ValueError):
            index_set("full", 2, 0)
        with pytest.raises(ValueError):
            index_set("sparse", 2, 2)


class TestOneDimensional:
    def test_k1_degree0(self):
        assert_allclose(orthonormal_coeffs(1, 0), [[1.0]], atol=1e-15)

    @pytest.mark.parametrize("k", [1, 2])
    def test_degree1_is_scaled_x(self, k):
        C = orthonormal_coeffs(k, 1)
        # P_1(x) = x, so phi_1 = sqrt(3)/2 * P_1
        assert_allclose(C[1], [0.0, math.sqrt(3) / 2], atol=1e-15)

    @pytest.mark.parametrize("k", [1, 2])
    @pytest.mark.parametrize("n", [5, 17, 40])
    def test_gram_identity(self, k, n):
        G = quadrature_gram(k, orthonormal_coeffs(k, n))
        assert np.abs(G - np.eye(n + 1)).max() < 1e-8

    def test_triangular_flag(self):
        C = orthonormal_coeffs(2, 12)
        assert_array_equal(np.triu(C, 1), 0.0)
        assert np.all(np.diag(C) > 0)

    def test_legendre_tables_against_numpy(self, rng):
        t = rng.uniform(-1, 1, 50)
        tab = legendre_tables(t, 9, order=2)
        for j in range(10):
            e = np.eye(10)[j]
            assert_allclose(tab[0, :, j], L.legval(t, e), atol=1e-13)
            assert_allclose(tab[1, :, j], L.legval(t, L.legder(e)), atol=1e-11)
            assert_allclose(tab[2, :, j], L.legval(t, L.legder(e, 2)), atol=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            orthonormal_coeffs(0, 3)
        with pytest.raises(ValueError):
            orthonormal_coeffs(1, 61)


@pytest.fixture(scope="module")
def basis():
    return build_basis(2, index_set("full", 6, 2), BOX)


class TestEvaluation:
    def _random(self, basis, rng, npts=100):
        theta = rng.standard_normal(basis.size)
        Y = np.column_stack([rng.uniform(-5.5, 5.5, npts), rng.uniform(-2.5, 2.5, npts)])
        return theta, Y

    def test_zero_theta(self, basis, rng):
        _, Y = self._random(basis, rng)
        z = np.zeros(basis.size)
        assert_array_equal(basis.eval(z, Y), 0.0)
        assert_array_equal(basis.eval_grad(z, Y), 0.0)
        assert_array_equal(basis.eval_hess(z, Y), 0.0)

    def test_constant_has_zero_gradient(self, basis, rng):
        _, Y = self._random(basis, rng)
        e1 = np.zeros(basis.size)
        e1[0] = 1.0
        assert_allclose(basis.eval(e1, Y), 1.0)
        assert_array_equal(basis.eval_grad(e1, Y), 0.0)

    def test_gradient_matches_fd(self, basis, rng):
        theta, Y = self._random(basis, rng)
        g = basis.eval_grad(theta, Y)
        h = 1e-5
        fd = np.stack(
            [(basis.eval(theta, Y + h * e) - basis.eval(theta, Y - h * e)) / (2 * h) for e in np.eye(2)], axis=-1
        )
        assert np.abs(g - fd).max() <= 1e-6 * np.abs(fd).max()

    def test_hessian_matches_fd(self, basis, rng):
        theta, Y = self._random(basis, rng)
        H = basis.eval_hess(theta, Y)
        h = 1e-5
        fd = np.stack(
            [(basis.eval_grad(theta, Y + h * e) - basis.eval_grad(theta, Y - h * e)) / (2 * h) for e in np.eye(2)],
            axis=-1,
        )
        assert np.abs(H - fd).max() <= 1e-4 * np.abs(fd).max()
        assert_allclose(H, np.swapaxes(H, -1, -2), atol=1e-12)

    def test_affine_map_invariance(self, rng):
        ref = build_basis(1, index_set("hyperbolic", 8, 2), ((-1.0, 1.0), (-1.0, 1.0)))
        box = build_basis(1, index_set("hyperbolic", 8, 2), ((2.0, 7.0), (-3.0, -1.0)))
        theta = rng.standard_normal(ref.size)
        X = rng.uniform(-1, 1, (40, 2))
        Y = np.column_stack([4.5 + 2.5 * X[:, 0], -2.0 + X[:, 1]])
        assert_allclose(box.eval(theta, Y), ref.eval(theta, X), rtol=1e-12, atol=1e-12)
        # chain rule factors 2 / (b - a)
        assert_allclose(box.eval_grad(theta, Y), ref.eval_grad(theta, X) * [2 / 5, 1.0], rtol=1e-10, atol=1e-12)

    def test_gradient_evaluator_matches_tables(self, basis, rng):
        theta, Y = self._random(basis, rng, 300)
        assert_allclose(basis.gradient_evaluator(theta)(Y), basis.eval_grad(theta, Y), rtol=1e-10, atol=1e-10)
        mix = np.array([[2.0, 0.0], [1.0, -1.0]])
        assert_allclose(
            basis.gradient_evaluator(theta, mix=mix)(Y), basis.eval_grad(theta, Y) @ mix, rtol=1e-10, atol=1e-10
        )

    def test_features_consistent(self, basis, rng):
        theta, Y = self._random(basis, rng, 20)
        assert_allclose(basis.features(Y) @ theta, basis.eval(theta, Y), rtol=1e-12, atol=1e-12)
        assert_allclose(
            np.einsum("ndk,k->nd", basis.grad_features(Y), theta), basis.eval_grad(theta, Y), rtol=1e-12, atol=1e-12
        )

    def test_out_of_domain(self, basis):
        with pytest.raises(OutOfDomainError):
            basis.eval(np.zeros(basis.size), np.array([[6.5, 0.0]]))
        with pytest.raises(OutOfDomainError):
            basis.gradient_evaluator(np.zeros(basis.size))(np.array([[0.0, -3.1]]))

    def test_degenerate_box(self):
        with pytest.raises(ValueError):
            build_basis(1, ("full", 2), ((1.0, 1.0), (0.0, 1.0)))


def test_model_round_trip(tmp_path, rng):
    basis = build_basis(2, index_set("hyperbolic", 9, 2), BOX)
    theta = rng.standard_normal(basis.size) * 1e-3
    path = save_model(tmp_path / "m.txt", basis, theta, {"method": "afls"})
    lines = path.read_text().splitlines()
    assert lines[:6] == ["method=afls", "k=2", "kind=hyperbolic", "n=9", "d=2", "box=-6.0,6.0;-3.0,3.0"]
    b2, t2, header = load_model(path)
    assert b2.index_set == basis.index_set and b2.box == basis.box and b2.k == 2
    assert_array_equal(t2, theta)
    assert header["method"] == "afls"
