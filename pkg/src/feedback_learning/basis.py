"""Orthonormal tensor-product polynomial ansatz on box domains.

The 1-D family is orthonormal on (-1, 1) with respect to the Sobolev inner
product

    <phi, psi>_k = 1/2 * sum_{i=0..k} int_{-1}^{1} phi^(i)(x) psi^(i)(x) dx

and is obtained by Gram-Schmidt on the polynomial flag 1, x, x^2, ...
Multivariate functions are tensor products over a multi-index set, composed
with the affine map of each box interval onto (-1, 1).
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import mpmath
import numpy as np

__all__ = [
    "Basis",
    "IndexSet",
    "OutOfDomainError",
    "build_basis",
    "index_set",
    "legendre_tables",
    "load_model",
    "orthonormal_coeffs",
    "project",
    "save_model",
    "sobolev_gram_legendre",
]

MAX_DEGREE = 60
ORTHO_TOL = 1e-8


class OutOfDomainError(ValueError):
    """Raised when a basis is evaluated outside its box."""


@dataclass(frozen=True)
class IndexSet:
    kind: str
    n: int
    d: int
    indices: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.indices, dtype=int).reshape(len(self.indices), self.d)

    @property
    def max_degree(self) -> int:
        return max(max(a) for a in self.indices)


def index_set(kind: str, n: int, d: int) -> IndexSet:
    """Full grid ``max_i a_i <= n`` or hyperbolic cross ``prod(a_i + 1) <= n``.

    Indices are returned in lexicographic order.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if kind == "full":
        if n < 0:
            raise ValueError("full index set needs n >= 0")
        indices = tuple(itertools.product(range(n + 1), repeat=d))
    elif kind == "hyperbolic":
        if n < 1:
            raise ValueError("hyperbolic cross needs n >= 1")
        indices = tuple(
            a for a in itertools.product(range(n), repeat=d) if math.prod(x + 1 for x in a) <= n
        )
    else:
        raise ValueError(f"unknown index set kind {kind!r}")
    return IndexSet(kind, n, d, indices)


def _legendre_derivative_matrix(n: int) -> list[list[int]]:
    # P_m' = sum_{j < m, m - j odd} (2j + 1) P_j
    D = [[0] * (n + 1) for _ in range(n + 1)]
    for m in range(n + 1):
        for j in range(m - 1, -1, -2):
            D[j][m] = 2 * j + 1
    return D


def _int_matmul(A: list[list[int]], B: list[list[int]]) -> list[list[int]]:
    cols = list(zip(*B))
    return [[sum(a * b for a, b in zip(row, col)) for col in cols] for row in A]


@functools.lru_cache(maxsize=None)
def sobolev_gram_legendre(k: int, n: int) -> tuple[tuple[int, ...], ...]:
    """Exact order-k Gram matrix of Legendre polynomials P_0..P_n.

    Returned as integers scaled by ``lcm(1, 3, ..., 2n + 1)``; the rational
    Gram matrix is the result divided by :func:`_gram_scale`.
    """
    scale = _gram_scale(n)
    weights = [scale // (2 * j + 1) for j in range(n + 1)]
    Dk = [[int(i == j) for j in range(n + 1)] for i in range(n + 1)]
    D = _legendre_derivative_matrix(n)
    G = [[0] * (n + 1) for _ in range(n + 1)]
    for order in range(k + 1):
        if order > 0:
            Dk = _int_matmul(D, Dk)
        for a in range(n + 1):
            for b in range(a, n + 1):
                s = sum(weights[j] * Dk[j][a] * Dk[j][b] for j in range(n + 1))
                G[a][b] += s
    for a in range(n + 1):
        for b in range(a):
            G[a][b] = G[b][a]
    return tuple(tuple(row) for row in G)


def _gram_scale(n: int) -> int:
    return math.lcm(*range(1, 2 * n + 2, 2))


# degrees at which the factorization is computed; smaller degrees use a leading block
_FACTOR_TIERS = (10, 20, 40, MAX_DEGREE)


@functools.lru_cache(maxsize=None)
def _inverse_cholesky(k: int, D: int) -> np.ndarray:
    """Inverse Cholesky factor of the exact Gram matrix up to degree ``D``, rounded to double.

    The Gram matrix of ``P_0..P_n`` is a leading block of the one for
    ``P_0..P_D``, and so are its triangular factor and that factor's inverse.
    """
    G_int = sobolev_gram_legendre(k, D)
    scale = _gram_scale(D)
    with mpmath.workdps(60):
        G = mpmath.matrix([[mpmath.mpf(g) / scale for g in row] for row in G_int])
        Linv = mpmath.inverse(mpmath.cholesky(G))
        return np.array([[float(Linv[i, j]) for j in range(D + 1)] for i in range(D + 1)])


@functools.lru_cache(maxsize=None)
def _orthonormal_coeffs_cached(k: int, n: int) -> np.ndarray:
    D = next(t for t in _FACTOR_TIERS if t >= n)
    C = _inverse_cholesky(k, D)[: n + 1, : n + 1].copy()
    G_int = sobolev_gram_legendre(k, n)
    scale = _gram_scale(n)
    G_f = np.array([[float(mpmath.mpf(g) / scale) for g in row] for row in G_int])
    dev = np.abs(C @ G_f @ C.T - np.eye(n + 1)).max()
    if dev > 1e-12:
        # one reorthogonalization pass against the realized Gram matrix
        R = np.linalg.cholesky(C @ G_f @ C.T)
        C = np.linalg.solve(R, C)
        dev = np.abs(C @ G_f @ C.T - np.eye(n + 1)).max()
    if dev > ORTHO_TOL:
        raise ArithmeticError(f"orthonormalization lost accuracy (k={k}, n={n}, dev={dev:.2e})")
    C.setflags(write=False)
    return C


def orthonormal_coeffs(k: int, n: int) -> np.ndarray:
    """Coefficients of the orthonormal polynomials in the Legendre basis.

    Row ``i`` holds the Legendre coefficients of the degree-``i`` function,
    so that ``phi_i(x) = sum_j C[i, j] P_j(x)``.
    """
    if k < 1:
        raise ValueError("inner product order k must be >= 1")
    if not 0 <= n <= MAX_DEGREE:
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}]")
    return _orthonormal_coeffs_cached(k, n)


def as_float_array(x) -> np.ndarray:
    """``x`` as an array of at least double precision; extended precision is kept."""
    a = np.asarray(x)
    if np.issubdtype(a.dtype, np.floating) and a.dtype.itemsize >= 8:
        return a
    return a.astype(np.float64)


def legendre_tables(t: np.ndarray, n: int, order: int = 2) -> np.ndarray:
    """P_j(t) and its derivatives, shape ``(order + 1, len(t), n + 1)``.

    The result is a transposed view of a degree-major array.
    """
    t = as_float_array(t).ravel()
    # degree-major layout keeps every recurrence update contiguous
    out = np.zeros((order + 1, n + 1, t.size), dtype=t.dtype)
    out[0, 0] = 1.0
    if n >= 1:
        out[0, 1] = t
        if order >= 1:
            out[1, 1] = 1.0
    for m in range(1, n):
        out[0, m + 1] = ((2 * m + 1) * t * out[0, m] - m * out[0, m - 1]) / (m + 1)
        for o in range(1, order + 1):
            out[o, m + 1] = out[o, m - 1] + (2 * m + 1) * out[o - 1, m]
    return out.transpose(0, 2, 1)


@dataclass(frozen=True)
class Basis:
    """Tensor-product orthonormal polynomials on a box.

    Evaluation on the box composes each factor with
    ``x -> 2 / (b - a) * (x - (a + b) / 2)``.
    """

    k: int
    index_set: IndexSet
    box: tuple[tuple[float, float], ...]
    coeffs: np.ndarray = field(repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.index_set)

    @property
    def d(self) -> int:
        return self.index_set.d

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    @functools.cached_property
    def _scales(self) -> np.ndarray:
        return np.array([2.0 / (b - a) for a, b in self.box])

    @functools.cached_property
    def _bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([a for a, _ in self.box]), np.array([b for _, b in self.box])

    @functools.cached_property
    def _centers(self) -> np.ndarray:
        return np.array([0.5 * (a + b) for a, b in self.box])

    @functools.cached_property
    def _flat_index(self) -> np.ndarray:
        shape = (self.degree + 1,) * self.d
        return np.ravel_multi_index(self.index_set.array.T, shape)

    def to_reference(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(as_float_array(y))
        if y.shape[-1] != self.d:
            raise ValueError(f"points must have {self.d} coordinates")
        lo, hi = self._bounds
        if not ((y >= lo) & (y <= hi)).all():
            raise OutOfDomainError("evaluation point outside the basis box")
        return (y - self._centers) * self._scales

    def tables(self, y: np.ndarray, order: int = 2) -> np.ndarray:
        """1-D basis values and box-scaled derivatives.

        Shape ``(d, order + 1, N, degree + 1)``.
        """
        t = self.to_reference(y)
        N = t.shape[0]
        leg = legendre_tables(t.T.ravel(), self.degree, order)
        phi = (leg @ self.coeffs.T).reshape(order + 1, self.d, N, self.degree + 1)
        for o in range(1, order + 1):
            for i in range(self.d):
                phi[o, i] *= self._scales[i] ** o
        return phi.transpose(1, 0, 2, 3)

    def dense(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"theta must have length {self.size}")
        C = np.zeros((self.degree + 1) ** self.d)
        C[self._flat_index] = theta
        return C.reshape((self.degree + 1,) * self.d)

    def sparse(self, C: np.ndarray) -> np.ndarray:
        return C.reshape(-1)[self._flat_index]

    # contraction helpers; `orders[i]` is the derivative order along axis i
    def contract(self, tab: np.ndarray, C: np.ndarray, orders: Sequence[int]) -> np.ndarray:
        if self.d == 2:
            return np.einsum("pa,pa->p", tab[0, orders[0]] @ C, tab[1, orders[1]])
        letters = "abcdefghij"[: self.d]
        spec = ",".join(f"p{c}" for c in letters) + "," + letters + "->p"
        return np.einsum(spec, *[tab[i, o] for i, o in enumerate(orders)], C, optimize=True)

    def accumulate(self, tab: np.ndarray, w: np.ndarray, orders: Sequence[int]) -> np.ndarray:
        """Dense tensor of ``sum_p w_p * prod_i phi_{a_i}^{(orders[i])}(y_p)``."""
        if self.d == 2:
            return (tab[0, orders[0]] * w[:, None]).T @ tab[1, orders[1]]
        letters = "abcdefghij"[: self.d]
        spec = "p," + ",".join(f"p{c}" for c in letters) + "->" + letters
        return np.einsum(spec, w, *[tab[i, o] for i, o in enumerate(orders)], optimize=True)

    @staticmethod
    def _unit(d: int, axes: Sequence[int]) -> tuple[int, ...]:
        orders = [0] * d
        for ax in axes:
            orders[ax] += 1
        return tuple(orders)

    def eval(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        tab = self.tables(y, order=0)
        return self.contract(tab, self.dense(theta), (0,) * self.d)

    def eval_grad(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        tab = self.tables(y, order=1)
        return self.grad_from_tables(tab, self.dense(theta))

    def eval_hess(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        tab = self.tables(y, order=2)
        return self.hess_from_tables(tab, self.dense(theta))

    def grad_from_tables(self, tab: np.ndarray, C: np.ndarray) -> np.ndarray:
        return np.stack([self.contract(tab, C, self._unit(self.d, [i])) for i in range(self.d)], axis=-1)

    def hess_from_tables(self, tab: np.ndarray, C: np.ndarray) -> np.ndarray:
        N = tab.shape[2]
        H = np.empty((N, self.d, self.d))
        for i in range(self.d):
            for j in range(i, self.d):
                H[:, i, j] = H[:, j, i] = self.contract(tab, C, self._unit(self.d, [i, j]))
        return H

    @functools.cached_property
    def _chebyshev_coeffs(self) -> np.ndarray:
        # rows: 1-D orthonormal functions expanded in Chebyshev polynomials
        n = self.degree
        L2C = np.zeros((n + 1, n + 1))
        for j in range(n + 1):
            c = np.polynomial.Legendre.basis(j).convert(kind=np.polynomial.Chebyshev).coef
            L2C[j, : c.size] = c
        return self.coeffs @ L2C

    def gradient_evaluator(self, theta: np.ndarray, mix: np.ndarray | None = None, check: bool = True):
        """Fast ``y -> grad v(theta)(y) @ mix`` for repeated use with fixed ``theta``.

        The field is converted once to a Chebyshev tensor series, so each call
        costs a fixed number of array operations independent of the degree.
        ``mix`` is a ``(d, m)`` matrix (identity by default).  With
        ``check=False`` the caller guarantees that points lie in the box.
        """
        A = self._chebyshev_coeffs
        K = self.dense(theta)
        for axis in range(self.d):
            K = np.moveaxis(np.tensordot(A.T, K, axes=([1], [axis])), 0, axis)
        partials = []
        for axis in range(self.d):
            Kd = np.polynomial.chebyshev.chebder(K, axis=axis) * self._scales[axis]
            pad = [(0, 0)] * self.d
            pad[axis] = (0, 1)
            partials.append(np.pad(Kd, pad))
        mix = np.eye(self.d) if mix is None else np.asarray(mix, dtype=float)
        # output component i is sum_k mix[k, i] * partial_k
        outs = np.tensordot(mix.T, np.stack(partials), axes=([1], [0]))  # (m, n+1, ..., n+1)
        m = outs.shape[0]
        ks = np.arange(self.degree + 1)
        d = self.d
        centers, scales = self._centers, self._scales
        if d == 2:
            Kcat = np.concatenate(list(outs), axis=1)  # (n+1, m (n+1))
        n1 = self.degree + 1

        def grad(y):
            if check:
                t = self.to_reference(y)
            else:
                t = (y - centers) * scales
            Tc = np.cos(np.arccos(np.clip(t, -1.0, 1.0))[..., None] * ks)  # (N, d, n+1)
            if d == 2:
                return ((Tc[:, 0] @ Kcat).reshape(-1, m, n1) * Tc[:, 1, None, :]).sum(axis=-1)
            tab = Tc.transpose(1, 0, 2)[:, None]
            return np.stack([self.contract(tab, Ko, (0,) * d) for Ko in outs], axis=-1)

        return grad

    def features(self, y: np.ndarray) -> np.ndarray:
        """Basis function values, shape ``(N, size)``."""
        tab = self.tables(y, order=0)
        A = self.index_set.array
        out = np.ones((tab.shape[2], self.size))
        for i in range(self.d):
            out *= tab[i, 0][:, A[:, i]]
        return out

    def grad_features(self, y: np.ndarray) -> np.ndarray:
        """Basis function gradients, shape ``(N, d, size)``."""
        tab = self.tables(y, order=1)
        A = self.index_set.array
        N = tab.shape[2]
        out = np.ones((N, self.d, self.size))
        for k in range(self.d):
            for i in range(self.d):
                out[:, k] *= tab[i, int(i == k)][:, A[:, i]]
        return out


def build_basis(k: int, index_set_spec: IndexSet | tuple, box: Sequence[Sequence[float]]) -> Basis:
    """Orthonormal ansatz of order ``k`` on ``box``.

    ``index_set_spec`` is an :class:`IndexSet` or a ``(kind, n)`` pair, in
    which case the dimension is taken from ``box``.
    """
    box = tuple((float(a), float(b)) for a, b in box)
    for a, b in box:
        if not a < b:
            raise ValueError(f"degenerate interval ({a}, {b})")
    if isinstance(index_set_spec, IndexSet):
        iset = index_set_spec
    else:
        kind, n = index_set_spec
        iset = index_set(kind, n, len(box))
    if iset.d != len(box):
        raise ValueError("index set dimension does not match box")
    C = orthonormal_coeffs(k, iset.max_degree)
    return Basis(k, iset, box, C)


def project(basis: Basis, fn, points_per_axis: int | None = None) -> np.ndarray:
    """Least-squares coefficients of ``fn`` on a tensor Gauss grid in the box."""
    q = points_per_axis or basis.degree + 2
    nodes, _ = np.polynomial.legendre.leggauss(q)
    axes = [c + x / s for c, s, x in zip(basis._centers, basis._scales, itertools.repeat(nodes))]
    Y = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    A = basis.features(Y)
    theta, *_ = np.linalg.lstsq(A, fn(Y), rcond=None)
    return theta


def save_model(path: str | Path, basis: Basis, theta: np.ndarray, meta: dict | None = None) -> Path:
    """Write the flat text model artifact: header lines then one coefficient per line."""
    path = Path(path)
    lines = [f"{key}={value}" for key, value in (meta or {}).items()]
    lines += [
        f"k={basis.k}",
        f"kind={basis.index_set.kind}",
        f"n={basis.index_set.n}",
        f"d={basis.d}",
        "box=" + ";".join(f"{a!r},{b!r}" for a, b in basis.box),
    ]
    for alpha, th in zip(basis.index_set.indices, np.asarray(theta, dtype=float)):
        lines.append(",".join(str(a) for a in alpha) + f",{th:.17g}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(path: str | Path) -> tuple[Basis, np.ndarray, dict]:
    header: dict[str, str] = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
        else:
            rows.append(line.split(","))
    box = [tuple(float(x) for x in part.split(",")) for part in header.pop("box").split(";")]
    d = int(header.pop("d"))
    basis = build_basis(int(header.pop("k")), index_set(header.pop("kind"), int(header.pop("n")), d), box)
    lookup = {tuple(int(a) for a in r[:d]): float(r[d]) for r in rows}
    if set(lookup) != set(basis.index_set.indices):
        raise ValueError("model coefficients do not match the index set")
    theta = np.array([lookup[a] for a in basis.index_set.indices])
    return basis, theta, header
