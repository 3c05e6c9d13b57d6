"""Control-affine problems ``y' = f(y) + B u`` and the obstacle benchmark.

All callables are vectorized over a leading batch axis: states are arrays of
shape ``(N, d)``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .basis import as_float_array

Box = tuple[tuple[float, float], ...]

# psi and its derivatives are set to zero once s^2 exceeds this
_PSI_CUTOFF = 1.0 - 1e-12


def as_box(bounds: Sequence[Sequence[float]]) -> Box:
    box = tuple((float(a), float(b)) for a, b in bounds)
    for a, b in box:
        if not a < b:
            raise ValueError(f"degenerate interval ({a}, {b})")
    return box


def parse_box(text: str) -> Box:
    """Parse ``"a1,b1;a2,b2"``."""
    return as_box([tuple(float(v) for v in part.split(",")) for part in text.split(";")])


def format_box(box: Box) -> str:
    return ";".join(f"{a:g},{b:g}" for a, b in box)


def shrink(box: Box, delta: float) -> Box:
    return tuple((a + delta, b - delta) for a, b in box)


def inside(box: Box, y: np.ndarray) -> np.ndarray:
    """Open-box membership for each row of ``y``."""
    lo, hi = _bounds(box)
    y = np.atleast_2d(y)
    return ((y > lo) & (y < hi)).all(axis=-1)


@functools.lru_cache(maxsize=64)
def _bounds(box: Box) -> tuple[np.ndarray, np.ndarray]:
    return np.array([a for a, _ in box]), np.array([b for _, b in box])


@dataclass(frozen=True)
class ControlProblem:
    """Infinite-horizon problem with running cost ``ell(y) + beta/2 |u|^2``."""

    d: int
    m: int
    B: np.ndarray
    beta: float
    f: Callable[[np.ndarray], np.ndarray]
    Df: Callable[[np.ndarray], np.ndarray]
    cost: Callable[[np.ndarray], np.ndarray]
    cost_grad: Callable[[np.ndarray], np.ndarray]
    cost_hess: Callable[[np.ndarray], np.ndarray]
    Omega: Box
    omega: Box
    delta: float
    name: str = "problem"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.B.shape != (self.d, self.m):
            raise ValueError("B must be d x m")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        margin = min(min(a - lo, hi - b) for (a, b), (lo, hi) in zip(self.omega, self.Omega))
        if margin <= 0:
            raise ValueError("omega must lie inside Omega")
        if self.delta >= margin:
            raise ValueError(f"delta={self.delta} must be smaller than dist(omega, boundary)={margin}")

    @property
    def Omega_delta(self) -> Box:
        return shrink(self.Omega, self.delta)

    @property
    def B_norm(self) -> float:
        return float(np.linalg.norm(self.B, 2))


@dataclass(frozen=True)
class ObstacleParams:
    gamma: float = 0.0
    z1: float = -2.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not self.z1 < -self.sigma:
            raise ValueError("obstacle center needs z1 < -sigma")

    @property
    def z(self) -> np.ndarray:
        return np.array([self.z1, 0.0])


def bump(params: ObstacleParams, y: np.ndarray):
    """``psi(|y - z| / sigma)`` with gradient and Hessian in ``y``."""
    y = as_float_array(y)
    r = y - params.z
    q = np.sum(r * r, axis=-1) / params.sigma**2
    mask = q < _PSI_CUTOFF
    psi = np.zeros_like(q)
    dq = np.zeros_like(q)  # d psi / d q
    ddq = np.zeros_like(q)
    w = 1.0 - q[mask]
    psi[mask] = np.exp(-1.0 / w)
    dq[mask] = -psi[mask] / w**2
    ddq[mask] = psi[mask] * (2.0 * q[mask] - 1.0) / w**4
    gq = 2.0 * r / params.sigma**2
    grad = dq[..., None] * gq
    eye = np.eye(y.shape[-1])
    hess = ddq[..., None, None] * gq[..., :, None] * gq[..., None, :] + (
        dq[..., None, None] * 2.0 / params.sigma**2 * eye
    )
    return psi, grad, hess


def _psi(params: ObstacleParams, y: np.ndarray) -> np.ndarray:
    r = y - params.z
    q = np.sum(r * r, axis=-1) / params.sigma**2
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(q < _PSI_CUTOFF, np.exp(-1.0 / np.maximum(1.0 - q, 1e-300)), 0.0)


def obstacle_cost(params: ObstacleParams, y: np.ndarray) -> np.ndarray:
    y = as_float_array(y)
    psi = _psi(params, y)
    return 0.5 * np.sum(y * y, axis=-1) * (1.0 + params.gamma * psi)


def obstacle_grad(params: ObstacleParams, y: np.ndarray) -> np.ndarray:
    y = as_float_array(y)
    psi, gpsi, _ = bump(params, y)
    sq = np.sum(y * y, axis=-1)
    return y * (1.0 + params.gamma * psi)[..., None] + 0.5 * params.gamma * sq[..., None] * gpsi


def obstacle_hess(params: ObstacleParams, y: np.ndarray) -> np.ndarray:
    y = as_float_array(y)
    psi, gpsi, hpsi = bump(params, y)
    sq = np.sum(y * y, axis=-1)
    g = params.gamma
    eye = np.eye(y.shape[-1])
    cross = y[..., :, None] * gpsi[..., None, :]
    return (
        (1.0 + g * psi)[..., None, None] * eye
        + g * (cross + np.swapaxes(cross, -1, -2))
        + 0.5 * g * sq[..., None, None] * hpsi
    )


def _threshold_sup(params: ObstacleParams, resolution: int, squared: bool) -> float:
    s = np.linspace(-params.sigma, params.sigma, resolution)
    X, Y = np.meshgrid(s + params.z1, s, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    pts = pts[np.sum((pts - params.z) ** 2, axis=-1) < params.sigma**2]
    _, gpsi, hpsi = bump(params, pts)
    ynorm = np.linalg.norm(pts, axis=-1)
    gnorm = np.linalg.norm(gpsi, axis=-1)
    hnorm = np.abs(np.linalg.eigvalsh(hpsi)).max(axis=-1)
    second = 0.5 * ynorm**2 * hnorm if squared else 0.5 * ynorm * hnorm
    return float(np.max(2.0 * ynorm * gnorm + second))


def gamma_smooth_threshold(params: ObstacleParams, grid_resolution: int = 1000) -> float:
    """Sampled ``1 / sup_{B(z, sigma)} (2|y||grad psi| + 1/2 |y| |hess psi|)``.

    The Hessian norm is spectral; ``params.gamma`` is ignored.
    """
    if grid_resolution < 100:
        raise ValueError("grid_resolution must be >= 100")
    return 1.0 / _threshold_sup(params, grid_resolution, squared=False)


def gamma_threshold_diagnostics(params: ObstacleParams, grid_resolution: int = 1000) -> dict:
    """Both threshold variants: as displayed and with the ``|y|^2/2`` factor of the convexity bound."""
    return {
        "gamma_s": gamma_smooth_threshold(params, grid_resolution),
        "gamma_s_quadratic": 1.0 / _threshold_sup(params, grid_resolution, squared=True),
    }


DEFAULT_OMEGA_BIG: Box = ((-6.0, 6.0), (-3.0, 3.0))
DEFAULT_OMEGA: Box = ((-5.0, 5.0), (-2.0, 2.0))


def obstacle_problem(
    params: ObstacleParams = ObstacleParams(),
    beta: float = 0.1,
    Omega: Box = DEFAULT_OMEGA_BIG,
    omega: Box = DEFAULT_OMEGA,
    delta: float = 0.5,
) -> ControlProblem:
    """The 2-D obstacle benchmark: ``y' = u`` with cost ``ell_gamma``."""

    def f(y):
        return np.zeros_like(as_float_array(y))

    def Df(y):
        y = np.atleast_2d(y)
        return np.zeros(y.shape[:-1] + (2, 2))

    return ControlProblem(
        d=2,
        m=2,
        B=np.eye(2),
        beta=float(beta),
        f=f,
        Df=Df,
        cost=lambda y: obstacle_cost(params, y),
        cost_grad=lambda y: obstacle_grad(params, y),
        cost_hess=lambda y: obstacle_hess(params, y),
        Omega=as_box(Omega),
        omega=as_box(omega),
        delta=float(delta),
        name="obstacle",
        params={"gamma": params.gamma, "z1": params.z1, "sigma": params.sigma},
    )


def lqr_value(beta: float, y: np.ndarray) -> np.ndarray:
    """Value function of the obstacle-free benchmark, ``sqrt(beta)/2 |y|^2``."""
    y = as_float_array(y)
    return 0.5 * np.sqrt(beta) * np.sum(y * y, axis=-1)
