"""Learning problems for value-function surrogates and their proximal-gradient trainer.

Three objectives are supported, all over coefficients ``theta`` of a
polynomial surrogate ``v(theta)`` and all regularized with the elastic net
``alpha * P(theta)``, ``P(theta) = 1/2 (1/2 |theta|_2^2 + |theta|_1)``:

* ``afls``: mean closed-loop cost of the feedback ``u_v`` over a set of
  initial states on the horizon ``T``.
* ``traj_regression``: fit ``B^T grad v`` to ``-beta u*`` along reference
  trajectories.
* ``domain_regression``: the same fit at the reference initial states only.

The quadratic half of ``P`` is part of the smooth objective; the ``l1`` half is
handled by the proximal map.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .adjoint import EscapeError, cost_and_grad, finite_difference_grad
from .basis import Basis, save_model
from .problem import ControlProblem, inside
from .reference import Dataset, gradV_target
from .simulate import DT_DEFAULT, num_steps

log = logging.getLogger(__name__)

METHODS = ("afls", "traj_regression", "domain_regression")


@dataclass(frozen=True)
class Setting:
    basis: Basis
    alpha: float
    T: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.T <= 0:
            raise ValueError("T must be positive")

    def penalty_smooth(self, theta: np.ndarray) -> float:
        return 0.25 * self.alpha * float(theta @ theta)

    def penalty(self, theta: np.ndarray) -> float:
        return 0.5 * self.alpha * (0.5 * float(theta @ theta) + float(np.abs(theta).sum()))

    @property
    def l1_weight(self) -> float:
        return 0.5 * self.alpha


@dataclass
class TrainConfig:
    method: str = "afls"
    bb_window: int = 3
    tol: float = 1e-6
    kappa: float = 1e-3
    xi: float = 0.5
    max_iters: int = 1000
    max_backtracks: int = 60
    dt: float = DT_DEFAULT
    warm_start: np.ndarray | None = None
    grad_check_coords: int = 0  # > 0: compare against finite differences at one accepted iterate
    seed: int = 0
    polish_every: int = 10  # regressions: exact support solve every this many iterations; 0 disables

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0, 1)")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.polish_every < 0:
            raise ValueError("polish_every must be non-negative")


@dataclass
class TrainRun:
    method: str
    setting: Setting
    theta_star: np.ndarray
    objective_trace: np.ndarray
    stationarity_trace: np.ndarray
    escape_rejections: int
    iters: int
    converged: bool
    wall_time: float
    final_objective: float
    message: str = ""
    grad_check_error: float | None = None
    extra: dict = field(default_factory=dict)

    def save(self, path, gamma: float | None = None):
        meta = {
            "method": self.method,
            "gamma": "" if gamma is None else repr(float(gamma)),
            "alpha": repr(float(self.setting.alpha)),
            "T": repr(float(self.setting.T)),
            "iters": self.iters,
            "final_objective": repr(float(self.final_objective)),
        }
        return save_model(path, self.setting.basis, self.theta_star, meta)


def prox_step(theta: np.ndarray, gradient: np.ndarray, step: float, alpha: float) -> np.ndarray:
    """``soft_threshold(theta - step * gradient, step * alpha / 2)``."""
    if step <= 0:
        raise ValueError("step must be positive")
    return optim.soft_threshold(np.asarray(theta) - step * np.asarray(gradient), step * alpha / 2.0)


# ---------------------------------------------------------------- AFLS


def afls_objective_grad(setting: Setting, problem: ControlProblem, theta, training_points, dt=DT_DEFAULT):
    """Mean discrete closed-loop cost plus the smooth penalty, and its gradient.

    Returns ``(inf, None)`` when any rollout leaves the delta-interior.
    """
    theta = np.asarray(theta, dtype=float)
    pts = np.asarray(training_points, dtype=float).reshape(-1, setting.basis.d)
    J = setting.penalty_smooth(theta)
    grad = 0.5 * setting.alpha * theta
    if pts.shape[0] == 0:
        return J, grad
    try:
        costs, g, _ = cost_and_grad(problem, setting.basis, theta, pts, setting.T, dt)
    except EscapeError:
        return np.inf, None
    return J + float(np.mean(costs)), grad + g / pts.shape[0]


def afls_objective(setting, problem, theta, training_points, dt=DT_DEFAULT) -> float:
    theta = np.asarray(theta, dtype=float)
    pts = np.asarray(training_points, dtype=float).reshape(-1, setting.basis.d)
    if pts.shape[0] == 0:
        return setting.penalty_smooth(theta)
    costs, _, roll = cost_and_grad(problem, setting.basis, theta, pts, setting.T, dt, with_grad=False)
    if roll.any_escaped:
        return np.inf
    return setting.penalty_smooth(theta) + float(np.mean(costs))


# ---------------------------------------------------------------- regression


@dataclass
class QuadraticFit:
    """``J(theta) = 1/2 theta^T H theta - b^T theta + c``, the data-fit part of a regression."""

    H: np.ndarray
    b: np.ndarray
    c: float
    samples: int

    def value_grad(self, theta: np.ndarray, setting: Setting):
        Ht = self.H @ theta
        J = 0.5 * float(theta @ Ht) - float(self.b @ theta) + self.c + setting.penalty_smooth(theta)
        return J, Ht - self.b + 0.5 * setting.alpha * theta

    def direct_solve(self, alpha: float, support: np.ndarray, signs: np.ndarray, refine: int = 3) -> np.ndarray:
        """Stationary point restricted to ``support`` with fixed ``l1`` signs.

        Solves the reduced normal equations; ``refine`` rounds of iterative
        refinement with extended-precision residuals keep the result accurate
        for the ill-conditioned systems small ``alpha`` produces.
        """
        theta = np.zeros_like(self.b)
        S = np.asarray(support, dtype=int)
        if S.size:
            A = self.H[np.ix_(S, S)] + 0.5 * alpha * np.eye(S.size)
            r = self.b[S] - 0.5 * alpha * np.asarray(signs, dtype=float)
            x = np.linalg.solve(A, r)
            Al, rl = A.astype(np.longdouble), r.astype(np.longdouble)
            for _ in range(refine):
                x = x + np.linalg.solve(A, (rl - Al @ x.astype(np.longdouble)).astype(float))
            theta[S] = x
        return theta

    def _phi(self, x: np.ndarray, alpha: float) -> float:
        return 0.5 * float(x @ (self.H @ x)) - float(self.b @ x) + 0.25 * alpha * float(x @ x) + 0.5 * alpha * float(
            np.abs(x).sum()
        )

    def polish(self, theta: np.ndarray, alpha: float, max_steps: int = 500) -> np.ndarray:
        """Exact minimizer by feature-sign search started at ``theta``; NaN if none is found.

        A step solves exactly on the current sign pattern and moves to the
        best point of the segment towards that solve, where a coefficient that
        changes sign is dropped at its zero crossing.  Once the point solves
        its own sign pattern, the coordinate violating optimality the most is
        added.  The objective never increases; with no violation left the
        point is the minimizer.
        """
        l1 = 0.5 * alpha
        x = np.asarray(theta, dtype=float).copy()
        signs = np.sign(x)
        settled = False
        for _ in range(max_steps):
            if settled:
                g = self.H @ x - self.b + 0.5 * alpha * x
                off = np.where(signs == 0, np.abs(g), 0.0)
                i = int(np.argmax(off))
                if off[i] <= l1:
                    return x
                signs[i] = -np.sign(g[i])
            S = np.flatnonzero(signs)
            x_new = self.direct_solve(alpha, S, signs[S])
            if np.array_equal(np.sign(x_new[S]), signs[S]):
                x, settled = x_new, True
                continue
            candidates = [x_new]
            for i in S[(np.sign(x_new[S]) != signs[S]) & (x[S] != 0)]:
                c = x + x[i] / (x[i] - x_new[i]) * (x_new - x)
                c[i] = 0.0
                candidates.append(c)
            best = min(candidates, key=lambda c: self._phi(c, alpha))
            if self._phi(best, alpha) > self._phi(x, alpha):
                return np.full_like(x, np.nan)
            x, signs, settled = best, np.sign(best), False
        return np.full_like(x, np.nan)


CHUNK = 8192


def _fit_from_samples(problem: ControlProblem, basis: Basis, Y: np.ndarray, targets: np.ndarray, w: np.ndarray, scale: float):
    """Normal equations of ``scale/2 * sum_s w_s |B^T grad v(Y_s) - targets_s|^2``."""
    M = basis.size
    H = np.zeros((M, M))
    b = np.zeros(M)
    c = 0.0
    Bt = problem.B.T
    for s in range(0, Y.shape[0], CHUNK):
        Gf = basis.grad_features(Y[s : s + CHUNK])  # (n, d, M)
        A = np.einsum("md,ndk->nmk", Bt, Gf)  # (n, m, M)
        ws = w[s : s + CHUNK]
        t = targets[s : s + CHUNK]
        Aw = (A * ws[:, None, None]).reshape(-1, M)
        H += Aw.T @ A.reshape(-1, M)
        b += Aw.T @ t.reshape(-1)
        c += float(np.sum(ws * np.sum(t * t, axis=-1)))
    return QuadraticFit(scale * H, scale * b, 0.5 * scale * c, int(Y.shape[0]))


def _usable(dataset: Dataset) -> list:
    sols = [s for s in dataset.solutions if s.converged]
    skipped = len(dataset.solutions) - len(sols)
    if skipped:
        log.warning("skipping %d non-converged reference points", skipped)
    return sols


def _in_box(basis: Basis, Y: np.ndarray) -> np.ndarray:
    return inside(tuple((a - 1e-15, b + 1e-15) for a, b in basis.box), Y)


def traj_regression_fit(setting: Setting, problem: ControlProblem, dataset: Dataset, dt: float | None = None) -> QuadraticFit:
    """Quadratic data-fit along reference trajectories on ``[0, T)``."""
    dt = float(dataset.meta.get("dt", DT_DEFAULT)) if dt is None else dt
    sols = _usable(dataset)
    steps = num_steps(setting.T, dt)
    Ys, Ts = [], []
    for s in sols:
        if s.controls.shape[0] < steps:
            raise ValueError("reference horizon shorter than the learning horizon")
        Ys.append(s.states[:steps])
        Ts.append(gradV_target(s, along=True)[:steps])
    if not Ys:
        return QuadraticFit(np.zeros((setting.basis.size,) * 2), np.zeros(setting.basis.size), 0.0, 0)
    Y = np.concatenate(Ys)
    Tg = np.concatenate(Ts)
    keep = _in_box(setting.basis, Y)
    if not keep.all():
        log.warning("dropping %d trajectory samples outside the basis box", int((~keep).sum()))
    w = np.full(int(keep.sum()), dt)
    return _fit_from_samples(problem, setting.basis, Y[keep], Tg[keep], w, 1.0 / (problem.beta * len(sols)))


def domain_regression_fit(setting: Setting, problem: ControlProblem, dataset: Dataset) -> QuadraticFit:
    """Quadratic data-fit at the reference initial states."""
    sols = _usable(dataset)
    if not sols:
        return QuadraticFit(np.zeros((setting.basis.size,) * 2), np.zeros(setting.basis.size), 0.0, 0)
    Y = np.array([s.y0 for s in sols])
    Tg = np.array([gradV_target(s) for s in sols])
    return _fit_from_samples(problem, setting.basis, Y, Tg, np.ones(len(sols)), 1.0 / (problem.beta * len(sols)))


def traj_regression_objective_grad(setting, problem, theta, dataset, dt=None):
    return traj_regression_fit(setting, problem, dataset, dt).value_grad(np.asarray(theta, dtype=float), setting)


def domain_regression_objective_grad(setting, problem, theta, dataset):
    return domain_regression_fit(setting, problem, dataset).value_grad(np.asarray(theta, dtype=float), setting)


# ---------------------------------------------------------------- trainer


def _fd_check(fun_value, theta, grad, coords, h=1e-6) -> float:
    """Largest relative gap between ``grad[coords]`` and central differences of ``fun_value``."""
    fd = np.empty(len(coords))
    for i, c in enumerate(coords):
        e = np.zeros_like(theta)
        e[c] = h
        fd[i] = (fun_value(theta + e) - fun_value(theta - e)) / (2 * h)
    return _relative_gap(grad[coords], fd)


def _relative_gap(g: np.ndarray, fd: np.ndarray) -> float:
    return float(np.linalg.norm(g - fd) / max(float(np.linalg.norm(fd)), 1e-300))


def _afls_fd_check(setting, problem, points, theta, grad, coords, dt, h=1e-6) -> float:
    """AFLS gradient components against extended-precision central differences."""
    fd = finite_difference_grad(problem, setting.basis, theta, points, setting.T, dt, h=h, coords=coords)
    fd = fd / points.shape[0] + 0.5 * setting.alpha * theta[coords]
    return _relative_gap(grad[coords], fd)


def train(config: TrainConfig, setting: Setting, problem: ControlProblem, data=None) -> TrainRun:
    """Minimize the configured objective by nonmonotone proximal gradient.

    ``data`` is the array of training initial states for ``afls``, and for
    the regression methods a :class:`Dataset` or its precomputed
    :class:`QuadraticFit` (the data fit does not depend on ``alpha``).
    """
    basis = setting.basis
    theta0 = np.zeros(basis.size) if config.warm_start is None else np.array(config.warm_start, dtype=float)
    if theta0.shape != (basis.size,):
        raise ValueError("warm start has the wrong length")
    t0 = time.perf_counter()

    if config.method == "afls":
        if data is None:
            raise ValueError("afls needs training points")
        points = np.asarray(data, dtype=float).reshape(-1, basis.d)

        def value_grad(theta):
            return afls_objective_grad(setting, problem, theta, points, config.dt)

    else:
        if isinstance(data, QuadraticFit):
            fit = data
        elif isinstance(data, Dataset):
            fit = (
                traj_regression_fit(setting, problem, data, config.dt)
                if config.method == "traj_regression"
                else domain_regression_fit(setting, problem, data)
            )
        else:
            raise ValueError(f"{config.method} needs a reference Dataset or a precomputed QuadraticFit")

        def value_grad(theta):
            return fit.value_grad(theta, setting)

        def value(theta):
            return fit.value_grad(theta, setting)[0]

        def polish(rows, X, G):
            return np.array([fit.polish(x, setting.alpha) for x in X])

    M = basis.size
    check_state: dict = {}
    rng = np.random.default_rng(config.seed)

    def fun(X, rows):
        F = np.empty(X.shape[0])
        G = np.zeros_like(X)
        for i in range(X.shape[0]):
            Fi, Gi = value_grad(X[i])
            F[i] = Fi
            if Gi is not None:
                G[i] = Gi
        return F, G

    def on_accept(it, rows, Xr):
        if config.grad_check_coords > 0 and "theta" not in check_state and it >= 1:
            check_state["theta"] = Xr[0].copy()

    res = optim.minimize(
        fun,
        theta0[None],
        l1=setting.l1_weight,
        tol=config.tol,
        max_iters=config.max_iters,
        window=config.bb_window,
        kappa=config.kappa,
        xi=config.xi,
        max_backtracks=config.max_backtracks,
        on_accept=on_accept,
        polish=polish if config.method != "afls" and config.polish_every > 0 else None,
        polish_every=max(config.polish_every, 1),
    )
    grad_err = None
    if config.grad_check_coords > 0:
        theta_c = check_state.get("theta", res.x[0])
        _, g = value_grad(theta_c)
        if g is not None:
            coords = rng.choice(M, size=min(config.grad_check_coords, M), replace=False)
            if config.method == "afls":
                grad_err = _afls_fd_check(setting, problem, points, theta_c, g, coords, config.dt)
            else:
                grad_err = _fd_check(value, theta_c, g, coords)
    wall = time.perf_counter() - t0
    theta = res.x[0]
    msg = "; ".join(res.messages) if res.messages else ("converged" if res.converged[0] else "iteration limit")
    return TrainRun(
        method=config.method,
        setting=setting,
        theta_star=theta,
        objective_trace=np.array([o[0] for o in res.objective_trace]),
        stationarity_trace=np.array([r[0] for r in res.residual_trace]),
        escape_rejections=int(res.rejections[0]),
        iters=int(res.iters[0]),
        converged=bool(res.converged[0]),
        wall_time=wall,
        final_objective=float(res.objective[0]),
        message=msg,
        grad_check_error=grad_err,
    )
