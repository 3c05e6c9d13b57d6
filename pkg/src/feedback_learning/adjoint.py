"""Gradients of the discretized closed-loop cost with respect to ansatz coefficients.

The discrete adjoint is the exact reverse-mode derivative of the explicit
Euler rollout with left-endpoint cost quadrature.  With ``u = -(1/beta) B^T
grad phi`` it reads

    lam_N = 0
    lam_j = lam_{j+1} + dt * [grad ell + (1/beta) H B B^T grad phi
                              + Df^T lam_{j+1} - (1/beta) H B B^T lam_{j+1}](y_j)

where ``H`` is the Hessian of ``phi`` and ``p = -lam`` is the adjoint state.
The continuous adjoint equation, discretized by explicit Euler backwards in
time, is kept as an independent cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import Basis
from .problem import ControlProblem, inside
from .simulate import DT_DEFAULT, BatchRollout, PolyField, Trajectory, num_steps, rollout, rollout_batch

CHUNK = 16384


class EscapeError(RuntimeError):
    """A rollout left the monitored region, so the cost is not differentiable there."""


@dataclass
class AdjointPath:
    t: np.ndarray
    p: np.ndarray  # (N + 1, d), p[-1] == 0


def _box_contains(outer, inner) -> bool:
    return all(a <= c and d <= b for (a, b), (c, d) in zip(outer, inner))


def _fast_feedback(problem: ControlProblem, basis: Basis, theta: np.ndarray, region=None):
    """``u = -(1/beta) B^T grad v`` through the Chebyshev evaluator.

    The per-call box check is skipped when the rollout region already lies
    in the basis box, since the rollout never evaluates outside its region.
    """
    region = problem.Omega_delta if region is None else region
    return basis.gradient_evaluator(theta, mix=-problem.B / problem.beta, check=not _box_contains(basis.box, region))


def _chunked_tables(basis: Basis, Y: np.ndarray, order: int) -> list[np.ndarray]:
    return [basis.tables(Y[s : s + CHUNK], order=order) for s in range(0, Y.shape[0], CHUNK)]


def _hessians(basis: Basis, C: np.ndarray, tabs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    G = np.concatenate([basis.grad_from_tables(t, C) for t in tabs])
    H = np.concatenate([basis.hess_from_tables(t, C) for t in tabs])
    return G, H


def _accumulate_directional(basis: Basis, tabs: list[np.ndarray], W: np.ndarray) -> np.ndarray:
    """``sum_s W_s . grad phi_alpha(Y_s)`` for every basis function."""
    acc = np.zeros((basis.degree + 1,) * basis.d)
    s = 0
    for tab in tabs:
        n = tab.shape[2]
        for k in range(basis.d):
            acc += basis.accumulate(tab, W[s : s + n, k], basis._unit(basis.d, [k]))
        s += n
    return basis.sparse(acc)


def cost_and_grad(
    problem: ControlProblem,
    basis: Basis,
    theta: np.ndarray,
    Y0: np.ndarray,
    T: float,
    dt: float = DT_DEFAULT,
    with_grad: bool = True,
):
    """Per-point discrete costs and the gradient of their sum over ``theta``.

    Returns ``(costs, grad, roll)``.  Raises :class:`EscapeError` if any rollout
    leaves the delta-interior and a gradient was requested.
    """
    theta = np.asarray(theta, dtype=float)
    roll = rollout_batch(problem, _fast_feedback(problem, basis, theta), Y0, T, dt)
    if not with_grad:
        return roll.costs, None, roll
    if roll.any_escaped:
        bad = np.flatnonzero(roll.escaped_at >= 0)
        raise EscapeError(f"{bad.size} rollout(s) escaped, first at step {roll.escaped_at[bad[0]]}")
    return roll.costs, _discrete_gradient(problem, basis, theta, roll), roll


def _discrete_gradient(problem, basis, theta, roll: BatchRollout) -> np.ndarray:
    P, N1, d = roll.states.shape
    N = N1 - 1
    dt = roll.dt
    if N == 0:
        return np.zeros(basis.size)
    Y = roll.states[:, :N].reshape(-1, d)
    C = basis.dense(theta)
    tabs = _chunked_tables(basis, Y, 2)
    G, H = _hessians(basis, C, tabs)
    G = G.reshape(P, N, d)
    H = H.reshape(P, N, d, d)
    BBt = problem.B @ problem.B.T / problem.beta
    lg = problem.cost_grad(Y).reshape(P, N, d)
    Df = problem.Df(Y).reshape(P, N, d, d)
    HB = H @ BBt  # (P, N, d, d); hess phi is symmetric
    src = lg + np.einsum("pnij,pnj->pni", HB, G)
    A = np.swapaxes(Df, -1, -2) - HB  # transpose of (Df + B Du)
    lam = np.zeros((P, N + 1, d))
    for j in range(N - 1, -1, -1):
        nxt = lam[:, j + 1]
        lam[:, j] = nxt + dt * (src[:, j] + (A[:, j] @ nxt[:, :, None])[:, :, 0])
    # d cost / d theta_alpha = (dt/beta) sum (grad phi - lam_{j+1})^T B B^T grad phi_alpha
    W = dt * np.einsum("ij,pnj->pni", BBt, G - lam[:, 1:])
    return _accumulate_directional(basis, tabs, W.reshape(-1, d))


def grad_cost_discrete(problem, basis, theta, y0, T, dt=DT_DEFAULT) -> tuple[float, np.ndarray]:
    """Discrete cost from ``y0`` and its exact gradient over the coefficients.

    ``y0`` may be a single state or a batch, in which case costs and
    gradients are summed in a fixed order.
    """
    costs, grad, _ = cost_and_grad(problem, basis, theta, np.atleast_2d(y0), T, dt)
    return float(np.sum(costs)), grad


def solve_adjoint_discrete(problem, field, traj: Trajectory) -> AdjointPath:
    """Exact adjoint ``p = -lam`` of the Euler recursion along a trajectory."""
    if traj.escaped:
        raise EscapeError("trajectory escaped")
    dt = traj.t[1] - traj.t[0] if traj.t.size > 1 else DT_DEFAULT
    N = traj.controls.shape[0]
    Y = traj.states[:N]
    G = field.grad(Y)
    H = field.hess(Y)
    BBt = problem.B @ problem.B.T / problem.beta
    src = problem.cost_grad(Y) + np.einsum("nij,jk,nk->ni", H, BBt, G)
    A = np.swapaxes(problem.Df(Y), -1, -2) - H @ BBt
    lam = np.zeros((N + 1, problem.d))
    for j in range(N - 1, -1, -1):
        lam[j] = lam[j + 1] + dt * (src[j] + A[j] @ lam[j + 1])
    return AdjointPath(traj.t, -lam)


def solve_adjoint_continuous(problem, field, traj: Trajectory) -> AdjointPath:
    """Backward explicit Euler for the continuous adjoint equation.

    Solves ``-p' + grad ell - Df^T p + (1/beta) hess(phi) B B^T (grad phi + p) = 0``
    with ``p(T) = 0``, stepping from ``t_{j+1}`` to ``t_j`` with the right-hand
    side frozen at ``t_{j+1}``.
    """
    if traj.escaped:
        raise EscapeError("trajectory escaped")
    N = traj.controls.shape[0]
    p = np.zeros((N + 1, problem.d))
    if N == 0:
        return AdjointPath(traj.t, p)
    dt = traj.t[1] - traj.t[0]
    Y = traj.states
    G = field.grad(Y)
    H = field.hess(Y)
    lg = problem.cost_grad(Y)
    DfT = np.swapaxes(problem.Df(Y), -1, -2)
    BBt = problem.B @ problem.B.T / problem.beta
    for j in range(N - 1, -1, -1):
        q = p[j + 1]
        rhs = lg[j + 1] - DfT[j + 1] @ q + H[j + 1] @ BBt @ (G[j + 1] + q)
        p[j] = q - dt * rhs
        if not np.all(np.isfinite(p[j])):
            raise FloatingPointError(f"non-finite adjoint at step {j}")
    return AdjointPath(traj.t, p)


def grad_cost_continuous(problem, basis, theta, y0, T, dt=DT_DEFAULT) -> tuple[float, np.ndarray]:
    """Gradient from the continuous adjoint with rectangle quadrature.

    ``(1/beta) sum_j dt (grad phi(y_j) + p_j)^T B B^T grad phi_alpha(y_j)``.
    Converges to :func:`grad_cost_discrete` at first order in ``dt``.
    """
    field = PolyField(basis, theta)
    traj = rollout(problem, _fast_feedback(problem, basis, theta), y0, T, dt)
    adj = solve_adjoint_continuous(problem, field, traj)
    N = traj.controls.shape[0]
    Y = traj.states[:N]
    BBt = problem.B @ problem.B.T / problem.beta
    W = dt * (field.grad(Y) + adj.p[:N]) @ BBt.T
    return traj.cost, _accumulate_directional(basis, _chunked_tables(basis, Y, 1), W)


def _costs_per_theta(problem, basis, thetas, Y0, T, dt):
    """Discrete costs for every pair of coefficient vector and initial state.

    An independent evaluation path: feedbacks come from the Legendre tables
    rather than the Chebyshev evaluator used in training, and the Euler
    recursion runs in extended precision so that central differences with
    small steps are not swamped by accumulated rounding.  Returns shape
    ``(len(thetas), len(Y0))``.
    """
    ext = np.longdouble
    Q = thetas.shape[0]
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    P = Y0.shape[0]
    Cs = np.repeat(np.stack([basis.dense(th) for th in thetas]).astype(ext), P, axis=0)  # (Q P, n+1, ...)
    N = num_steps(T, dt)
    y = np.tile(Y0.astype(ext), (Q, 1))
    h = ext(dt)
    B = problem.B.astype(ext)
    beta = ext(problem.beta)
    cost = np.zeros(Q * P, dtype=ext)
    region = problem.Omega_delta
    letters = "abcdefghij"[: basis.d]
    spec = ",".join(f"q{c}" for c in letters) + ",q" + letters + "->q"
    for _ in range(N):
        if not inside(region, y).all():
            raise EscapeError("finite-difference probe escaped")
        tab = basis.tables(y, order=1)
        g = np.stack(
            [np.einsum(spec, *[tab[i, int(i == k)] for i in range(basis.d)], Cs) for k in range(basis.d)],
            axis=-1,
        )
        u = -(g @ B) / beta
        cost += h * (problem.cost(y) + beta / 2 * np.sum(u * u, axis=-1))
        y = y + h * (problem.f(y) + u @ B.T)
    if not inside(region, y).all():
        raise EscapeError("finite-difference probe escaped")
    return cost.reshape(Q, P)


def finite_difference_grad(problem, basis, theta, y0, T, dt=DT_DEFAULT, h=1e-6, coords=None) -> np.ndarray:
    """Central differences of the discrete cost summed over initial states.

    All probes run in one batch.  With ``coords`` only those components are
    returned, in the given order.
    """
    theta = np.asarray(theta, dtype=float)
    idx = np.arange(theta.size) if coords is None else np.asarray(coords, dtype=int)
    E = np.zeros((idx.size, theta.size))
    E[np.arange(idx.size), idx] = h
    costs = _costs_per_theta(problem, basis, np.concatenate([theta + E, theta - E]), y0, T, dt).sum(axis=1)
    k = idx.size
    return ((costs[:k] - costs[k:]) / (2 * h)).astype(float)
