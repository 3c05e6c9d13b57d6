"""Nonmonotone proximal gradient with Barzilai-Borwein steps.

Minimizes ``F(x) + w * |x|_1`` where ``F`` is smooth.  The solver works on a
stack of independent problems at once (rows of ``x``): each row keeps its own
step length, objective history and stopping state, while objective
evaluations are batched over the rows that still need them.  A single
problem is the one-row case.

A trial point is accepted when

    Phi(x_new) <= max(last ``window`` accepted Phi) - kappa / step * |x_new - x|^2

with ``Phi = F + w |.|_1``; otherwise the step is multiplied by ``xi``.  An
infinite objective value (for instance an escaped closed loop) is always
rejected this way.  When the exact change of ``Phi`` is within rounding
noise of its value, the test uses the trapezoid estimate
``1/2 (g + g_new) . (x_new - x)`` plus the change of the ``l1`` term instead,
as in approximate Armijo rules; this lets the solver reach tolerances below
the square root of machine precision.

An optional ``polish`` callback proposes, every ``polish_every`` iterations,
a candidate for each unfinished row (typically an exact solve on the current
support).  A candidate replaces the iterate only if it does not raise ``Phi``
above the nonmonotone reference and already meets the stopping tolerance.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

STEP_MIN = 1e-8
STEP_MAX = 1e8
# relative size below which a change of the objective is treated as rounding noise
NOISE_REL = 1e-8

# fun(X, rows) -> (F, G); X has one row per entry of `rows`.  Rows whose F is
# not finite may carry arbitrary G.
Objective = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def soft_threshold(x: np.ndarray, thresh) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def prox_residual(x: np.ndarray, g: np.ndarray, l1: float) -> np.ndarray:
    """Max-norm of ``x - prox_{l1 |.|_1}(x - g)`` per row (unit step)."""
    return np.max(np.abs(x - soft_threshold(x - g, l1)), axis=-1, initial=0.0)


@dataclass
class OptimResult:
    x: np.ndarray  # (K, M)
    objective: np.ndarray  # (K,) smooth part plus l1 term
    residual: np.ndarray  # (K,)
    converged: np.ndarray  # (K,) bool
    failed: np.ndarray  # (K,) bool, line search exhausted or infeasible start
    iters: np.ndarray  # (K,)
    rejections: np.ndarray  # (K,) trial points with infinite objective
    objective_trace: list[np.ndarray] = field(default_factory=list)
    residual_trace: list[np.ndarray] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)


def minimize(
    fun: Objective,
    x0: np.ndarray,
    l1: float = 0.0,
    tol: float = 1e-6,
    max_iters: int = 1000,
    window: int = 3,
    kappa: float = 1e-3,
    xi: float = 0.5,
    max_backtracks: int = 60,
    step0: float = 1.0,
    on_accept: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
    polish: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
    polish_every: int = 10,
) -> OptimResult:
    """Run the prox-gradient iteration on every row of ``x0``.

    ``l1`` is the weight on ``|x|_1``.  ``on_accept(iteration, rows, X_rows)``
    is called after each round of accepted steps.  ``polish(rows, X_rows,
    G_rows)`` returns candidate rows, with NaN rows meaning no proposal.
    """
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    if window < 1:
        raise ValueError("window must be at least 1")
    if polish_every < 1:
        raise ValueError("polish_every must be at least 1")
    X = np.array(np.atleast_2d(x0), dtype=float)
    K = X.shape[0]
    all_rows = np.arange(K)
    F, G = fun(X.copy(), all_rows)
    F = np.asarray(F, dtype=float).copy()
    G = np.array(G, dtype=float)
    phi = F + l1 * np.abs(X).sum(axis=1)
    failed = ~np.isfinite(phi)
    messages = [f"row {r}: infeasible starting point" for r in np.flatnonzero(failed)]
    hist = [deque([p], maxlen=window) for p in phi]
    step = np.full(K, float(step0))
    iters = np.zeros(K, dtype=int)
    rejections = np.zeros(K, dtype=int)
    residual = np.where(failed, np.inf, prox_residual(X, np.where(np.isfinite(G), G, 0.0), l1))
    converged = ~failed & (residual <= tol)
    obj_trace = [phi.copy()]
    res_trace = [residual.copy()]

    for it in range(max_iters):
        active = np.flatnonzero(~converged & ~failed)
        if active.size == 0:
            break
        pending = active
        st = step[active].copy()
        accepted = []
        for _ in range(max_backtracks + 1):
            Xp = X[pending]
            Xn = soft_threshold(Xp - st[:, None] * G[pending], st[:, None] * l1)
            Fn, Gn = fun(Xn, pending)
            Fn = np.asarray(Fn, dtype=float)
            phin = Fn + l1 * np.abs(Xn).sum(axis=1)
            ref = np.array([max(hist[r]) for r in pending])
            dx2 = np.sum((Xn - Xp) ** 2, axis=1)
            finite = np.isfinite(phin)
            with np.errstate(invalid="ignore"):
                ok = finite & (phin <= ref - kappa * dx2 / st)
                # near a minimizer the exact change drowns in rounding; then decide on the
                # trapezoid estimate of the change, exact for quadratic F
                cur = phi[pending]
                noisy = finite & ~ok & (np.abs(phin - cur) <= NOISE_REL * np.abs(cur))
                if noisy.any():
                    est = 0.5 * np.einsum("ki,ki->k", G[pending] + Gn, Xn - Xp) + l1 * (
                        np.abs(Xn).sum(axis=1) - np.abs(Xp).sum(axis=1)
                    )
                    ok |= noisy & (est <= -kappa * dx2 / st)
            rejections[pending[~finite]] += 1
            for idx in np.flatnonzero(ok):
                r = pending[idx]
                s = Xn[idx] - X[r]
                y = Gn[idx] - G[r]
                sy = float(s @ y)
                # BB1; when s^T y <= 0 no positive BB length exists, keep the accepted one
                new_step = float(s @ s) / sy if sy > 0.0 else st[idx]
                step[r] = min(max(new_step, STEP_MIN), STEP_MAX)
                X[r] = Xn[idx]
                G[r] = Gn[idx]
                F[r] = Fn[idx]
                phi[r] = phin[idx]
                hist[r].append(phin[idx])
                iters[r] += 1
                accepted.append(r)
            keep = ~ok
            pending = pending[keep]
            st = st[keep] * xi
            if pending.size == 0:
                break
        for r in pending:
            failed[r] = True
            messages.append(f"row {r}: line search exhausted {max_backtracks} reductions at iteration {it}")
        if accepted:
            rows = np.array(sorted(accepted))
            residual[rows] = prox_residual(X[rows], G[rows], l1)
            converged[rows] = residual[rows] <= tol
            if polish is not None and (it + 1) % polish_every == 0:
                _try_polish(fun, polish, rows[~converged[rows]], X, F, G, phi, hist, residual, converged, l1, tol)
            if on_accept is not None:
                on_accept(it, rows, X[rows])
        obj_trace.append(phi.copy())
        res_trace.append(residual.copy())

    return OptimResult(
        x=X,
        objective=phi,
        residual=residual,
        converged=converged,
        failed=failed,
        iters=iters,
        rejections=rejections,
        objective_trace=obj_trace,
        residual_trace=res_trace,
        messages=messages,
    )


def _try_polish(fun, polish, rows, X, F, G, phi, hist, residual, converged, l1, tol) -> None:
    """Replace rows by their polished candidates where those are acceptable (in place)."""
    if rows.size == 0:
        return
    C = np.asarray(polish(rows, X[rows].copy(), G[rows].copy()), dtype=float)
    have = np.all(np.isfinite(C), axis=1)
    if not have.any():
        return
    rows, C = rows[have], C[have]
    Fc, Gc = fun(C.copy(), rows)
    Fc = np.asarray(Fc, dtype=float)
    phic = Fc + l1 * np.abs(C).sum(axis=1)
    with np.errstate(invalid="ignore"):
        resc = prox_residual(C, np.where(np.isfinite(Gc), Gc, 0.0), l1)
    for i, r in enumerate(rows):
        if np.isfinite(phic[i]) and phic[i] <= max(hist[r]) and resc[i] <= tol:
            X[r], F[r], G[r], phi[r] = C[i], Fc[i], Gc[i], phic[i]
            hist[r].append(phic[i])
            residual[r] = resc[i]
            converged[r] = True
