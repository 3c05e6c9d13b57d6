"""Closed-loop rollouts, escape monitoring and perturbation bounds."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .basis import Basis
from .problem import Box, ControlProblem, inside, shrink

DT_DEFAULT = 1.0 / 400.0


def num_steps(T: float, dt: float) -> int:
    steps = int(round(T / dt))
    if steps < 0 or not math.isclose(steps * dt, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    return steps


class PolyField:
    """Scalar field ``v(theta)`` given by basis coefficients."""

    def __init__(self, basis: Basis, theta: np.ndarray):
        self.basis = basis
        self.theta = np.asarray(theta, dtype=float)
        self.C = basis.dense(self.theta)

    def value(self, y):
        return self.basis.contract(self.basis.tables(y, 0), self.C, (0,) * self.basis.d)

    def grad(self, y):
        return self.basis.grad_from_tables(self.basis.tables(y, 1), self.C)

    def hess(self, y):
        return self.basis.hess_from_tables(self.basis.tables(y, 2), self.C)


class QuadraticField:
    """``v(y) = 1/2 y^T P y``."""

    def __init__(self, P):
        self.P = np.atleast_2d(np.asarray(P, dtype=float))

    def value(self, y):
        y = np.atleast_2d(y)
        return 0.5 * np.einsum("pi,ij,pj->p", y, self.P, y)

    def grad(self, y):
        return np.atleast_2d(y) @ self.P.T

    def hess(self, y):
        y = np.atleast_2d(y)
        return np.broadcast_to(self.P, (y.shape[0],) + self.P.shape).copy()


class SumField:
    def __init__(self, *fields, weights=None):
        self.fields = fields
        self.weights = weights or [1.0] * len(fields)

    def value(self, y):
        return sum(w * f.value(y) for w, f in zip(self.weights, self.fields))

    def grad(self, y):
        return sum(w * f.grad(y) for w, f in zip(self.weights, self.fields))

    def hess(self, y):
        return sum(w * f.hess(y) for w, f in zip(self.weights, self.fields))


def value_feedback(problem: ControlProblem, field) -> Callable[[np.ndarray], np.ndarray]:
    """``u_v(y) = -(1/beta) B^T grad v(y)``."""
    scale = -1.0 / problem.beta
    Bt = problem.B.T

    def u(y):
        return scale * field.grad(y) @ Bt.T

    return u


def linear_feedback(K) -> Callable[[np.ndarray], np.ndarray]:
    """``u(y) = K y``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return lambda y: np.atleast_2d(y) @ K.T


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    running_cost: np.ndarray
    cost: float
    escaped_at: int | None = None
    message: str = ""

    @property
    def escaped(self) -> bool:
        return self.escaped_at is not None

    def to_csv(self, path: str | Path) -> Path:
        return write_trajectory_csv(path, self.t, self.states, self.controls, self.running_cost)


@dataclass
class BatchRollout:
    """Lock-step rollouts from many initial states.

    ``escaped_at[p]`` is the index of the first state outside the monitored
    box, or -1. Rows stop updating once escaped; their remaining entries are
    NaN.
    """

    states: np.ndarray  # (P, N + 1, d)
    controls: np.ndarray  # (P, N, m)
    running_cost: np.ndarray  # (P, N)
    costs: np.ndarray  # (P,)
    escaped_at: np.ndarray  # (P,)
    dt: float

    @property
    def any_escaped(self) -> bool:
        return bool(np.any(self.escaped_at >= 0))

    def trajectory(self, p: int) -> Trajectory:
        N = self.controls.shape[1]
        esc = int(self.escaped_at[p])
        last = N if esc < 0 else esc
        return Trajectory(
            t=np.arange(last + 1) * self.dt,
            states=self.states[p, : last + 1],
            controls=self.controls[p, :last],
            running_cost=self.running_cost[p, :last],
            cost=float(self.costs[p]),
            escaped_at=None if esc < 0 else esc,
            message="" if esc < 0 else f"left the monitored region at step {esc}",
        )


def rollout_batch(
    problem: ControlProblem,
    feedback: Callable[[np.ndarray], np.ndarray],
    Y0: np.ndarray,
    T: float,
    dt: float = DT_DEFAULT,
    region: Box | None = None,
) -> BatchRollout:
    """Explicit Euler closed loop with left-endpoint cost quadrature.

    ``region`` defaults to the delta-interior of ``problem.Omega``.
    """
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    P = Y0.shape[0]
    N = num_steps(T, dt)
    region = problem.Omega_delta if region is None else region
    states = np.full((P, N + 1, problem.d), np.nan)
    controls = np.full((P, N, problem.m), np.nan)
    escaped = np.full(P, -1, dtype=int)
    states[:, 0] = Y0
    bad = ~inside(region, Y0)
    escaped[bad] = 0
    active = np.flatnonzero(~bad)
    full = active.size == P
    Bt = problem.B.T
    lo, hi = _box_arrays(region)
    y = Y0[active]
    for j in range(N):
        if active.size == 0:
            break
        u = feedback(y)
        y_next = y + dt * (problem.f(y) + u @ Bt)
        if full:
            controls[:, j] = u
            states[:, j + 1] = y_next
        else:
            controls[active, j] = u
            states[active, j + 1] = y_next
        # NaN compares false, so non-finite states count as escaped
        ok = ((y_next > lo) & (y_next < hi)).all(axis=-1)
        if not ok.all():
            escaped[active[~ok]] = j + 1
            active = active[ok]
            y_next = y_next[ok]
            full = False
        y = y_next
    # running cost at the left endpoints, only where a control was applied
    applied = ~np.isnan(controls[..., 0])
    running = np.full((P, N), np.nan)
    if applied.any():
        Ya = states[:, :N][applied]
        Ua = controls[applied]
        running[applied] = problem.cost(Ya) + 0.5 * problem.beta * np.einsum("pi,pi->p", Ua, Ua)
    costs = dt * np.where(applied, running, 0.0).sum(axis=1)
    return BatchRollout(states, controls, running, costs, escaped, dt)


def _box_arrays(box: Box) -> tuple[np.ndarray, np.ndarray]:
    return np.array([a for a, _ in box]), np.array([b for _, b in box])


def rollout(problem, feedback, y0, T, dt=DT_DEFAULT, region=None) -> Trajectory:
    """Single closed-loop rollout; halts at the first state outside the region."""
    return rollout_batch(problem, feedback, np.atleast_2d(y0), T, dt, region).trajectory(0)


def check_stability(problem, feedback, y0, T, dt=DT_DEFAULT) -> tuple[str, int | None]:
    """``("stable", None)`` or ``("escaped", step)`` for the delta-interior."""
    traj = rollout(problem, feedback, y0, T, dt)
    if traj.escaped:
        return "escaped", traj.escaped_at
    return "stable", None


def grid_points(box: Box, per_axis: int) -> np.ndarray:
    axes = [np.linspace(a, b, per_axis) for a, b in box]
    return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)


def _sup_norms(problem: ControlProblem, g1, g2, box: Box, per_axis: int):
    Y = grid_points(box, per_axis)
    du = (g1.grad(Y) - g2.grad(Y)) @ problem.B / problem.beta
    du_norm = float(np.max(np.linalg.norm(du, axis=-1)))
    Df_norm = float(np.max(np.linalg.norm(problem.Df(Y), ord=2, axis=(-2, -1))))
    H_norm = float(np.max(np.abs(np.linalg.eigvalsh(g2.hess(Y))), initial=0.0))
    a = Df_norm + problem.B_norm**2 / problem.beta * H_norm
    return du_norm, a


def _growth(a: float, t):
    # (e^{ta} - 1) / a with the a -> 0 limit
    t = np.asarray(t, dtype=float)
    if a == 0.0:
        return t
    return np.expm1(t * a) / a


def stability_margin(problem, g1, g2, T, delta=None, per_axis=200) -> dict:
    """Perturbation bound ``|B| ||u_g1 - u_g2|| / a * (e^{Ta} - 1)`` against ``delta / 2``.

    Sup norms are sampled on a grid over the ``delta/4``-interior of Omega,
    which under-approximates the true suprema.
    """
    delta = problem.delta if delta is None else delta
    du, a = _sup_norms(problem, g1, g2, shrink(problem.Omega, delta / 4), per_axis)
    bound = problem.B_norm * du * float(_growth(a, T))
    return {"bound_value": bound, "satisfied": bound <= delta / 2, "a": a, "du_sup": du}


def lipschitz_deviation_check(problem, g1, g2, y0, T, dt=DT_DEFAULT, per_axis=200) -> dict:
    """Simulated deviation of two closed loops versus the Lipschitz state bound."""
    r1 = rollout(problem, value_feedback(problem, g1), y0, T, dt)
    r2 = rollout(problem, value_feedback(problem, g2), y0, T, dt)
    if r1.escaped or r2.escaped:
        raise RuntimeError("rollout escaped; the bound requires both loops to stay in Omega_delta")
    du, a = _sup_norms(problem, g1, g2, problem.Omega_delta, per_axis)
    dev = np.linalg.norm(r1.states - r2.states, axis=-1)
    rhs = problem.B_norm * du * _growth(a, r1.t)
    return {"lhs": float(dev.max()), "rhs": float(rhs[-1]), "deviation": dev, "bound": rhs, "t": r1.t}


def write_trajectory_csv(path, t, states, controls, running_cost) -> Path:
    """CSV ``t,y1..yd,u1..um,running_cost``; the final state row carries NaN controls."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = states.shape[1]
    m = controls.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y{i + 1}" for i in range(d)] + [f"u{i + 1}" for i in range(m)] + ["running_cost"])
        for j in range(states.shape[0]):
            if j < controls.shape[0]:
                u, c = controls[j], running_cost[j]
            else:
                u, c = np.full(m, np.nan), np.nan
            w.writerow([repr(float(t[j]))] + [repr(float(x)) for x in states[j]] + [repr(float(x)) for x in u] + [repr(float(c))])
    return path


def read_trajectory_csv(path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    ys = [n for n in names if n.startswith("y")]
    us = [n for n in names if n.startswith("u")]
    return {
        "t": np.asarray(data["t"]),
        "states": np.stack([data[n] for n in ys], axis=-1),
        "controls": np.stack([data[n] for n in us], axis=-1)[:-1],
        "running_cost": np.asarray(data["running_cost"])[:-1],
    }
