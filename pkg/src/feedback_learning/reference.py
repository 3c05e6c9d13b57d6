"""Reference values, optimal controls and value gradients from open-loop solves.

For each initial state the control sequence ``u_0 .. u_{N-1}`` on the horizon
``T_ref`` minimizes

    C(u) = dt * sum_j w_j ell(y_j) + dt * beta/2 * sum_j |u_j|^2 + Vhat(y_N)

along the explicit Euler states ``y_{j+1} = y_j + dt (f(y_j) + B u_j)``, with
trapezoid weights ``w_0 = w_N = 1/2`` and ``w_j = 1`` otherwise, and the
quadratic terminal penalty ``Vhat(y) = sqrt(beta)/2 |y|^2``.  The optimizer
sees ``C / dt``, whose gradient in ``u_j`` is ``beta u_j - B^T p_j`` where
``p_j = -dC/dy_{j+1}`` is the discrete adjoint.  The stationarity residual is
therefore the optimizer's stopping quantity.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import optim
from .problem import ControlProblem
from .simulate import DT_DEFAULT, linear_feedback, num_steps, read_trajectory_csv, rollout_batch, write_trajectory_csv

log = logging.getLogger(__name__)

T_REF_DEFAULT = 3.0
TOL_DEFAULT = 1e-6
MAX_ITERS_DEFAULT = 20000


@dataclass
class ReferenceSolution:
    y0: np.ndarray
    value: float
    states: np.ndarray  # (N + 1, d)
    controls: np.ndarray  # (N, m)
    p: np.ndarray  # (N + 1, d); p[j] pairs with u[j], p[N] = -grad Vhat(y_N)
    gradV0: np.ndarray  # -p[0]
    converged: bool
    residual: float
    beta: float
    iters: int = 0


def gradV_target(solution: ReferenceSolution, along: bool = False) -> np.ndarray:
    """``B^T grad V`` at ``y0`` as ``-beta u*_0``; with ``along`` the sequence ``-beta u*_j``."""
    u = solution.controls if along else solution.controls[0]
    return -solution.beta * u


@dataclass
class Dataset:
    gamma: float
    grid: np.ndarray  # (P, d)
    tag: str
    solutions: list[ReferenceSolution]
    meta: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.solutions])

    @property
    def converged(self) -> np.ndarray:
        return np.array([s.converged for s in self.solutions])


def _quadratic_penalty(beta: float):
    c = math.sqrt(beta)

    def value(y):
        return 0.5 * c * np.sum(y * y, axis=-1)

    def grad(y):
        return c * y

    return value, grad


class _OpenLoop:
    """Batched open-loop objective ``C / dt`` over control sequences.

    ``adjoint`` returns ``mu_j = dC/dy_j`` so that the gradient in ``u_j`` is
    ``beta u_j + B^T mu_{j+1}``.
    """

    def __init__(self, problem: ControlProblem, Y0: np.ndarray, T_ref: float, dt: float, terminal=None):
        self.problem = problem
        self.Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
        self.dt = dt
        self.N = num_steps(T_ref, dt)
        if self.N < 1:
            raise ValueError("T_ref must contain at least one step")
        self.terminal = terminal or _quadratic_penalty(problem.beta)
        w = np.ones(self.N + 1)
        w[0] = w[-1] = 0.5
        self.w = w

    def states(self, U: np.ndarray, rows: np.ndarray) -> np.ndarray:
        pr = self.problem
        k = rows.size
        Y = np.empty((k, self.N + 1, pr.d))
        y = self.Y0[rows].copy()
        Y[:, 0] = y
        BU = U @ pr.B.T  # (k, N, d)
        dt = self.dt
        for j in range(self.N):
            y = y + dt * (pr.f(y) + BU[:, j])
            Y[:, j + 1] = y
        return Y

    def __call__(self, X: np.ndarray, rows: np.ndarray):
        pr = self.problem
        k = rows.size
        U = X.reshape(k, self.N, pr.m)
        Y = self.states(U, rows)
        flat = Y.reshape(-1, pr.d)
        with np.errstate(over="ignore", invalid="ignore"):
            ell = pr.cost(flat).reshape(k, self.N + 1)
            tv, tg = self.terminal
            F = ell @ self.w + 0.5 * pr.beta * np.sum(U * U, axis=(1, 2)) + tv(Y[:, -1]) / self.dt
        G = np.zeros_like(X)
        ok = np.isfinite(F) & np.isfinite(Y).all(axis=(1, 2))
        F = np.where(ok, F, np.inf)
        if not ok.any():
            return F, G
        idx = np.flatnonzero(ok)
        mu = self.adjoint(Y[idx])
        G[idx] = (pr.beta * U[idx] + mu[:, 1:] @ pr.B).reshape(idx.size, -1)
        return F, G

    def adjoint(self, Y: np.ndarray) -> np.ndarray:
        pr = self.problem
        k = Y.shape[0]
        dt = self.dt
        flat = Y.reshape(-1, pr.d)
        gl = pr.cost_grad(flat).reshape(k, self.N + 1, pr.d) * (dt * self.w)[None, :, None]
        Df = pr.Df(flat).reshape(k, self.N + 1, pr.d, pr.d)
        mu = np.empty_like(Y)
        mu[:, -1] = gl[:, -1] + self.terminal[1](Y[:, -1])
        trivial = not np.any(Df)
        for j in range(self.N - 1, -1, -1):
            nxt = mu[:, j + 1]
            if trivial:
                mu[:, j] = gl[:, j] + nxt
            else:
                mu[:, j] = gl[:, j] + nxt + dt * (np.swapaxes(Df[:, j], -1, -2) @ nxt[:, :, None])[:, :, 0]
        return mu


def cold_start_controls(problem: ControlProblem, Y0: np.ndarray, T_ref: float, dt: float) -> np.ndarray:
    """Controls of the closed loop ``u = -(1/sqrt(beta)) B^T y``, shape ``(P, N, m)``."""
    K = -problem.B.T / math.sqrt(problem.beta)
    region = tuple((-math.inf, math.inf) for _ in range(problem.d))
    roll = rollout_batch(problem, linear_feedback(K), Y0, T_ref, dt, region=region)
    return roll.controls


def solve_open_loop_batch(
    problem: ControlProblem,
    Y0: np.ndarray,
    T_ref: float = T_REF_DEFAULT,
    dt: float = DT_DEFAULT,
    tol: float = TOL_DEFAULT,
    U0: np.ndarray | None = None,
    max_iters: int = MAX_ITERS_DEFAULT,
    terminal=None,
) -> list[ReferenceSolution]:
    """Solve the open-loop problems of all rows of ``Y0`` in lock step."""
    if T_ref < 1.0:
        raise ValueError("T_ref must be at least 1")
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    ol = _OpenLoop(problem, Y0, T_ref, dt, terminal)
    if U0 is None:
        U0 = cold_start_controls(problem, Y0, T_ref, dt)
    U0 = np.asarray(U0, dtype=float).reshape(Y0.shape[0], -1)
    res = optim.minimize(ol, U0, tol=tol, max_iters=max_iters)
    rows = np.arange(Y0.shape[0])
    U = res.x.reshape(Y0.shape[0], ol.N, problem.m)
    Y = ol.states(U, rows)
    mu = ol.adjoint(Y)
    out = []
    for i in rows:
        p = np.empty_like(Y[i])
        p[:-1] = -mu[i, 1:]
        p[-1] = -ol.terminal[1](Y[i, -1])
        conv = bool(res.converged[i])
        if not conv:
            log.warning("open-loop solve from %s did not converge (residual %.3g)", Y0[i], res.residual[i])
        out.append(
            ReferenceSolution(
                y0=Y0[i].copy(),
                value=float(res.objective[i] * dt),
                states=Y[i],
                controls=U[i].copy(),
                p=p,
                gradV0=-p[0],
                converged=conv,
                residual=float(res.residual[i]),
                beta=problem.beta,
                iters=int(res.iters[i]),
            )
        )
    return out


def solve_open_loop(problem, y0, T_ref=T_REF_DEFAULT, dt=DT_DEFAULT, tol=TOL_DEFAULT, u0=None, max_iters=MAX_ITERS_DEFAULT):
    """Reference solution from a single initial state."""
    U0 = None if u0 is None else np.asarray(u0, dtype=float)[None]
    return solve_open_loop_batch(problem, np.atleast_2d(y0), T_ref, dt, tol, U0, max_iters)[0]


def grid_tag(problem: ControlProblem, grid: np.ndarray, T_ref: float, dt: float, tol: float) -> str:
    """Cache key for a grid under fixed discretization and solver settings.

    The obstacle strength is excluded since it is part of the file name.
    """
    params = {k: v for k, v in problem.params.items() if k != "gamma"}
    key = json.dumps(
        {
            "grid": [repr(float(x)) for x in np.asarray(grid, dtype=float).ravel()],
            "T_ref": repr(float(T_ref)),
            "dt": repr(float(dt)),
            "tol": repr(float(tol)),
            "beta": repr(float(problem.beta)),
            "problem": problem.name,
            "params": {k: repr(float(v)) for k, v in sorted(params.items())},
        },
        sort_keys=True,
    )
    return f"{len(grid)}pts_{hashlib.sha256(key.encode()).hexdigest()[:10]}"


def _gamma_label(gamma: float) -> str:
    return f"{gamma:g}"


def dataset_paths(cache_dir: str | Path, gamma: float, tag: str) -> tuple[Path, Path, Path]:
    stem = f"ref_g{_gamma_label(gamma)}_{tag}"
    root = Path(cache_dir)
    return root / f"{stem}.csv", root / f"{stem}.json", root / stem


def write_dataset(cache_dir, dataset: Dataset, problem: ControlProblem, dt: float) -> Path:
    csv_path, meta_path, traj_dir = dataset_paths(cache_dir, dataset.gamma, dataset.tag)
    traj_dir.mkdir(parents=True, exist_ok=True)
    d = dataset.grid.shape[1]
    for i, s in enumerate(dataset.solutions):
        Nu = s.controls.shape[0]
        run = problem.cost(s.states[:Nu]) + 0.5 * problem.beta * np.sum(s.controls**2, axis=-1)
        write_trajectory_csv(traj_dir / f"traj_{i}.csv", np.arange(Nu + 1) * dt, s.states, s.controls, run)
    meta = dict(dataset.meta)
    meta["residual"] = [repr(s.residual) for s in dataset.solutions]
    meta["iters"] = [s.iters for s in dataset.solutions]
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    # the summary file goes last so that its presence marks a complete entry
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"y0{i + 1}" for i in range(d)] + ["value", "converged"] + [f"gradV{i + 1}" for i in range(d)])
        for s in dataset.solutions:
            w.writerow(
                [repr(float(x)) for x in s.y0]
                + [repr(s.value), int(s.converged)]
                + [repr(float(x)) for x in s.gradV0]
            )
    return csv_path


def read_dataset(cache_dir, gamma: float, tag: str, problem: ControlProblem) -> Dataset:
    """Load a cached dataset; adjoint paths are recomputed from the stored states."""
    csv_path, meta_path, traj_dir = dataset_paths(cache_dir, gamma, tag)
    meta = json.loads(meta_path.read_text())
    with csv_path.open() as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("y0"))
    dt = float(meta["dt"])
    N = num_steps(float(meta["T_ref"]), dt)
    ol = _OpenLoop(problem, np.zeros((1, d)), float(meta["T_ref"]), dt)
    sols = []
    for i, row in enumerate(body):
        y0 = np.array([float(v) for v in row[:d]])
        traj = read_trajectory_csv(traj_dir / f"traj_{i}.csv")
        states = traj["states"]
        if states.shape[0] != N + 1:
            raise ValueError(f"{traj_dir / f'traj_{i}.csv'} has {states.shape[0]} states, expected {N + 1}")
        mu = ol.adjoint(states[None])[0]
        p = np.empty_like(states)
        p[:-1] = -mu[1:]
        p[-1] = -ol.terminal[1](states[-1])
        sols.append(
            ReferenceSolution(
                y0=y0,
                value=float(row[d]),
                states=states,
                controls=traj["controls"],
                p=p,
                gradV0=np.array([float(v) for v in row[d + 2 : 2 * d + 2]]),
                converged=bool(int(row[d + 1])),
                residual=float(meta["residual"][i]),
                beta=problem.beta,
                iters=int(meta["iters"][i]),
            )
        )
    grid = np.array([s.y0 for s in sols])
    return Dataset(gamma=float(gamma), grid=grid, tag=tag, solutions=sols, meta=meta)


def _check_in_omega(problem: ControlProblem, grid: np.ndarray) -> None:
    lo = np.array([a for a, _ in problem.omega])
    hi = np.array([b for _, b in problem.omega])
    outside = ~((grid >= lo) & (grid <= hi)).all(axis=1)
    if outside.any():
        raise ValueError(f"{int(outside.sum())} grid point(s) lie outside omega, first {grid[outside][0]}")


def generate_dataset(
    make_problem: Callable[[float], ControlProblem],
    grid: np.ndarray,
    gamma_list: Sequence[float],
    T_ref: float = T_REF_DEFAULT,
    dt: float = DT_DEFAULT,
    tol: float = TOL_DEFAULT,
    cache_dir: str | Path | None = None,
    max_iters: int = MAX_ITERS_DEFAULT,
) -> dict[float, Dataset]:
    """Reference datasets for each ``gamma``, solved in ascending order with continuation.

    Each solve starts from the previous gamma's optimal controls (the first
    from the analytic quadratic feedback).  With ``cache_dir`` every dataset
    is written once and always returned as read back from disk, so cached
    and fresh runs see identical numbers.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    gammas = sorted(float(g) for g in gamma_list)
    if gammas:
        _check_in_omega(make_problem(gammas[0]), grid)
    out: dict[float, Dataset] = {}
    prev: Dataset | None = None
    for gamma in gammas:
        problem = make_problem(gamma)
        tag = grid_tag(problem, grid, T_ref, dt, tol)
        csv_path = dataset_paths(cache_dir, gamma, tag)[0] if cache_dir is not None else None
        if csv_path is not None and csv_path.exists():
            ds = read_dataset(cache_dir, gamma, tag, problem)
        else:
            U0 = None if prev is None else np.stack([s.controls for s in prev.solutions])
            sols = solve_open_loop_batch(problem, grid, T_ref, dt, tol, U0, max_iters)
            meta = {
                "gamma": repr(gamma),
                "dt": repr(float(dt)),
                "T_ref": repr(float(T_ref)),
                "tol": repr(float(tol)),
                "warm_start_gamma": None if prev is None else repr(prev.gamma),
            }
            ds = Dataset(gamma=gamma, grid=grid, tag=tag, solutions=sols, meta=meta)
            if cache_dir is not None:
                write_dataset(cache_dir, ds, problem, dt)
                ds = read_dataset(cache_dir, gamma, tag, problem)
        bad = int((~ds.converged).sum())
        if bad:
            log.warning("gamma=%g: %d of %d reference points did not converge", gamma, bad, len(ds.solutions))
        out[gamma] = ds
        prev = ds
    return out
