"""Experiment protocol: configuration, reference data, parameter sweeps and metrics.

A sweep trains every method for every ``(k, n)`` pair along the ascending
obstacle-strength list.  Each strength warm-starts from the coefficients
selected at the previous one, and the penalty weight is selected per strength
by the best training-grid value error.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adjoint import _fast_feedback
from .basis import Basis, build_basis, index_set, load_model
from .learn import METHODS, Setting, TrainConfig, domain_regression_fit, train, traj_regression_fit
from .problem import ControlProblem, ObstacleParams, obstacle_problem, parse_box
from .reference import Dataset, generate_dataset
from .simulate import rollout_batch

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    gamma_list: list = field(default_factory=lambda: [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0])
    alpha_list: list = field(default_factory=lambda: [1e-1, 1e-3, 1e-5, 1e-7, 1e-9])
    k_list: list = field(default_factory=lambda: [1, 2])
    n_list: list = field(default_factory=lambda: [10, 20, 30, 40])
    methods: list = field(default_factory=lambda: list(METHODS))
    index_kind: str = "full"
    T: float = 1.0
    train_grid: int = 16
    test_grid: int = 32
    beta: float = 0.1
    z1: float = -2.0
    sigma: float = 1.0
    Omega: str = "-6,6;-3,3"
    omega: str = "-5,5;-2,2"
    delta: float = 0.5
    dt: float = 1.0 / 400.0
    T_ref: float = 3.0
    ref_tol: float = 1e-6
    ref_max_iters: int = 20000
    train_tol: float = 1e-6
    max_iters_afls: int = 1000
    max_iters_regression: int = 20000
    bb_window: int = 3
    kappa: float = 1e-3
    xi: float = 0.5
    out_dir: str = "results"
    ref_dir: str = ""

    def __post_init__(self):
        for name in ("gamma_list", "alpha_list", "k_list", "n_list", "methods"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")

    @property
    def reference_dir(self) -> Path:
        return Path(self.ref_dir) if self.ref_dir else Path(self.out_dir) / "ref"

    def problem(self, gamma: float) -> ControlProblem:
        return obstacle_problem(
            ObstacleParams(gamma=float(gamma), z1=self.z1, sigma=self.sigma),
            beta=self.beta,
            Omega=parse_box(self.Omega),
            omega=parse_box(self.omega),
            delta=self.delta,
        )

    def train_points(self) -> np.ndarray:
        return cell_grid(parse_box(self.omega), self.train_grid)

    def test_points(self) -> np.ndarray:
        return cell_grid(parse_box(self.omega), self.test_grid)


FAST_PROFILE = {
    "train_grid": 8,
    "test_grid": 12,
    "n_list": [10, 20],
    "gamma_list": [1e-3, 1.0, 1e3],
    "max_iters_afls": 80,
}


def field_kinds() -> dict[str, str]:
    """``"floats" | "ints" | "strs" | "float" | "int" | "str"`` per config field."""
    base = ExperimentConfig()
    kinds = {}
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(base, f.name)
        if isinstance(v, list):
            kinds[f.name] = {float: "floats", int: "ints", str: "strs"}[type(v[0])]
        else:
            kinds[f.name] = type(v).__name__
    return kinds


def parse_value(kind: str, text: str):
    text = text.strip()
    if kind in ("floats", "ints", "strs"):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        conv = {"floats": float, "ints": int, "strs": str}[kind]
        return [conv(p) for p in parts]
    return {"float": float, "int": int, "str": str}[kind](text)


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    kinds = field_kinds()
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = parse_value(kinds[key], value)
    return out


def make_config(fast: bool = False, config_file=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the fast profile, then the config file, then explicit overrides."""
    values: dict = {}
    if fast:
        values.update(FAST_PROFILE)
    if config_file:
        values.update(read_config_file(config_file))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values)


def cell_grid(box, per_axis: int) -> np.ndarray:
    """Cell-centred regular grid, ``per_axis`` points per coordinate, lexicographic order."""
    if per_axis < 1:
        raise ValueError("per_axis must be positive")
    axes = [a + (np.arange(per_axis) + 0.5) * (b - a) / per_axis for a, b in box]
    return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)


# ---------------------------------------------------------------- metrics


def nmae_v(values, costs) -> float:
    """``sum |V - cost| / sum V``."""
    V = np.asarray(values, dtype=float)
    C = np.asarray(costs, dtype=float)
    if V.size == 0:
        raise ValueError("no points")
    total = float(V.sum())
    if total <= 0.0:
        raise ValueError("sum of reference values is zero; NMAE_V undefined")
    return float(np.abs(V - C).sum() / total)


def nmrse_c(u_ref, u_hat, dt: float) -> float:
    """``sum_i ||u*_i - u_i||_L2 / sum_i ||u*_i||_L2`` with rectangle-rule norms."""
    Ur = np.asarray(u_ref, dtype=float)
    Uh = np.asarray(u_hat, dtype=float)
    if Ur.shape != Uh.shape:
        raise ValueError("control sequences must share a time grid")
    axes = tuple(range(1, Ur.ndim))
    den = float(np.sqrt(dt * np.sum(Ur * Ur, axis=axes)).sum())
    if den <= 0.0:
        raise ValueError("reference controls vanish; NMRSE_c undefined")
    diff = Ur - Uh
    return float(np.sqrt(dt * np.sum(diff * diff, axis=axes)).sum() / den)


@dataclass
class Evaluation:
    nmae_v: float
    nmrse_c: float
    costs: np.ndarray
    values: np.ndarray
    escaped: int
    points: int


def evaluate(problem: ControlProblem, basis: Basis, theta, dataset: Dataset, T: float, dt: float) -> Evaluation:
    """Closed-loop costs and controls of ``u_v(theta)`` against a reference dataset.

    Non-converged reference points are left out.  Escaped rollouts make both
    metrics infinite.
    """
    sols = [s for s in dataset.solutions if s.converged]
    if len(sols) < len(dataset.solutions):
        log.warning("evaluation skips %d non-converged reference points", len(dataset.solutions) - len(sols))
    Y0 = np.array([s.y0 for s in sols])
    roll = rollout_batch(problem, _fast_feedback(problem, basis, np.asarray(theta, dtype=float)), Y0, T, dt)
    N = roll.controls.shape[1]
    values = np.array([s.value for s in sols])
    escaped = int((roll.escaped_at >= 0).sum())
    costs = np.where(roll.escaped_at >= 0, np.inf, roll.costs)
    if escaped:
        return Evaluation(math.inf, math.inf, costs, values, escaped, len(sols))
    U_ref = np.stack([s.controls[:N] for s in sols])
    return Evaluation(nmae_v(values, costs), nmrse_c(U_ref, roll.controls, dt), costs, values, 0, len(sols))


def value_dominance(costs, values, tol: float) -> bool:
    """Mean closed-loop cost is not below the mean reference value minus ``tol``."""
    return float(np.mean(costs)) >= float(np.mean(values)) - tol


# ---------------------------------------------------------------- sweep


METRIC_FIELDS = ["method", "gamma", "k", "n", "alpha", "split", "nmae_v", "nmrse_c", "iters", "status"]
TIMING_FIELDS = ["method", "gamma", "k", "n", "alpha", "train_seconds", "iters"]
SCAN_FIELDS = ["method", "gamma", "k", "n", "alpha", "train_nmae_v", "iters", "final_objective", "status"]


@dataclass
class MetricsRow:
    method: str
    gamma: float
    k: int
    n: int
    alpha: float
    split: str
    nmae_v: float
    nmrse_c: float
    train_seconds: float
    iters: int
    status: str = "ok"

    def csv_row(self) -> list[str]:
        return [
            self.method,
            repr(float(self.gamma)),
            str(self.k),
            str(self.n),
            repr(float(self.alpha)),
            self.split,
            repr(float(self.nmae_v)),
            repr(float(self.nmrse_c)),
            str(self.iters),
            self.status,
        ]


def reference_data(config: ExperimentConfig) -> tuple[dict[float, Dataset], dict[float, Dataset]]:
    """Train and test reference datasets for every gamma, from cache when present."""
    common = dict(
        gamma_list=config.gamma_list,
        T_ref=config.T_ref,
        dt=config.dt,
        tol=config.ref_tol,
        cache_dir=config.reference_dir,
        max_iters=config.ref_max_iters,
    )
    train_ds = generate_dataset(config.problem, config.train_points(), **common)
    test_ds = generate_dataset(config.problem, config.test_points(), **common)
    return train_ds, test_ds


def model_path(config: ExperimentConfig, method: str, k: int, n: int, gamma: float) -> Path:
    return Path(config.out_dir) / "models" / f"{method}_k{k}_n{n}_g{gamma:g}.txt"


def _train_config(config: ExperimentConfig, method: str, warm: np.ndarray | None) -> TrainConfig:
    return TrainConfig(
        method=method,
        bb_window=config.bb_window,
        tol=config.train_tol,
        kappa=config.kappa,
        xi=config.xi,
        max_iters=config.max_iters_afls if method == "afls" else config.max_iters_regression,
        dt=config.dt,
        warm_start=warm,
    )


def select_alpha(scores: Sequence[tuple[float, float]]) -> int:
    """Index of the smallest score; ties go to the larger alpha. ``scores`` holds ``(alpha, score)``."""
    best = None
    for i, (alpha, score) in enumerate(scores):
        if not math.isfinite(score):
            continue
        if best is None:
            best = i
            continue
        b_alpha, b_score = scores[best]
        if score < b_score or (score == b_score and alpha > b_alpha):
            best = i
    return best if best is not None else -1


def run_cell(config, method, k, n, train_ds, test_ds):
    """The gamma chain for one ``(method, k, n)``; returns metric, timing and scan rows."""
    metrics, timings, scans = [], [], []
    basis = build_basis(k, index_set(config.index_kind, n, 2), parse_box(config.Omega))
    warm = None
    for gamma in sorted(config.gamma_list):
        problem = config.problem(gamma)
        tr, te = train_ds[gamma], test_ds[gamma]
        fit = None
        if method != "afls":
            probe = Setting(basis, 0.0, config.T)
            fit = (
                traj_regression_fit(probe, problem, tr, config.dt)
                if method == "traj_regression"
                else domain_regression_fit(probe, problem, tr)
            )
        candidates = []
        for alpha in config.alpha_list:
            setting = Setting(basis, float(alpha), config.T)
            tc = _train_config(config, method, warm)
            data = tr.grid[tr.converged] if method == "afls" else fit
            try:
                run = train(tc, setting, problem, data)
                ev = evaluate(problem, basis, run.theta_star, tr, config.T, config.dt)
                status = "ok" if ev.escaped == 0 else f"escaped:{ev.escaped}"
                candidates.append((alpha, run, ev, status))
                score = ev.nmae_v
            except Exception as exc:  # a failed cell is recorded and the sweep continues
                log.error("training failed for %s k=%d n=%d gamma=%g alpha=%g: %s", method, k, n, gamma, alpha, exc)
                candidates.append((alpha, None, None, f"failed:{type(exc).__name__}"))
                score = math.inf
            _, run_c, _, status_c = candidates[-1]
            scans.append(
                [
                    method,
                    repr(float(gamma)),
                    str(k),
                    str(n),
                    repr(float(alpha)),
                    repr(float(score)),
                    str(run_c.iters if run_c else 0),
                    repr(float(run_c.final_objective)) if run_c else "nan",
                    status_c,
                ]
            )
            timings.append(
                [method, repr(float(gamma)), str(k), str(n), repr(float(alpha)), f"{run_c.wall_time:.3f}" if run_c else "nan", str(run_c.iters if run_c else 0)]
            )
        best = select_alpha([(c[0], c[2].nmae_v if c[2] is not None else math.inf) for c in candidates])
        if best < 0:
            for split in ("train", "test"):
                metrics.append(MetricsRow(method, gamma, k, n, math.nan, split, math.inf, math.inf, math.nan, 0, "failed"))
            continue
        alpha, run, ev_train, status = candidates[best]
        ev_test = evaluate(problem, basis, run.theta_star, te, config.T, config.dt)
        run.save(model_path(config, method, k, n, gamma), gamma=gamma)
        for split, ev in (("train", ev_train), ("test", ev_test)):
            st = "ok" if ev.escaped == 0 else f"escaped:{ev.escaped}"
            metrics.append(MetricsRow(method, gamma, k, n, alpha, split, ev.nmae_v, ev.nmrse_c, run.wall_time, run.iters, st))
        warm = run.theta_star
    return metrics, timings, scans


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def run_sweep(config: ExperimentConfig) -> list[MetricsRow]:
    """Full protocol; writes ``metrics.csv``, ``timings.csv``, ``alpha_scan.csv`` and models.

    ``metrics.csv`` holds only deterministic quantities; wall-clock times go to
    ``timings.csv``.
    """
    out = Path(config.out_dir)
    t0 = time.perf_counter()
    train_ds, test_ds = reference_data(config)
    log.info("reference data ready in %.1f s", time.perf_counter() - t0)
    metrics, timings, scans = [], [], []
    for method in config.methods:
        for k in config.k_list:
            for n in config.n_list:
                tc = time.perf_counter()
                m, t, s = run_cell(config, method, int(k), int(n), train_ds, test_ds)
                log.info("%s k=%d n=%d done in %.1f s", method, k, n, time.perf_counter() - tc)
                metrics += m
                timings += t
                scans += s
    _write_csv(out / "metrics.csv", METRIC_FIELDS, [r.csv_row() for r in metrics])
    _write_csv(out / "timings.csv", TIMING_FIELDS, timings)
    _write_csv(out / "alpha_scan.csv", SCAN_FIELDS, scans)
    return metrics


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("gamma", "alpha", "nmae_v", "nmrse_c"):
            r[key] = float(r[key])
        for key in ("k", "n", "iters"):
            r[key] = int(r[key])
    return rows


# ---------------------------------------------------------------- level sets


def export_levelsets(problem: ControlProblem, points: np.ndarray, values: np.ndarray, out) -> Path:
    """Write ``x,y,value`` rows for external contour plotting."""
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    if pts.shape[0] != vals.shape[0] or pts.shape[1] != 2:
        raise ValueError("need (N, 2) points and N values")
    return _write_csv(Path(out), ["x", "y", "value"], [[repr(float(x)), repr(float(y)), repr(float(v))] for (x, y), v in zip(pts, vals)])


def reference_levelsets(config: ExperimentConfig, gamma: float, per_axis: int, out) -> Path:
    """Reference values ``V`` on a cell-centred grid over the initial-state box."""
    pts = cell_grid(parse_box(config.omega), per_axis)
    ds = generate_dataset(
        config.problem,
        pts,
        [gamma],
        T_ref=config.T_ref,
        dt=config.dt,
        tol=config.ref_tol,
        cache_dir=config.reference_dir,
        max_iters=config.ref_max_iters,
    )[float(gamma)]
    return export_levelsets(config.problem(gamma), pts, ds.values, out)


def rollout_levelsets(config: ExperimentConfig, model, gamma: float, per_axis: int, out) -> Path:
    """Closed-loop costs of a saved model on a cell-centred grid; escaped points get ``inf``."""
    basis, theta, _ = load_model(model)
    problem = config.problem(gamma)
    pts = cell_grid(parse_box(config.omega), per_axis)
    roll = rollout_batch(problem, _fast_feedback(problem, basis, theta), pts, config.T, config.dt)
    vals = np.where(roll.escaped_at >= 0, np.inf, roll.costs)
    return export_levelsets(problem, pts, vals, out)


def describe(config: ExperimentConfig) -> str:
    return "\n".join(f"{f.name} = {_fmt(getattr(config, f.name))}" for f in dataclasses.fields(config))


def _fmt(v) -> str:
    if isinstance(v, list):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
