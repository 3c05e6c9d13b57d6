"""Command line interface: ``feedback-learning <verb> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .adjoint import finite_difference_grad, grad_cost_discrete
from .basis import build_basis, index_set, load_model, project
from .learn import METHODS, Setting, train
from .problem import lqr_value, parse_box
from .reference import generate_dataset


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of 'key = value' lines")
    p.add_argument("--fast", action="store_true", help="desk-scale profile (small grids, short lists)")
    kinds = harness.field_kinds()
    group = p.add_argument_group("experiment overrides")
    for f in dataclasses.fields(harness.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{f.name}", metavar=kinds[f.name].upper(), help=f"override {f.name}")


def _config(args) -> harness.ExperimentConfig:
    kinds = harness.field_kinds()
    overrides = {}
    for name, kind in kinds.items():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            overrides[name] = harness.parse_value(kind, raw)
    return harness.make_config(fast=args.fast, config_file=args.config, overrides=overrides)


def _datasets(cfg, gamma, split):
    pts = cfg.train_points() if split == "train" else cfg.test_points()
    return generate_dataset(
        cfg.problem,
        pts,
        [gamma],
        T_ref=cfg.T_ref,
        dt=cfg.dt,
        tol=cfg.ref_tol,
        cache_dir=cfg.reference_dir,
        max_iters=cfg.ref_max_iters,
    )[float(gamma)]


def cmd_reference(args) -> int:
    cfg = _config(args)
    train_ds, test_ds = harness.reference_data(cfg)
    for g in sorted(train_ds):
        for split, ds in (("train", train_ds[g]), ("test", test_ds[g])):
            conv = int(ds.converged.sum())
            print(f"gamma={g:g} {split}: {conv}/{len(ds.solutions)} converged, mean value {ds.values.mean():.6g}")
    print(f"cache: {cfg.reference_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    problem = cfg.problem(args.gamma)
    basis = build_basis(args.k, index_set(cfg.index_kind, args.n, 2), parse_box(cfg.Omega))
    warm = None
    if args.warm_start:
        wb, warm, _ = load_model(args.warm_start)
        if wb.index_set != basis.index_set:
            print("warm start model has a different index set", file=sys.stderr)
            return 2
    tr = _datasets(cfg, args.gamma, "train")
    tc = harness._train_config(cfg, args.method, warm)
    data = tr.grid[tr.converged] if args.method == "afls" else tr
    run = train(tc, Setting(basis, args.alpha, cfg.T), problem, data)
    out = Path(args.out) if args.out else harness.model_path(cfg, args.method, args.k, args.n, args.gamma)
    run.save(out, gamma=args.gamma)
    ev = harness.evaluate(problem, basis, run.theta_star, tr, cfg.T, cfg.dt)
    print(f"{args.method} k={args.k} n={args.n} gamma={args.gamma:g} alpha={args.alpha:g}")
    print(f"iters={run.iters} converged={run.converged} objective={run.final_objective:.10g} ({run.message})")
    print(f"train nmae_v={ev.nmae_v:.6g} nmrse_c={ev.nmrse_c:.6g}  wall={run.wall_time:.1f}s")
    print(f"model: {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = harness.run_sweep(cfg)
    for r in rows:
        print(f"{r.method:18s} gamma={r.gamma:<8g} k={r.k} n={r.n:<3d} alpha={r.alpha:<8g} {r.split:5s} "
              f"nmae_v={r.nmae_v:.4g} nmrse_c={r.nmrse_c:.4g} {r.status}")
    print(f"metrics: {Path(cfg.out_dir) / 'metrics.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    basis, theta, header = load_model(args.model)
    gamma = args.gamma if args.gamma is not None else float(header.get("gamma") or 0.0)
    problem = cfg.problem(gamma)
    ds = _datasets(cfg, gamma, args.split)
    ev = harness.evaluate(problem, basis, theta, ds, cfg.T, cfg.dt)
    print(f"{args.split} gamma={gamma:g}: nmae_v={ev.nmae_v:.6g} nmrse_c={ev.nmrse_c:.6g} "
          f"escaped={ev.escaped}/{ev.points}")
    return 0


def cmd_levelsets(args) -> int:
    cfg = _config(args)
    if args.source == "reference":
        out = harness.reference_levelsets(cfg, args.gamma, args.grid, args.out)
    else:
        if not args.model:
            print("--model is required for rollout level sets", file=sys.stderr)
            return 2
        out = harness.rollout_levelsets(cfg, args.model, args.gamma, args.grid, args.out)
    print(f"wrote {out}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    problem = cfg.problem(args.gamma)
    basis = build_basis(args.k, index_set(cfg.index_kind, args.n, 2), parse_box(cfg.Omega))
    rng = np.random.default_rng(args.seed)
    (a1, b1), (a2, b2) = parse_box(cfg.omega)
    # random coefficients around the obstacle-free value keep the loops stable
    base = project(basis, lambda y: lqr_value(cfg.beta, y))
    decay = (1.0 + basis.index_set.array.sum(axis=1)) ** 2
    worst = 0.0
    for i in range(args.pairs):
        theta = base + args.scale * rng.standard_normal(basis.size) / decay
        y0 = np.array([rng.uniform(a1, b1), rng.uniform(a2, b2)])
        _, g = grad_cost_discrete(problem, basis, theta, y0, cfg.T, cfg.dt)
        fd = finite_difference_grad(problem, basis, theta, y0, cfg.T, cfg.dt, h=args.h)
        err = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))
        worst = max(worst, err)
        print(f"pair {i}: y0=({y0[0]:+.3f},{y0[1]:+.3f}) relative error {err:.3e}")
    ok = worst <= args.rtol
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {worst:.3e} (tolerance {args.rtol:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feedback-learning", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("reference", help="build and cache reference datasets")
    _add_config_options(p)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("train", help="train a single cell")
    _add_config_options(p)
    p.add_argument("--method", choices=METHODS, default="afls")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=1e-9)
    p.add_argument("--warm-start", help="model file with the same index set")
    p.add_argument("--out", help="model path (default under out_dir/models)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the full protocol and write metrics.csv")
    _add_config_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="metrics of a saved model against reference data")
    _add_config_options(p)
    p.add_argument("--model", required=True)
    p.add_argument("--gamma", type=float, help="defaults to the gamma recorded in the model")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("levelsets", help="export x,y,value grids for contour plots")
    _add_config_options(p)
    p.add_argument("--source", choices=("reference", "rollout"), default="reference")
    p.add_argument("--model")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_levelsets)

    p = sub.add_parser("grad-check", help="compare adjoint gradients with finite differences")
    _add_config_options(p)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--pairs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.05)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--rtol", type=float, default=1e-6)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
