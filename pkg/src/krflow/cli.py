"""Command-line driver: one experiment per invocation.

Exit codes: 0 success with all asserted invariants holding, 2 solver failure
or failed invariant, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import EXPERIMENT_KINDS, TORUS_MODEL, ConfigError, ExperimentConfig, parse_config
from .io import emit_series, write_csv, write_snapshot

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_CONFIG = 3


class InvariantFailure(RuntimeError):
    pass


def _model(cfg):
    from .fibration import KodairaModel

    return KodairaModel(cfg["model.kind"], m=cfg["model.m"], b=cfg["model.b"] or 0,
                        tau0=cfg["model.tau0"], c=cfg["model.c"])


def _annulus(cfg):
    from .grid import BaseGrid

    return BaseGrid("annulus", cfg["grid.base"], cfg["grid.angular"], cfg["grid.rho_min"],
                    cfg["grid.rho_max"])


def _base_problem(cfg, grid):
    """Density and section for the solve-base experiment."""
    from .fibration import (FibrationConfig, consistent_density, model_density, period_field,
                            section_field, synthetic_period)
    from .grid import base_form
    from .weil_petersson import wp_form

    if cfg["model.kind"] == TORUS_MODEL:
        y = synthetic_period(grid)
        m = max(2, cfg["model.m"])
        fc = FibrationConfig(grid, y, cfg["model.area"], base_form(grid, 1.0),
                             multiple_fibers=((0.5 + 0.5j, m),), eps_h=0.3, synthetic=True)
        wp = wp_form(y)
        F = consistent_density(fc, wp)
        return F, wp, section_field([0.5 + 0.5j], grid, fc.eps_h)
    F = model_density(_model(cfg), grid, cfg["model.area"])
    y, _ = period_field(_model(cfg), grid)
    return F, wp_form(y), section_field([0j], grid, 0.3)


def run_solve_base(cfg, out: Path, snapshot_every=None):
    from .gke import GKEProblem, continuity_path, curvature_residual, residual_floor, solve_gke
    from .grid import BaseGrid, base_form

    if cfg["model.kind"] == TORUS_MODEL:
        grid = BaseGrid("torus", cfg["grid.base"], cfg["grid.base"])
    else:
        grid = _annulus(cfg)
    F, wp, section = _base_problem(cfg, grid)
    chi = F.chi if F.chi is not None else base_form(grid, 1.0)
    tol = max(cfg["solver.tol"], residual_floor(grid))
    problem = GKEProblem(grid, chi, F, tol=tol, max_iter=cfg["solver.max_iter"],
                         continuity_steps=cfg["solver.continuity_steps"])
    direct = solve_gke(problem)
    path = continuity_path(problem)
    gap = float(np.max(np.abs(direct.phi.values - path.phi.values)))
    rows = [[p["t"], p["iterations"], p["residual"]] for p in path.path]
    write_csv(out / "path.csv", ["t", "iterations", "residual"], rows, cfg.hash())
    write_snapshot(direct.phi, out / "phi.krfg")
    summary = {"iterations": direct.iterations, "residual": direct.history[-1],
               "path_gap": gap}
    if F.consistent:
        summary["curvature_residual"] = curvature_residual(direct, wp, section)
    checks = {"newton_residual": direct.history[-1] <= problem.tol,
              "path_matches_direct": gap <= 1e-8}
    return ["path.csv", "phi.krfg"], summary, checks


def run_flow_experiment(cfg, out: Path, snapshot_every=None):
    from .flow import reference_flow_problem, run_flow
    from .grid import ScalarField

    problem = reference_flow_problem(
        cfg["grid.base"], cfg["grid.fiber"], cfg["model.amplitude"], cfg["model.eps_h"],
        cfg["flow.seed_kind"], cfg["flow.seed_amplitude"], cfg["experiment.seed"],
        dt=cfg["flow.dt"], t_max=cfg["flow.t_max"], monitor_every=cfg["flow.monitor_every"],
        scheme=cfg["flow.scheme"])
    series, snaps = run_flow(problem, snapshot_every=snapshot_every)
    series.meta["config_hash"] = cfg.hash()
    files = [p.name for p in emit_series(series, out / "series.csv", cfg.hash())]
    for k, (t, phi) in enumerate(snaps):
        name = f"phi_{k:04d}.krfg"
        write_snapshot(ScalarField(problem.total, phi), out / name)
        files.append(name)
    area_err = series.summary["fiber_area_error"]
    summary = {k: v for k, v in series.summary.items() if k != "runtime"}
    summary["snapshot_times"] = [t for t, _ in snaps]
    checks = {"fiber_area": area_err <= 1e-10,
              "scalar_identity": float(np.max(series.column("scalar_gap"))) <= 1e-8}
    return files, summary, checks


def run_k3_family(cfg, out: Path, snapshot_every=None):
    from .grid import BaseGrid, ScalarField, TotalGrid
    from .k3 import family_schedule, limit_check, make_family_problem, solve_family

    base = BaseGrid("torus", cfg["grid.base"], cfg["grid.base"])
    total = TotalGrid(base, cfg["grid.fiber"], cfg["grid.fiber"])
    x1, _, x3, _ = total.mesh()
    amp = 10 * cfg["model.amplitude"]
    density = (1 + amp * np.cos(2 * np.pi * x1)) * (1 + 0.5 * amp * np.cos(2 * np.pi * x3))
    problem = make_family_problem(base, (cfg["grid.fiber"],) * 2, density=density,
                                  area=cfg["model.area"], points=[0.5 + 0.5j],
                                  schedule=family_schedule(cfg["family.t_min"],
                                                           cfg["family.per_decade"]))
    sol = solve_family(problem)
    names = ["t", "class_volume", "iterations", "residual", "krylov_iterations", "mass_error",
             "normalization", "fiber_norm"]
    write_csv(out / "family.csv", names, [[getattr(leg, n) for n in names] for leg in sol.legs],
              cfg.hash())
    write_snapshot(ScalarField(total, sol.legs[-1].phi), out / "phi_tmin.krfg")
    lc = limit_check(sol)
    summary = {"limit_residual": lc.limit_residual, "wp_residual": lc.wp_residual,
               "t_min": sol.legs[-1].t}
    checks = {"mass_identity": float(np.max(sol.column("mass_error"))) <= 1e-10,
              "normalization": float(np.max(np.abs(sol.column("normalization")))) <= 1e-12}
    if sol.legs[-1].t <= 1e-3:
        checks["limit_residual"] = lc.limit_residual <= 1e-3
    return ["family.csv", "phi_tmin.krfg"], summary, checks


def run_density_fit(cfg, out: Path, snapshot_every=None):
    from .fibration import model_density
    from .semiflat import fit_singular_exponent, radial_shells

    model = _model(cfg)
    F = model_density(model, _annulus(cfg), cfg["model.area"])
    fit = fit_singular_exponent(F, r_max=0.5)
    r, fbar = radial_shells(F, r_max=0.5)
    write_csv(out / "shells.csv", ["r", "mean_density"], np.column_stack([r, fbar]), cfg.hash())
    summary = {"exponent": fit.exponent, "expected": model.expected_exponent,
               "log_flag": fit.log_flag, "fit_residual": fit.fit_residual}
    checks = {"exponent": abs(fit.exponent - model.expected_exponent) <= 0.05,
              "log_factor": fit.log_flag == model.has_log}
    return ["shells.csv"], summary, checks


def run_wp_check(cfg, out: Path, snapshot_every=None):
    from .fibration import FibrationConfig, period_field
    from .grid import base_form
    from .weil_petersson import exact_wp, hcan_curvature_check, hcan_norm

    model = _model(cfg)
    rows = []
    grid = _annulus(cfg)
    for level in range(2):
        y, tag = period_field(model, grid)
        fc = FibrationConfig(grid, y, cfg["model.area"], base_form(grid, 1.0), monodromy=tag)
        sample = hcan_norm(fc)
        sample.exact_wp = exact_wp(model, grid)
        rows.append([level, grid.n1, hcan_curvature_check(sample)])
        grid = grid.refined(2)
    write_csv(out / "wp.csv", ["level", "radial_points", "residual"], rows, cfg.hash())
    ratio = rows[0][2] / rows[1][2] if rows[1][2] > 0 else float("inf")
    summary = {"residuals": [r[2] for r in rows], "refinement_ratio": ratio}
    checks = {"decreases": ratio >= 3.0}
    return ["wp.csv"], summary, checks


def run_schwarz_check(cfg, out: Path, snapshot_every=None):
    from .flow import negative_patch, reference_flow_problem, run_flow, schwarz_bound_check
    from .grid import BaseGrid

    base = BaseGrid("torus", cfg["grid.base"], cfg["grid.base"])
    chi_b, mask, K = negative_patch(base, cfg["schwarz.beta"], cfg["schwarz.patch"])
    problem = reference_flow_problem(
        cfg["grid.base"], cfg["grid.fiber"], cfg["model.amplitude"], cfg["model.eps_h"],
        cfg["flow.seed_kind"], cfg["flow.seed_amplitude"], cfg["experiment.seed"],
        chi_b=chi_b, schwarz_mask=mask, dt=cfg["flow.dt"], t_max=cfg["flow.t_max"],
        monitor_every=cfg["flow.monitor_every"], scheme=cfg["flow.scheme"])
    series, _ = run_flow(problem)
    t = series.column("t")
    u = series.column("schwarz_u_sup")
    C, dominates, margin = schwarz_bound_check(t, u, K)
    denom = K - C * np.exp(-t)
    bound = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), np.inf)
    write_csv(out / "schwarz.csv", ["t", "u_sup", "bound", "residual"],
              np.column_stack([t, u, bound, series.column("schwarz")]), cfg.hash())
    files = ["schwarz.csv"] + [p.name for p in emit_series(series, out / "series.csv", cfg.hash())]
    residual = float(np.max(series.column("schwarz")))
    summary = {"K": K, "C": C, "margin": margin, "max_residual": residual}
    checks = {"bound_dominates": dominates,
              "residual_nonpositive": residual <= 5e-3 * float(np.max(np.abs(u)))}
    return files, summary, checks


EXPERIMENTS = {
    "solve-base": run_solve_base,
    "run-flow": run_flow_experiment,
    "k3-family": run_k3_family,
    "density-fit": run_density_fit,
    "wp-check": run_wp_check,
    "schwarz-check": run_schwarz_check,
}


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def run_experiment(cfg: ExperimentConfig, out: Path, snapshot_every=None) -> dict:
    """Run ``cfg`` into ``out``; writes ``manifest.json`` and returns it."""
    out.mkdir(parents=True, exist_ok=True)
    files, summary, checks = EXPERIMENTS[cfg.kind](cfg, out, snapshot_every)
    (out / "config.txt").write_text(cfg.canonical())
    manifest = {"experiment": cfg.kind, "config_hash": cfg.hash(),
                "outputs": sorted(files) + ["config.txt"], "summary": _jsonable(summary),
                "checks": _jsonable(checks)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="krflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENT_KINDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, help="sectioned key = value config file")
        p.add_argument("--out", type=Path, help="output directory (overrides experiment.out)")
        p.add_argument("--grid", type=int, help="base resolution override (grid.base)")
        p.add_argument("--seed", type=int, help="seed override (experiment.seed)")
        p.add_argument("--snapshot-every", type=float, default=None,
                       help="write potential snapshots every T time units (run-flow)")
    return parser


def load_config(args) -> ExperimentConfig:
    text = args.config.read_text(encoding="utf-8") if args.config else ""
    cfg = parse_config(text, defaults={"experiment.kind": args.command})
    if cfg.kind != args.command:
        raise ConfigError([f"config experiment.kind = {cfg.kind} does not match subcommand "
                           f"{args.command}"])
    overrides = {}
    if args.grid is not None:
        overrides["grid__base"] = args.grid
    if args.seed is not None:
        overrides["experiment__seed"] = args.seed
    if args.snapshot_every is not None and not args.snapshot_every > 0:
        raise ConfigError(["--snapshot-every must be > 0"])
    return cfg.with_overrides(**overrides) if overrides else cfg


def main(argv=None) -> int:
    from .flow import FlowAbort
    from .gke import NewtonDivergence
    from .grid import PositivityError

    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (ConfigError, OSError, UnicodeDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out if args.out is not None else Path(cfg["experiment.out"])
    try:
        manifest = run_experiment(cfg, out, args.snapshot_every)
    except (NewtonDivergence, FlowAbort, PositivityError, InvariantFailure) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        # numerics rejected the setup at run time, e.g. too few radial shells to fit
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    failed = [k for k, ok in manifest["checks"].items() if not ok]
    for k, ok in manifest["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {k}")
    print(f"outputs in {out} (config {manifest['config_hash']})")
    return EXIT_SOLVER if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
