"""Command line entry point.

Usage::

    fraccontrol solve-state   --config run.cfg [--output DIR]
    fraccontrol solve-control --config run.cfg [--output DIR]
    fraccontrol convergence   --config run.cfg [--output DIR]
    fraccontrol check         [--config run.cfg] [--output DIR] [--quick]

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, StudyConfig, load_config


class NumericalFailure(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"numerical failure in stage '{stage}': {message}")
        self.stage = stage


def _versions():
    import matplotlib
    import scipy

    return {"fraccontrol": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


def write_manifest(outdir, command, config, files, extra=None):
    """``manifest.json`` with the resolved config, versions, seed and the
    files written."""
    data = {"command": command, "config": config.to_text() if config else None,
            "seed": config.seed if config else 42, "versions": _versions(),
            "files": sorted(str(Path(f).name) for f in files)}
    if extra:
        data.update(extra)
    path = Path(outdir) / "manifest.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _stage(name, fn, *args, **kw):
    from .analysis import StageError

    try:
        return fn(*args, **kw)
    except StageError as err:
        raise NumericalFailure(err.stage, str(err)) from err
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError, ValueError) as err:
        raise NumericalFailure(name, f"{type(err).__name__}: {err}") from err


def _single_setup(cfg):
    from .analysis import make_problem, predicted_rates
    from .assembly import KernelParams, QuadConfig, fractional_stiffness, mass_matrix
    from .mesh import Disc, Interval, build_mesh
    from .optimize import ControlProblem
    from .timestepping import TimeGrid

    s, h = cfg.s_values[0], cfg.levels[0]
    spec, triple = make_problem(cfg.problem, s, cfg.mu, cfg.a, cfg.b, cfg.T)
    domain = Interval() if cfg.dim == 1 else Disc()
    mesh = _stage("mesh", build_mesh, domain, h, kappa=cfg.kappa)
    gamma, _ = predicted_rates(s, cfg.gamma_eps)
    h_tau = h**cfg.kappa if cfg.tau_rule == "h_kappa" else h
    grid = TimeGrid(cfg.T, cfg.k_steps[0]) if cfg.k_steps else TimeGrid.from_tau(cfg.T, h_tau**gamma)
    qc = QuadConfig(cfg.order_regular, cfg.order_singular, cfg.near_threshold)
    K = _stage("assembly", fractional_stiffness, mesh, KernelParams(mesh.dim, s), qc)
    prob = _stage("setup", ControlProblem, spec, mesh, grid, K=K, M=mass_matrix(mesh), solver=cfg.solver,
                  tol=cfg.cg_tol, ud_rule=cfg.ud_rule)
    return spec, triple, mesh, grid, prob


def cmd_solve_state(cfg, outdir, out):
    """Forward solve with the projected exact control (manufactured
    problems) or zero control."""
    from .analysis import l2q_error
    from .mesh import save_mesh
    from .optimize import project_control
    from .report import plot_space_time

    spec, triple, mesh, grid, prob = _single_setup(cfg)
    if triple is not None:
        Z = project_control(triple.control, mesh, grid).values
    else:
        Z = np.zeros((grid.K_steps, mesh.n_cells))
    U = _stage("forward", prob.state, Z)
    files = [outdir / "state.csv", outdir / "mesh.txt"]
    U.dump_csv(files[0])
    save_mesh(mesh, files[1])
    extra = {}
    if triple is not None:
        extra["err_state_l2q"] = _stage("errors", l2q_error, triple.state, U, mesh)
        out(f"state L2(Q) error vs exact: {extra['err_state_l2q']:.6e}")
    if cfg.figures:
        files.append(plot_space_time(U.values, mesh, grid, outdir / "state.png", "state"))
    out(f"state: {grid.K_steps} steps, {mesh.n_dofs} dofs -> {files[0]}")
    return files, extra


def cmd_solve_control(cfg, outdir, out):
    from .analysis import l2q_error
    from .mesh import save_mesh
    from .optimize import solve_control_bfgs
    from .report import plot_history, plot_space_time

    spec, triple, mesh, grid, prob = _single_setup(cfg)
    Z, U, P, rep = _stage("optimize", solve_control_bfgs, spec, mesh, grid, tol=cfg.opt_tol,
                          max_iter=cfg.max_iter, problem=prob)
    files = [outdir / n for n in ("control.csv", "state.csv", "adjoint.csv", "optimize_log.csv", "mesh.txt")]
    Z.dump_csv(files[0])
    U.dump_csv(files[1])
    P.dump_csv(files[2])
    rep.dump_csv(files[3])
    save_mesh(mesh, files[4])
    extra = {"iterations": rep.iterations, "objective": rep.objective, "residual": rep.residual,
             "converged": rep.converged}
    if triple is not None:
        extra["err_state_l2q"] = _stage("errors", l2q_error, triple.state, U, mesh)
        extra["err_control_l2q"] = _stage("errors", l2q_error, triple.control, Z)
    if cfg.figures:
        files.append(plot_space_time(Z.values, mesh, grid, outdir / "control.png", "control", kind="cell"))
        files.append(plot_space_time(U.values, mesh, grid, outdir / "state.png", "state"))
        files.append(plot_history(rep, outdir / "optimize_history.png"))
    out(f"optimizer: {rep.iterations} iterations, J = {rep.objective:.10e}, "
        f"residual = {rep.residual:.3e}, converged = {rep.converged}")
    for k in ("err_state_l2q", "err_control_l2q"):
        if k in extra:
            out(f"{k}: {extra[k]:.6e}")
    if not rep.converged:
        raise NumericalFailure("optimize", f"no convergence after {rep.iterations} iterations "
                               f"(residual {rep.residual:.3e})")
    return files, extra


def cmd_convergence(cfg, outdir, out):
    from .analysis import run_convergence_study
    from .report import plot_convergence, rate_table, write_plot_data

    result = _stage("study", run_convergence_study, cfg, log=out)
    files = [outdir / "study.csv", outdir / "study_details.csv"]
    result.dump_csv(files[0])
    result.dump_details(files[1])
    files += write_plot_data(result, outdir / "plotdata")
    if cfg.figures:
        files.append(plot_convergence(result, outdir / "convergence.png"))
    table = rate_table(result)
    (outdir / "eoc.txt").write_text(table + "\n")
    files.append(outdir / "eoc.txt")
    out("EOC summary:")
    out(table or "(fewer than two successful levels)")
    failed = [r for r in result.records if r.status.startswith("failed")]
    if failed and len(failed) == len(result.records):
        raise NumericalFailure("study", failed[0].status)
    return files, {"failed_levels": len(failed)}


def run_checks(seed=42, quick=False, out=print):
    """Oracle equivalence, gradient, duality, stability and optimality
    checks; returns ``[(name, passed, detail)]``."""
    from .analysis import make_problem
    from .assembly import KernelParams, fractional_stiffness, mass_matrix
    from .checks import (brute_force_stiffness_1d, duality_gap, exact_stiffness_1d, gradient_check,
                         line_stiffness_2d, stability_ratios)
    from .mesh import Disc, Interval, build_mesh
    from .optimize import ControlProblem, solve_control_bfgs
    from .timestepping import TimeGrid

    rng = np.random.default_rng(seed)
    results = []

    def record(name, ok, detail):
        results.append((name, bool(ok), detail))
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    def rel(K, E):
        return float(np.max(np.abs(K - E) / np.abs(E).max(axis=1, keepdims=True)))

    mesh = build_mesh(Interval(-1.0, 1.0), 0.5)
    E = brute_force_stiffness_1d(mesh, 0.5)
    err = rel(fractional_stiffness(mesh, KernelParams(1, 0.5)).toarray(), E)
    record("assembly 1D vs brute force (s=0.5, 4 cells)", err <= 1e-4, f"max rel {err:.2e}")
    worst = 0.0
    for s in (0.25, 0.5, 0.75):
        for kappa in (1.0, 2.0):
            m = build_mesh(Interval(-1.0, 1.0), 0.25, kappa=kappa)
            worst = max(worst, rel(fractional_stiffness(m, KernelParams(1, s)).toarray(),
                                   exact_stiffness_1d(m, s)))
    record("assembly 1D vs closed form (8 cells, graded)", worst <= 1e-4, f"max rel {worst:.2e}")
    if not quick:
        disc = build_mesh(Disc(), 0.5, sectors=4)
        err = rel(fractional_stiffness(disc, KernelParams(2, 0.75)).toarray(), line_stiffness_2d(disc, 0.75))
        record(f"assembly 2D vs line oracle (s=0.75, {disc.n_cells} cells)", err <= 1e-3, f"max rel {err:.2e}")

    for s in (0.25, 0.75):
        spec, _ = make_problem("manufactured-1d", s, 0.1, -0.5, 0.5, 1.0)
        m = build_mesh(Interval(), 2 / 64)
        prob = ControlProblem(spec, m, TimeGrid(1.0, 32), M=mass_matrix(m))
        gaps = gradient_check(prob, rng, n_pairs=3 if quick else 10)
        record(f"gradient vs finite differences (s={s})", gaps.max() <= 1e-6, f"max rel {gaps.max():.2e}")

    spec, _ = make_problem("manufactured-1d", 0.5, 0.1, -0.5, 0.5, 1.0)
    m = build_mesh(Interval(), 2 / 32)
    prob = ControlProblem(spec, m, TimeGrid(1.0, 16))
    gap = duality_gap(prob, rng)
    record("discrete duality identity", gap <= 1e-8, f"rel gap {gap:.2e}")

    ratios = stability_ratios(0.5, (32, 64, 128), 10.0, rng)
    growth = ratios.max() / ratios.min()
    record("unconditional stability (tau = 10 h)", growth <= 1.1,
           f"ratios {', '.join(f'{r:.3f}' for r in ratios)}")

    Z, U, P, rep = solve_control_bfgs(spec, m, prob.grid, problem=prob)
    r = prob.residual(Z)
    bound = 1e-6 * (1 + Z.norm())
    record("optimality fixed point", r <= bound, f"residual {r:.2e} (bound {bound:.2e})")
    return results


def cmd_check(cfg, outdir, out, quick=False):
    results = run_checks(cfg.seed if cfg else 42, quick=quick, out=out)
    path = outdir / "checks.csv"
    with path.open("w") as fh:
        fh.write("check,passed,detail\n")
        for name, ok, detail in results:
            fh.write(f"{name.replace(',', ';')},{int(ok)},{detail.replace(',', ';')}\n")
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise NumericalFailure("check", f"{len(failed)} check(s) failed: {'; '.join(failed)}")
    return [path], {"checks": len(results)}


_COMMANDS = {"solve-state": cmd_solve_state, "solve-control": cmd_solve_control,
             "convergence": cmd_convergence}


def build_parser():
    p = argparse.ArgumentParser(prog="fraccontrol", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("solve-state", "solve-control", "convergence"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="flat key = value configuration file")
        sp.add_argument("--output", help="output directory (overrides output_dir)")
    sp = sub.add_parser("check")
    sp.add_argument("--config", help="optional configuration (seed, output_dir)")
    sp.add_argument("--output", help="output directory")
    sp.add_argument("--quick", action="store_true", help="skip the 2D oracle and use fewer samples")
    return p


def run_cli(argv=None, out=print, err=None):
    """Run a subcommand; returns the exit code."""
    err = err or (lambda msg: print(msg, file=sys.stderr))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is not None and args.command != "check" and cfg.mode != args.command:
            raise ConfigError(f"field 'mode': config says {cfg.mode!r} but the command is {args.command!r}")
    except ConfigError as exc:
        err(f"config error: {exc}")
        return 1
    outdir = Path(args.output or (cfg.output_dir if cfg else "out-check"))
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        if args.command == "check":
            files, extra = cmd_check(cfg, outdir, out, quick=args.quick)
        else:
            files, extra = _COMMANDS[args.command](cfg, outdir, out)
    except NumericalFailure as exc:
        err(str(exc))
        write_manifest(outdir, args.command, cfg, [], {"status": "failed", "stage": exc.stage})
        return 2
    extra = dict(extra, status="ok", walltime_s=round(time.perf_counter() - t0, 3))
    write_manifest(outdir, args.command, cfg, files, extra)
    out(f"wrote {len(files) + 1} files to {outdir}")
    return 0


def main(argv=None):
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
