"""Command-line entry point: ``smpdefault <subcommand> [--config F] [--seed N] [--out DIR] ...``.

Every subcommand writes ``report.json`` (deterministic for a given config and
seed) and ``timing.json`` (wall-clock only) to the output directory, plus
CSV artifacts.  Exit status: 0 if every verdict is PASS, 1 on a FAIL verdict
or a numerical failure (the report is still written), 2 on a configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .acceptance import CRITERIA, CheckResult, run_criterion
from .bsde import (bsde_residual, contraction_diagnostic, solve_linear_explicit,
                   solve_regression_backward)
from .config import ExperimentConfig, load_config
from .errors import ConfigError, SmpDefaultError
from .logutility import (ThetaSpec, WealthModel, adjoint_closed_form_check, certify_optimality,
                         closed_form_pi_hat, log_problem)
from .paths import TimeGrid, batch_quadratic_variation_ok, build_filtration_batch
from .sde import (ControlProcess, PicardConfig, euler_simulate, explicit_wealth_solution,
                  picard_solve, wealth_coefficients)
from .smp import (Perturbation, adjoint_general_spec, assemble_adjoint,
                  check_hamiltonian_partials, check_sufficient, directional_derivative,
                  forward_solve, solve_adjoint)

__all__ = ["main", "run", "SUBCOMMANDS"]


# ---------------------------------------------------------------- helpers


def _plain(x):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to None, tuples to lists."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _dump(obj, path: Path) -> None:
    text = json.dumps(_plain(obj), indent=2, sort_keys=False, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _model(cfg: ExperimentConfig) -> WealthModel:
    m = cfg.model
    return WealthModel(alpha=m.alpha, beta=m.beta, mu=m.mu, intensity=m.intensity_spec(),
                       S0=m.S0, theta=ThetaSpec(m.theta, m.theta_param), T=m.T)


def _paths(cfg: ExperimentConfig):
    n = cfg.numerics
    return build_filtration_batch(TimeGrid.uniform(cfg.model.T, n.n_steps),
                                  cfg.model.intensity_spec(), n.seed, n.n_paths)


def _check(name, estimate, se, tolerance, ok, details=None) -> CheckResult:
    return CheckResult(0, name, float(estimate), float(se), float(tolerance),
                       "PASS" if ok else "FAIL", details or {})


def _se(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(a.std(ddof=1) / np.sqrt(a.size))


def _control(cfg: ExperimentConfig, model: WealthModel, paths, basis):
    if cfg.run.control == "pi_hat":
        return closed_form_pi_hat(model, paths, basis).control()
    return ControlProcess.constant(cfg.model.control, (1e-8, np.inf))


def _write_filtration_csv(paths, n: int, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path", "knot", "dW", "H", "M", "lambda_G"])
    for i in range(min(n, paths.n_paths)):
        fp = paths.path(i)
        dw = np.concatenate([[0.0], fp.dW])
        for row in zip(fp.grid.knots, dw, fp.H, fp.M, fp.lambda_G):
            w.writerow([i] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- subcommands


def cmd_simulate_sde(cfg: ExperimentConfig, out: Path):
    m, r = cfg.model, cfg.run
    paths = _paths(cfg)
    coeffs = wealth_coefficients(m.alpha, m.beta, m.mu, u_max=m.u_max)
    control = ControlProcess.constant(m.control)
    checks, details = [], {}
    if r.scheme == "euler":
        batch = euler_simulate(coeffs, control, paths, m.S0, form=r.form)
        other = euler_simulate(coeffs, control, paths, m.S0, form="dM" if r.form == "dH" else "dH")
        err = float(np.max(np.abs(batch.X - other.X)))
        checks.append(_check("dH_dM_equivalence", err, 0.0, 1e-12, err <= 1e-12))
    elif r.scheme == "picard":
        batch, rep = picard_solve(coeffs, control, paths, m.S0,
                                  PicardConfig(tol=cfg.numerics.picard_tol))
        ratios = np.asarray(rep.ratios)
        ok = ratios.size < 2 or bool(np.all(ratios[1:] < 1.0))
        checks.append(_check("picard_contraction", float(ratios[1:].max()) if ratios.size > 1 else 0.0,
                             0.0, 1.0, ok, {"norms": rep.norms, "ratios": rep.ratios}))
    else:
        batch = explicit_wealth_solution(m.alpha, m.beta, m.mu, m.control, paths, m.S0)
    if r.scheme != "exact":
        exact = explicit_wealth_solution(m.alpha, m.beta, m.mu, m.control, paths, m.S0)
        details["max_abs_error_vs_closed_form"] = float(np.max(np.abs(batch.X - exact.X)))
    qv = batch_quadratic_variation_ok(paths)
    checks.append(_check("quadratic_variation", float(qv.mean()), 0.0, 0.0, bool(qv.all())))
    XT = batch.X_T
    checks.append(_check("terminal_state_finite", float(XT.mean()), _se(XT), 0.0,
                         bool(np.all(np.isfinite(XT)))))
    details.update({"scheme": batch.scheme, "n_defaulted": int(paths.defaulted.sum()),
                    "n_clamped": int(batch.n_clamped)})
    with open(out / "sde_paths.csv", "w", newline="") as fh:
        batch.to_csv(fh, max_paths=cfg.output.csv_paths)
    with open(out / "filtration_paths.csv", "w", newline="") as fh:
        _write_filtration_csv(paths, cfg.output.csv_paths, fh)
    return checks, details, ["sde_paths.csv", "filtration_paths.csv"]


def cmd_solve_bsde(cfg: ExperimentConfig, out: Path):
    model = _model(cfg)
    paths = _paths(cfg)
    basis = cfg.numerics.regression_basis()
    problem = log_problem(model, cfg.run.v_bounds, cfg.model.u_max)
    control = _control(cfg, model, paths, basis)
    fwd = forward_solve(problem, control, paths)
    lin = assemble_adjoint(problem, fwd)
    gen = adjoint_general_spec(problem, fwd)
    solver = cfg.run.bsde_solver
    explicit = solve_linear_explicit(lin, paths, basis, X=fwd.X)
    if solver == "explicit":
        sol = explicit
        sol.residual_by_knot = bsde_residual(sol, gen, paths, per_knot=True)
    else:
        sol = solve_regression_backward(gen, paths, basis, scheme=solver.split("-")[1],
                                        inner_tol=cfg.numerics.inner_tol)
    checks = []
    term = float(np.max(np.abs(sol.Y[:, -1] - gen.xi(paths))))
    checks.append(_check("terminal_condition", term, 0.0, 0.0, term == 0.0))
    lip = gen.check_lipschitz(paths)
    checks.append(_check("generator_lipschitz", lip["max_partial"], 0.0, lip["lipschitz_const"],
                         lip["ok"]))
    integ = gen.check_integrability(paths)
    checks.append(_check("generator_integrability", integ["value"], 0.0, 0.0, integ["ok"]))
    if solver != "explicit":
        se = float(np.hypot(sol.Y0_se, explicit.Y0_se))
        diff = abs(sol.Y0 - explicit.Y0)
        # first-order time-discretization bias, estimated by step doubling
        bias = 0.0
        if paths.base.n_steps % 2 == 0:
            coarse = paths.coarsen(2)
            cfwd = forward_solve(problem, control, coarse)
            csol = solve_regression_backward(adjoint_general_spec(problem, cfwd), coarse, basis,
                                             scheme=solver.split("-")[1],
                                             inner_tol=cfg.numerics.inner_tol)
            bias = abs(sol.Y0 - csol.Y0)
        tol = 3 * se + bias
        checks.append(_check("p0_vs_explicit_formula", sol.Y0, se, tol, diff <= tol,
                             {"p0_explicit": explicit.Y0, "abs_diff": diff,
                              "step_doubling_bias": bias}))
        rep = contraction_diagnostic(gen, paths, basis, rtol=cfg.numerics.contraction_rtol)
        ratios = np.asarray(rep.ratios)
        checks.append(_check("contraction", float(ratios.max()) if ratios.size else 0.0, 0.0, 1.0,
                             bool(np.all(ratios < 1.0)), rep.to_dict()))
    resid = bsde_residual(sol, gen, paths)
    details = {"solver": solver, "p0": sol.Y0, "p0_se": sol.Y0_se, "residual_rms": resid,
               "control": control.name}
    with open(out / "bsde_solution.csv", "w", newline="") as fh:
        sol.to_csv(fh)
    return checks, details, ["bsde_solution.csv"]


def cmd_verify_smp(cfg: ExperimentConfig, out: Path):
    model = _model(cfg)
    paths = _paths(cfg)
    basis = cfg.numerics.regression_basis()
    problem = log_problem(model, cfg.run.v_bounds, cfg.model.u_max)
    control = _control(cfg, model, paths, basis)
    fwd = forward_solve(problem, control, paths)
    adj = solve_adjoint(problem, fwd, basis)
    checks = []
    hp = check_hamiltonian_partials(problem, seed=cfg.numerics.seed, T=model.T)
    checks.append(_check("hamiltonian_partials", max(hp["dH_dx"], hp["dH_du"]), 0.0, 1e-5,
                         hp["ok"], hp))
    term_ok = adj.terminal_exact(problem, fwd)
    checks.append(_check("adjoint_terminal_condition", 0.0, 0.0, 0.0, term_ok))
    suff = check_sufficient(problem, control, paths, v_bounds=cfg.run.v_bounds,
                            seed=cfg.numerics.seed, forward=fwd, adjoint=adj)
    checks.append(_check("sufficient_conditions", suff["foc_max"], suff["foc_se"],
                         3 * suff["foc_se"] + suff["foc_atol"], suff["verdict"] == "PASS", suff))
    dd = directional_derivative(problem, control, Perturbation.constant(cfg.run.perturbation), paths,
                                y=cfg.numerics.fd_step, forward=fwd, adjoint=adj)
    checks.append(_check("equivalence_principle", dd.difference, math.hypot(dd.fd_se, dd.hamiltonian_se),
                         dd.tolerance, dd.agree, dd.to_dict()))
    floor = dd.fd_error_floor
    vanish = abs(dd.fd_value) <= 3 * dd.fd_se + floor
    checks.append(_check("directional_derivative_vanishes", dd.fd_value, dd.fd_se,
                         3 * dd.fd_se + floor, vanish))
    return checks, {"control": control.name}, []


def cmd_directional_derivative(cfg: ExperimentConfig, out: Path):
    model = _model(cfg)
    paths = _paths(cfg)
    basis = cfg.numerics.regression_basis()
    problem = log_problem(model, cfg.run.v_bounds, cfg.model.u_max)
    control = _control(cfg, model, paths, basis)
    dd = directional_derivative(problem, control, Perturbation.constant(cfg.run.perturbation), paths,
                                y=cfg.numerics.fd_step, basis=basis)
    check = _check("equivalence_principle", dd.difference, math.hypot(dd.fd_se, dd.hamiltonian_se),
                   dd.tolerance, dd.agree, dd.to_dict())
    return [check], {"control": control.name, "perturbation": cfg.run.perturbation}, []


def cmd_log_utility(cfg: ExperimentConfig, out: Path):
    model = _model(cfg)
    paths = _paths(cfg)
    basis = cfg.numerics.regression_basis()
    opt = closed_form_pi_hat(model, paths, basis)
    knots = paths.base.knots
    checks = []
    if model.theta.is_constant:
        exact = 1.0 / (model.theta.param + model.T - knots)
        err = float(np.max(np.abs(opt.pi_hat - exact[None, :])))
        checks.append(_check("closed_form_pi_hat", err, 0.0, 1e-12, err <= 1e-12))
    adj = adjoint_closed_form_check(model, paths, basis)
    checks.append(_check("adjoint_closed_form", adj["worst_excess"], 0.0, 0.0,
                         adj["verdict"] == "PASS",
                         {k: v for k, v in adj.items() if k not in ("knots", "mean_pS",
                                                                    "mean_target", "abs_diff",
                                                                    "tolerance")}))
    cert = certify_optimality(model, paths, basis, deltas=cfg.run.sweep_deltas,
                              y=cfg.numerics.fd_step, v_bounds=cfg.run.v_bounds)
    dd = cert["directional_derivative"]
    checks.append(_check("optimality_certificate", dd["fd_value"], dd["fd_se"],
                         3 * dd["fd_se"] + cert["derivative_floor"], cert["verdict"] == "PASS",
                         {k: v for k, v in cert.items() if k != "sweep"}))
    pi_mean = opt.pi_hat.mean(axis=0)
    pi_se = opt.pi_hat.std(axis=0, ddof=1) / np.sqrt(paths.n_paths)
    details = {
        "pi_hat": {"t": knots, "mean": pi_mean, "se": pi_se},
        "pi_hat_t0": float(pi_mean[0]),
        "adjoint_check": {k: adj[k] for k in ("knots", "mean_pS", "mean_target", "abs_diff",
                                              "tolerance")},
        "sweep": cert["sweep"],
    }
    with open(out / "log_utility_knots.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["knot", "mean_pi_hat", "se_pi_hat", "mean_cond_theta", "mean_pS",
                    "mean_target"])
        cond = opt.conditional_theta.mean(axis=0)
        for row in zip(knots, pi_mean, pi_se, cond, adj["mean_pS"], adj["mean_target"]):
            w.writerow([repr(float(v)) for v in row])
    with open(out / "optimality_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "J", "J_se", "J_minus_J_hat", "diff_se"])
        for s in cert["sweep"]:
            w.writerow([repr(float(s[k])) for k in ("delta", "J", "J_se", "J_minus_J_hat",
                                                   "diff_se")])
    return checks, details, ["log_utility_knots.csv", "optimality_sweep.csv"]


_TIMING_KEY = "_criterion_seconds"


def _suite_checks(seed: int, only, seconds: dict | None = None) -> list:
    out = []
    for k in sorted(CRITERIA):
        if only and k not in only:
            continue
        t0 = time.perf_counter()
        out.append(run_criterion(k, seed))
        if seconds is not None:
            seconds[str(k)] = time.perf_counter() - t0
    return out


def cmd_selftest(cfg: ExperimentConfig, out: Path):
    """Criteria 1 to 13, then the whole suite again to check byte-identical output."""
    only = tuple(cfg.run.criteria)
    seed = cfg.numerics.seed
    seconds = {}
    first = _suite_checks(seed, only, seconds)
    if not only or 14 in only:
        blob1 = json.dumps(_plain([c.to_dict() for c in first]), allow_nan=False)
        second = _suite_checks(seed, only)
        blob2 = json.dumps(_plain([c.to_dict() for c in second]), allow_nan=False)
        same = blob1 == blob2
        first.append(CheckResult(14, "reproducibility", float(same), 0.0, 0.0,
                                 "PASS" if same else "FAIL",
                                 {"bytes_compared": len(blob1.encode())}))
    # wall-clock times go to timing.json, never into the report
    return first, {"criteria_run": [c.criterion for c in first], _TIMING_KEY: seconds}, []


SUBCOMMANDS = {
    "simulate-sde": cmd_simulate_sde,
    "solve-bsde": cmd_solve_bsde,
    "verify-smp": cmd_verify_smp,
    "directional-derivative": cmd_directional_derivative,
    "log-utility": cmd_log_utility,
    "selftest": cmd_selftest,
}


def _versions() -> dict:
    return {"smpdefault": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def run(subcommand: str, cfg: ExperimentConfig) -> int:
    """Run one subcommand and write its artifacts; returns the exit status."""
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"subcommand": subcommand, "seed": cfg.numerics.seed, "config": cfg.to_dict(),
              "versions": _versions()}
    t0 = time.perf_counter()
    status = 0
    timing_extra = None
    try:
        checks, details, artifacts = SUBCOMMANDS[subcommand](cfg, out)
        report["checks"] = [c.to_dict() for c in checks]
        timing_extra = details.pop(_TIMING_KEY, None)
        report["details"] = details
        report["artifacts"] = artifacts
        ok = all(c.passed for c in checks)
        report["verdict"] = "PASS" if ok else "FAIL"
        status = 0 if ok else 1
        for c in checks:
            print(c.line() if c.criterion else f"[{c.verdict}] {c.name}: estimate={c.estimate:.6g} "
                  f"se={c.se:.3g} tol={c.tolerance:.3g}")
    except (SmpDefaultError, ArithmeticError, np.linalg.LinAlgError) as exc:
        report["checks"] = []
        report["verdict"] = "FAIL"
        report["error"] = {"type": type(exc).__name__, "message": str(exc),
                           "attributes": {k: v for k, v in vars(exc).items()
                                          if isinstance(v, (int, float, str, list, type(None)))}}
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = 1
    elapsed = time.perf_counter() - t0
    _dump(report, out / "report.json")
    timing = {"subcommand": subcommand, "wall_seconds": elapsed}
    if timing_extra:
        timing["criterion_seconds"] = timing_extra
    _dump(timing, out / "timing.json")
    print(f"{report['verdict']} ({subcommand}); report written to {out / 'report.json'}")
    return status


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smpdefault",
                                description="Controlled SDEs with default: simulation, adjoint "
                                            "BSDEs and maximum-principle checks.")
    p.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    p.add_argument("--config", help="TOML experiment file (defaults: configs/default.toml values)")
    p.add_argument("--seed", type=int, help="override numerics.seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--paths", type=int, help="override numerics.n_paths")
    p.add_argument("--steps", type=int, help="override numerics.n_steps")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(seed=args.seed, n_paths=args.paths, n_steps=args.steps,
                                 out=args.out)
    except ConfigError as exc:
        where = []
        if exc.line is not None:
            where.append(f"line {exc.line}")
        if exc.field is not None:
            where.append(f"field {exc.field}")
        loc = f" ({', '.join(where)})" if where else ""
        print(f"config error{loc}: {exc}", file=sys.stderr)
        return 2
    return run(args.subcommand, cfg)


if __name__ == "__main__":
    sys.exit(main())
