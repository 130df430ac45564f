"""Log-utility consumption with a defaultable wealth process.

Wealth follows ``dS = S_-[(alpha - pi) dt + beta dW + mu dH]`` and the
performance functional is ``E[int_0^T log(S_t pi_t) dt + theta log S_T]``.
The optimal consumption rate is ``1 / (E[theta | G_t] + T - t)``, which does
not involve the market parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .paths import IntensitySpec, KnotState, PathBatch
from .regression import KnotFit, RegressionBasis, fit_knot
from .sde import ControlProcess, explicit_wealth_solution, wealth_coefficients
from .smp import (ControlProblem, Perturbation, check_sufficient, directional_derivative,
                  estimate_J, forward_solve, solve_adjoint)

__all__ = [
    "ThetaSpec",
    "WealthModel",
    "OptimalControlPath",
    "log_problem",
    "closed_form_pi_hat",
    "adjoint_closed_form_check",
    "certify_optimality",
    "SWEEP_DELTAS",
]

SWEEP_DELTAS = (-0.5, -0.2, -0.1, -0.05, 0.05, 0.1, 0.2, 0.5)
GLS_PASSES = 2


@dataclass(frozen=True)
class ThetaSpec:
    """Terminal utility weight.

    ``constant``: ``theta = param``; ``lognormal``: ``exp(param W_T - param^2 T / 2)``;
    ``default_linked``: ``1 + param H_T`` (needs ``param > -1``).
    """

    kind: str = "constant"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "lognormal", "default_linked"):
            raise InvalidInputError(f"unknown theta family {self.kind!r}")
        if self.kind == "constant" and self.param <= 0:
            raise InvalidInputError("a constant theta must be positive")
        if self.kind == "default_linked" and self.param <= -1:
            raise InvalidInputError("1 + b H_T needs b > -1 to stay positive")

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def of_state(self, state: KnotState, T: float) -> np.ndarray:
        """``theta`` from the terminal state (``W_T``, ``H_T``)."""
        W, H = np.asarray(state.W, dtype=float), np.asarray(state.H, dtype=float)
        a = self.param
        if self.kind == "constant":
            return np.full(W.shape, a)
        if self.kind == "lognormal":
            return np.exp(a * W - 0.5 * a * a * T)
        return 1.0 + a * H

    def value(self, paths: PathBatch) -> np.ndarray:
        return self.of_state(paths.base_state(paths.base.n_steps), paths.T)

    def conditional_of_state(self, state: KnotState, T: float, intensity: IntensitySpec) -> np.ndarray:
        """Exact ``E[theta | G_t]`` at a state."""
        W, H = np.asarray(state.W, dtype=float), np.asarray(state.H, dtype=float)
        t = np.broadcast_to(np.asarray(state.t, dtype=float), W.shape)
        a = self.param
        if self.kind == "constant":
            return np.full(W.shape, a)
        if self.kind == "lognormal":
            return np.exp(a * W - 0.5 * a * a * t)
        surv = np.exp(-(intensity.cumulative(T) - intensity.cumulative(t)))
        return np.where(H > 0, 1.0 + a, 1.0 + a * (1.0 - surv))

    def conditional(self, paths: PathBatch) -> np.ndarray:
        """Exact ``E[theta | G_t]`` at every base knot, shape ``(n_paths, n_steps + 1)``."""
        return np.column_stack([
            self.conditional_of_state(paths.base_state(k), paths.T, paths.intensity)
            for k in range(paths.base.n_steps + 1)])


@dataclass(frozen=True)
class WealthModel:
    alpha: object = 0.05
    beta: object = 0.2
    mu: float = -0.5
    intensity: IntensitySpec = field(default_factory=lambda: IntensitySpec.constant(0.3))
    S0: float = 1.0
    theta: ThetaSpec = field(default_factory=ThetaSpec)
    T: float = 1.0

    def __post_init__(self):
        if self.S0 <= 0:
            raise InvalidInputError("S0 must be positive")
        if self.mu < -1:
            raise InvalidInputError("mu must be >= -1")
        if self.T <= 0:
            raise InvalidInputError("T must be positive")

    def wealth(self, control, paths: PathBatch):
        return explicit_wealth_solution(self.alpha, self.beta, self.mu, control, paths, self.S0)


def log_problem(model: WealthModel, v_bounds=(0.05, 3.0), u_max: float = 10.0) -> ControlProblem:
    """The control problem with the exact log-step wealth scheme as forward solver."""
    theta, T = model.theta, model.T
    coeffs = wealth_coefficients(model.alpha, model.beta, model.mu, u_max=u_max)
    return ControlProblem(
        coeffs=coeffs,
        h=lambda t, x, u: np.log(x * u),
        dh_dx=lambda t, x, u: 1.0 / x + 0.0 * u,
        dh_du=lambda t, x, u: 1.0 / u + 0.0 * x,
        g=lambda x, s: theta.of_state(s, T) * np.log(x) if s is not None else np.log(x),
        dg=lambda x, s: theta.of_state(s, T) / x if s is not None else 1.0 / x,
        x0=model.S0,
        intensity=model.intensity,
        value_set=(1e-8, np.inf),
        v_bounds=tuple(v_bounds),
        forward=lambda control, paths: model.wealth(control, paths),
    )


@dataclass
class OptimalControlPath:
    """``pi_hat`` and the estimate of ``E[theta | G_t]`` at base knots (rows are paths)."""

    paths: PathBatch
    pi_hat: np.ndarray
    conditional_theta: np.ndarray
    theta: ThetaSpec
    fits: dict = field(default_factory=dict, repr=False)

    def _fit_for(self, k: int, stratum: int) -> KnotFit:
        N = self.paths.base.n_steps
        order = sorted(range(1, N + 1), key=lambda j: (abs(j - k), -j))
        for j in order:
            f = self.fits.get(j)
            if f is not None and (f.has(stratum) or f.has(-1)):
                return f
        raise InvalidInputError(f"no regression fit available near knot {k} for stratum {stratum}")

    def _at_slot(self, state: KnotState, kb: np.ndarray) -> np.ndarray:
        T = self.paths.T
        if self.theta.is_constant:
            cond = np.full(np.shape(state.W), self.theta.param)
        else:
            cond = np.empty(np.shape(state.W))
            strat = (np.asarray(state.H) > 0).astype(int)
            for k in np.unique(kb):
                for s in (0, 1):
                    rows = (kb == k) & (strat == s)
                    if rows.any():
                        sub = KnotState(t=state.t[rows], W=state.W[rows], H=state.H[rows],
                                        tau=state.tau[rows], lam=state.lam[rows])
                        cond[rows] = self._fit_for(int(k), s).predict(sub)[:, 0]
        denom = cond + T - np.asarray(state.t)
        if np.any(denom <= 0):
            raise InvalidInputError("nonpositive conditional estimate of theta + T - t")
        return 1.0 / denom

    def control(self, value_set=(1e-8, np.inf)) -> ControlProcess:
        """Feedback form on the batch columns (default-time slots use nearby fits)."""
        p = self.paths
        knots = p.base.knots
        kidx = p.base_index_of_columns()
        rows = np.arange(p.n_paths)
        T = p.T
        theta = self.theta

        def rule(t, x, s: KnotState):
            j = s.index
            k = kidx[:, j]
            if theta.is_constant:
                return 1.0 / (theta.param + (T - np.asarray(s.t)))
            out = self.pi_hat[rows, k].copy()
            slot = p.base_col[rows, k] != j
            if slot.any():
                kb = np.where(s.t > knots[k], np.minimum(k + 1, p.base.n_steps), k)[slot]
                sub = KnotState(t=s.t[slot], W=s.W[slot], H=s.H[slot], tau=s.tau[slot],
                                lam=s.lam[slot])
                out[slot] = self._at_slot(sub, kb)
            return out

        return ControlProcess(rule, value_set, "pi_hat")


def closed_form_pi_hat(model: WealthModel, paths: PathBatch,
                       basis: RegressionBasis | None = None) -> OptimalControlPath:
    """``pi_hat_t = 1 / (E[theta | G_t] + T - t)`` with the conditional mean by regression.

    A constant ``theta`` needs no regression; at ``T`` the weight itself is used.
    The regression is feasible weighted least squares: the spread of a
    positive weight such as ``exp(W_T - T/2)`` grows with its conditional
    mean, and unweighted fits let a few extreme paths drive the estimate
    negative.
    """
    basis = basis or RegressionBasis()
    N = paths.base.n_steps
    knots = paths.base.knots
    theta = model.theta
    fits = {}
    if theta.is_constant:
        cond = np.full((paths.n_paths, N + 1), float(theta.param))
    else:
        th = theta.value(paths)
        if np.any(th <= 0) or not np.all(np.isfinite(th)):
            raise InvalidInputError("theta must be positive and finite on every path")
        cond = np.empty((paths.n_paths, N + 1))
        cond[:, 0] = th.mean()
        floor = 1e-3 * float(th.mean())
        for k in range(1, N + 1):
            state = paths.base_state(k)
            fit, vals = fit_knot(basis, state, th, k)
            # the noise of theta scales with its conditional mean: reweight by 1 / fit^2
            for _ in range(GLS_PASSES):
                fit, vals = fit_knot(basis, state, th, k, weights=np.maximum(vals, floor) ** -2)
            fits[k] = fit
            cond[:, k] = th if k == N else vals
    denom = cond + (paths.T - knots)[None, :]
    if np.any(denom <= 0):
        bad = np.argwhere(denom <= 0)[0]
        raise InvalidInputError(f"nonpositive estimate of E[theta|G_t] + T - t at knot {bad[1]}")
    return OptimalControlPath(paths, 1.0 / denom, cond, theta, fits)


def _knot_stats(a: np.ndarray):
    n = a.shape[0]
    return a.mean(axis=0), a.std(axis=0, ddof=1) / np.sqrt(n)


def adjoint_closed_form_check(model: WealthModel, paths: PathBatch,
                              basis: RegressionBasis | None = None,
                              control: ControlProcess | None = None) -> dict:
    """Compare ``p_t S_t`` from the numerical adjoint with ``E[theta | G_t] + T - t``.

    The right side uses the exact conditional mean of the weight family.  A
    floating-point floor ``1e-9 (1 + |target|)`` covers deterministic targets.
    """
    basis = basis or RegressionBasis()
    problem = log_problem(model)
    if control is None:
        control = closed_form_pi_hat(model, paths, basis).control()
    fwd = forward_solve(problem, control, paths)
    adj = solve_adjoint(problem, fwd, basis)
    S = fwd.X_base
    pS = adj.p * S
    target = model.theta.conditional(paths) + (paths.T - paths.base.knots)[None, :]
    lm = pS.mean(axis=0)
    # the fitted means equal the means of the per-path payoffs; their spread sets the error
    _, ls = _knot_stats(adj.p_pathwise * S)
    rm, rs = _knot_stats(target)
    diff = np.abs(lm - rm)
    tol = 3.0 * np.hypot(ls, rs) + 1e-9 * (1.0 + np.abs(rm))
    theta_T = model.theta.value(paths)
    term_err = float(np.max(np.abs(pS[:, -1] - theta_T)))
    ok = bool(np.all(diff <= tol))
    worst = int(np.argmax(diff - tol))
    return {
        "knots": paths.base.knots.tolist(),
        "mean_pS": lm.tolist(),
        "mean_target": rm.tolist(),
        "abs_diff": diff.tolist(),
        "tolerance": tol.tolist(),
        "max_abs_diff": float(diff.max()),
        "worst_knot": worst,
        "worst_excess": float((diff - tol)[worst]),
        "terminal_max_error": term_err,
        "terminal_ok": term_err <= 1e-12 * max(1.0, float(np.max(np.abs(theta_T)))),
        "verdict": "PASS" if ok else "FAIL",
    }


def certify_optimality(model: WealthModel, paths: PathBatch, basis: RegressionBasis | None = None,
                       deltas=SWEEP_DELTAS, y: float = 1e-4, v_bounds=(0.05, 3.0)) -> dict:
    """Sufficient-condition check, directional derivative and a sweep over ``pi_hat (1 + delta)``.

    All runs share the paths (common random numbers).  PASS iff ``J(pi_hat)``
    is the largest value of the sweep, the sufficient check passes and the
    directional derivative vanishes within three standard errors plus the
    truncation and rounding bound of the difference quotient.
    """
    basis = basis or RegressionBasis()
    problem = log_problem(model, v_bounds)
    opt = closed_form_pi_hat(model, paths, basis)
    control = opt.control()
    fwd = forward_solve(problem, control, paths)
    adj = solve_adjoint(problem, fwd, basis)
    J0 = estimate_J(problem, control, paths, forward=fwd)
    sweep = []
    for d in deltas:
        Jd = estimate_J(problem, control.scaled(1.0 + d), paths)
        diff = Jd.values - J0.values
        sweep.append({"delta": float(d), "J": Jd.mean, "J_se": Jd.se,
                      "J_minus_J_hat": float(diff.mean()),
                      "diff_se": float(diff.std(ddof=1) / np.sqrt(diff.size))})
    sweep_ok = all(s["J_minus_J_hat"] <= 0.0 for s in sweep)
    dd = directional_derivative(problem, control, Perturbation.constant(1.0), paths, y=y,
                                forward=fwd, adjoint=adj)
    floor = dd.fd_error_floor
    fd_zero = abs(dd.fd_value) <= 3 * dd.fd_se + floor
    ham_zero = abs(dd.hamiltonian_value) <= 3 * dd.hamiltonian_se + floor
    suff = check_sufficient(problem, control, paths, forward=fwd, adjoint=adj)
    ok = sweep_ok and fd_zero and ham_zero and suff["verdict"] == "PASS"
    return {
        "J_hat": J0.mean,
        "J_hat_se": J0.se,
        "pi_hat_0": float(opt.pi_hat[:, 0].mean()),
        "sweep": sweep,
        "sweep_ok": sweep_ok,
        "directional_derivative": dd.to_dict(),
        "derivative_floor": floor,
        "derivative_vanishes": bool(fd_zero and ham_zero),
        "sufficient": suff,
        "verdict": "PASS" if ok else "FAIL",
    }
