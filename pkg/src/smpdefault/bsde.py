"""Backward SDEs driven by ``W`` and the default martingale ``M``.

Two solvers share the regression layer:

* :func:`solve_linear_explicit` for the linear equation
  ``dp = -(phi + (alpha - pi + lambda_G mu) p + beta q + lambda_G mu w) dt + q dW + w dM``
  with ``p_T = F``.  It uses the representation
  ``Gamma_t p_t = E[Gamma_T F + int_t^T Gamma_s phi_s ds | G_t]``, where
  ``dGamma = Gamma[(alpha - pi + lambda_G mu) dt + beta dW + mu dM]``.
* :func:`solve_regression_backward` for a Lipschitz generator, by backward
  induction on the base knots.

Coefficients are scalars, arrays on the batch columns (``(n_paths, n_cols)``)
or callables of the :class:`~smpdefault.paths.PathBatch` returning such arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import BsdeStepError, InvalidInputError, NonConvergenceError
from .paths import KnotState, PathBatch, TimeGrid
from .regression import RegressionBasis, fit_knot

__all__ = [
    "LinearBsdeSpec",
    "GammaPath",
    "GeneralBsdeSpec",
    "BsdeSolution",
    "ContractionReport",
    "simulate_gamma",
    "gamma_martingale_check",
    "solve_linear_explicit",
    "solve_regression_backward",
    "bsde_residual",
    "contraction_diagnostic",
]


def _columns(value, paths: PathBatch) -> np.ndarray:
    if callable(value):
        value = value(paths)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(paths.t.shape, float(arr))
    if arr.shape != paths.t.shape:
        raise InvalidInputError(f"coefficient shape {arr.shape} does not match batch {paths.t.shape}")
    return arr


def _terminal(value, paths: PathBatch) -> np.ndarray:
    if callable(value):
        value = value(paths)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(paths.n_paths, float(arr))
    if arr.shape != (paths.n_paths,):
        raise InvalidInputError(f"terminal value shape {arr.shape} != ({paths.n_paths},)")
    return arr


@dataclass(frozen=True)
class LinearBsdeSpec:
    """Coefficients of the linear equation; ``pi`` enters the drift as ``alpha - pi``."""

    phi: object = 0.0
    alpha: object = 0.0
    pi: object = 0.0
    mu: object = 0.0
    beta: object = 0.0
    terminal_F: object = 1.0

    def resolve(self, paths: PathBatch) -> dict:
        out = {k: _columns(getattr(self, k), paths) for k in ("phi", "alpha", "pi", "mu", "beta")}
        if np.any(out["mu"] <= -1.0):
            raise InvalidInputError("mu must stay above -1 on every path")
        out["F"] = _terminal(self.terminal_F, paths)
        return out

    def as_general(self, paths: PathBatch) -> "GeneralBsdeSpec":
        """The same equation as a generator in compensated (dM) form."""
        c = self.resolve(paths)
        base = {k: paths.at_base(c[k]) for k in ("phi", "alpha", "pi", "mu", "beta")}
        drift = base["alpha"] - base["pi"]

        def gen(s: KnotState, y, z, k):
            i = s.index
            lm = s.lam * base["mu"][:, i]
            return base["phi"][:, i] + (drift[:, i] + lm) * y + base["beta"][:, i] * z + lm * k

        lam_c = paths.intensity.bound_c
        C = float(max(np.max(np.abs(drift) + lam_c * np.abs(base["mu"])),
                      np.max(np.abs(base["beta"])), lam_c * np.max(np.abs(base["mu"]))))
        return GeneralBsdeSpec(gen, c["F"], lipschitz_const=C, form="dM")


@dataclass(frozen=True)
class GammaPath:
    grid: TimeGrid
    Gamma: np.ndarray


@dataclass(frozen=True, eq=False)
class GammaBatch:
    paths: PathBatch
    Gamma: np.ndarray
    method: str

    def path(self, i: int) -> GammaPath:
        fp = self.paths.path(i)
        cols = np.searchsorted(self.paths.t[i], fp.grid.knots, side="right") - 1
        if fp.grid.tau_index is not None:
            cols[fp.grid.tau_index] = self.paths.jump_col[i] + 1
        return GammaPath(fp.grid, self.Gamma[i, cols])


def simulate_gamma(spec: LinearBsdeSpec, paths: PathBatch, method: str = "exact") -> GammaBatch:
    """Integrating factor on the batch columns.

    ``exact``: between jumps ``exp((a - beta^2/2) dt + beta dW)`` with the
    coefficients frozen at the left column, ``a = alpha - pi``; at the default
    time a factor ``1 + mu``.  ``euler``: ``Gamma (1 + a dt + beta dW + mu dH)``,
    the Euler step of the compensated equation.
    """
    c = spec.resolve(paths)
    a = (c["alpha"] - c["pi"])[:, :-1]
    b = c["beta"][:, :-1]
    mu = c["mu"][:, :-1]
    if method == "exact":
        logstep = (a - 0.5 * b * b) * paths.dt + b * paths.dW + np.log1p(mu) * paths.dH
        G = np.exp(np.concatenate([np.zeros((paths.n_paths, 1)), np.cumsum(logstep, axis=1)], axis=1))
    elif method == "euler":
        fac = 1.0 + (a * paths.dt + mu * paths.dA) + b * paths.dW + mu * paths.dM
        G = np.concatenate([np.ones((paths.n_paths, 1)), np.cumprod(fac, axis=1)], axis=1)
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    return GammaBatch(paths, G, method)


def gamma_martingale_check(spec: LinearBsdeSpec, paths: PathBatch, method: str = "exact"):
    """Mean and standard error of ``Gamma_T exp(-int (alpha - pi + lambda_G mu) ds)``; should be 1."""
    c = spec.resolve(paths)
    G = simulate_gamma(spec, paths, method).Gamma
    a = (c["alpha"] - c["pi"])[:, :-1]
    drift = np.sum(a * paths.dt + c["mu"][:, :-1] * paths.dA, axis=1)
    v = G[:, -1] * np.exp(-drift)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


@dataclass(frozen=True)
class GeneralBsdeSpec:
    """Generator ``(state, y, z, k) -> value`` and terminal value.

    ``form="dH"``: the generator is ``f`` in ``Y = xi + int f - int Z dW - int K dH``.
    ``form="dM"``: the generator is ``F = f - lambda_G k`` in the compensated form.
    ``X``/``u`` are optional forward columns made available to the generator
    and to the regression features.
    """

    generator: Callable
    terminal_xi: object
    lipschitz_const: float
    form: str = "dM"
    X: np.ndarray | None = None
    u: np.ndarray | None = None

    def __post_init__(self):
        if self.form not in ("dH", "dM"):
            raise InvalidInputError(f"unknown form {self.form!r}")

    def xi(self, paths: PathBatch) -> np.ndarray:
        return _terminal(self.terminal_xi, paths)

    def state(self, paths: PathBatch, k: int) -> KnotState:
        Xb = None if self.X is None else paths.at_base(self.X)
        ub = None if self.u is None else paths.at_base(self.u)
        return paths.base_state(k, Xb, ub)

    def drift_increment(self, s: KnotState, y, z, k, dt: float, comp):
        """Compensated-form ``F dt``; ``comp`` is ``int lambda_G`` over the step."""
        if self.form == "dM":
            return self.generator(s, y, z, k) * dt
        return self.generator(s, y, z, k) * dt - k * comp

    def check_lipschitz(self, paths: PathBatch, n_points: int = 200, seed: int = 0,
                        h: float = 1e-6) -> dict:
        """Finite-difference partials in ``y, z, k`` at random points, against the constant."""
        g = np.random.default_rng(seed)
        worst = 0.0
        for k in np.linspace(0, paths.base.n_steps - 1, 5).astype(int):
            s = self.state(paths, int(k))
            y, z, kk = (g.normal(size=paths.n_paths) * 3 for _ in range(3))
            for var in range(3):
                args = [y, z, kk]
                up = list(args)
                dn = list(args)
                up[var] = args[var] + h
                dn[var] = args[var] - h
                d = (self.generator(s, *up) - self.generator(s, *dn)) / (2 * h)
                worst = max(worst, float(np.max(np.abs(d[:n_points]))))
        return {"max_partial": worst, "lipschitz_const": self.lipschitz_const,
                "ok": worst <= self.lipschitz_const * (1 + 1e-6) + 1e-9}

    def check_integrability(self, paths: PathBatch) -> dict:
        """``E[int |f(t,0,0,0)|^2 dt]`` must be finite."""
        zero = np.zeros(paths.n_paths)
        acc = np.zeros(paths.n_paths)
        for k in range(paths.base.n_steps):
            s = self.state(paths, k)
            acc += np.asarray(self.generator(s, zero, zero, zero)) ** 2 * paths.base_dt[k]
        v = float(acc.mean())
        return {"value": v, "ok": bool(np.isfinite(v))}


@dataclass
class BsdeSolution:
    """``Y, Z, K`` on the base knots, one row per path (``Z, K`` are 0 at ``T``)."""

    paths: PathBatch
    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    Y0_se: float = float("nan")
    diagnostics: dict = field(default_factory=dict)
    residual_by_knot: np.ndarray | None = None
    Y_pathwise: np.ndarray | None = None  # unbiased per-path representative of Y (linear solver)

    @property
    def Y0(self) -> float:
        return float(self.Y[:, 0].mean())

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["knot", "mean_Y", "mean_Z", "mean_K", "residual"])
        res = self.residual_by_knot
        for k, t in enumerate(self.paths.base.knots):
            r = "" if res is None else repr(float(res[k]))
            w.writerow([repr(float(t)), repr(float(np.mean(self.Y[:, k]))),
                        repr(float(np.mean(self.Z[:, k]))), repr(float(np.mean(self.K[:, k]))), r])


def _martingale_parts(basis, s: KnotState, Y1, Yhat, dW, dM, dt, comp, knot):
    """Regression estimates of ``Z_k`` and ``K_k`` from the next value.

    ``Yhat`` is subtracted as a control variate.  ``K`` is fitted on paths
    alive at the knot and is 0 after default.
    """
    e = Y1 - Yhat
    _, Z = fit_knot(basis, s, e * dW / dt, knot)
    K = np.zeros_like(Y1)
    alive = np.asarray(s.H) == 0
    if alive.any() and np.any(comp[alive] > 0):
        with np.errstate(divide="ignore", invalid="ignore"):
            tgt = np.where(comp > 0, e * dM / np.where(comp > 0, comp, 1.0), 0.0)
        _, Kfit = fit_knot(basis, s, tgt, knot, mask=alive)
        K = np.where(alive, Kfit, 0.0)
    return Z, K


def _jump_from_value_fit(basis, vfit, s_next: KnotState, s: KnotState, t_mid: float, knot):
    """``K_k = E[V(post-default state) - V(pre-default state) | G_k]`` on paths alive at ``k``.

    ``vfit`` is the regression of ``Y_{k+1}`` on the state at ``k+1``; the
    post-default state puts the default at the middle of the step.  Returns
    ``None`` when the fit cannot be evaluated off the observed states.
    """
    if vfit is None:
        return None
    need = (0, 1) if basis.split_on_default else (-1,)
    if not all(vfit.has(st) for st in need):
        return None
    n = s.W.shape[0]
    if s_next.X is not None:
        # the post-default forward state is unknown here, so features must not read it
        moved = replace(s_next, X=np.asarray(s_next.X) * 1.5 + 1.0)
        try:
            if not np.array_equal(basis.design(moved), basis.design(s_next)):
                return None
        except (FloatingPointError, ValueError):
            return None
    post = replace(s_next, H=np.ones(n), tau=np.full(n, t_mid), lam=np.zeros(n))
    pre = replace(s_next, H=np.zeros(n), tau=np.full(n, np.inf))
    jump = vfit.predict(post)[:, 0] - vfit.predict(pre)[:, 0]
    alive = np.asarray(s.H) == 0
    if not alive.any():
        return np.zeros(n)
    _, K = fit_knot(basis, s, jump, knot, mask=alive)
    return np.where(alive, K, 0.0)


def _fit_mean(basis, s, target, k):
    if k == 0:
        return np.full_like(target, target.mean()), None
    fit, vals = fit_knot(basis, s, target, k)
    return vals, fit


def solve_linear_explicit(spec: LinearBsdeSpec, paths: PathBatch, basis: RegressionBasis | None = None,
                          eval_knots=None, gamma_method: str = "exact", X=None,
                          with_martingale_parts: bool = True) -> BsdeSolution:
    """Explicit solution of the linear equation, conditional expectations by regression.

    The regressed quantity is ``Gamma_t p_t`` (target
    ``Gamma_T F + int_t^T Gamma_s phi_s ds``, trapezoid on the columns); ``p``
    is recovered by dividing by ``Gamma_t``.  At ``t = 0`` the sample mean is
    used.  ``q`` comes from regressing the increments of ``p`` against ``dW``;
    ``w`` is the conditional mean jump of the fitted ``p`` at the next knot
    under a default inside the step (see :func:`solve_regression_backward`).
    """
    basis = basis or RegressionBasis()
    c = spec.resolve(paths)
    G = simulate_gamma(spec, paths, gamma_method).Gamma
    Gphi = G * c["phi"]
    seg = 0.5 * paths.dt * (Gphi[:, :-1] + Gphi[:, 1:])
    tail = np.zeros_like(G)
    tail[:, :-1] = np.cumsum(seg[:, ::-1], axis=1)[:, ::-1]
    total = G[:, -1] * c["F"]
    N = paths.base.n_steps
    knots = range(N + 1) if eval_knots is None else sorted(set(int(k) for k in eval_knots))
    P = paths.n_paths
    Y = np.full((P, N + 1), np.nan)
    Ypw = np.full((P, N + 1), np.nan)
    Xb = None if X is None else paths.at_base(X)
    conds, dropped = {}, {}
    se0 = float("nan")
    for k in knots:
        col = paths.base_col[:, k]
        rows = np.arange(P)
        target = total + tail[rows, col]
        if k == N:
            Y[:, k] = c["F"]
            Ypw[:, k] = c["F"]
            continue
        Ypw[:, k] = target / G[rows, col]
        s = paths.base_state(k, Xb)
        vals, fit = _fit_mean(basis, s, target, k)
        Y[:, k] = vals / G[rows, col]
        if k == 0:
            se0 = float(target.std(ddof=1) / np.sqrt(P))
        elif fit is not None:
            conds[k] = {st: f.cond for st, f in fit.strata.items()}
            if any(f.dropped for f in fit.strata.values()):
                dropped[k] = {st: list(f.dropped) for st, f in fit.strata.items()}
    Z = np.zeros((P, N + 1))
    K = np.zeros((P, N + 1))
    if with_martingale_parts and eval_knots is None:
        bk = paths.base.knots
        for k in range(N):
            s = paths.base_state(k, Xb)
            s1 = paths.base_state(k + 1, Xb)
            Yhat, _ = _fit_mean(basis, s, Y[:, k + 1], k)
            Z[:, k], K[:, k] = _martingale_parts(
                basis, s, Y[:, k + 1], Yhat, paths.base_dW[:, k], paths.base_dM[:, k],
                paths.base_dt[k], paths.survival_compensator[:, k], k)
            vfit, _ = fit_knot(basis, s1, Y[:, k + 1], k + 1)
            Kv = _jump_from_value_fit(basis, vfit, s1, s, 0.5 * (bk[k] + bk[k + 1]), k)
            if Kv is not None:
                K[:, k] = Kv
    elif eval_knots is not None:
        Z[:] = np.nan
        K[:] = np.nan
    diag = {"method": "linear-explicit", "gamma": gamma_method, "cond": conds,
            "dropped_features": dropped, "Gamma": G}
    return BsdeSolution(paths, Y, Z, K, se0, diag, Y_pathwise=Ypw)


def solve_regression_backward(spec: GeneralBsdeSpec, paths: PathBatch,
                              basis: RegressionBasis | None = None, scheme: str = "explicit",
                              inner_tol: float = 1e-10, inner_max_iter: int = 50,
                              jump_estimator: str = "value-fit") -> BsdeSolution:
    """Backward induction ``Y_k = E[Y_{k+1} + F(t_k, ., Z_k, K_k) dt | G_k]``.

    ``scheme="explicit"`` evaluates the generator at ``Y_{k+1}``;
    ``scheme="implicit"`` solves ``y = E[Y_{k+1}|G_k] + F(t_k, y, Z_k, K_k) dt``
    by fixed-point iteration.  ``Y0_se`` is the standard error of the last
    average given the fitted continuation values; it leaves out the noise
    those fits carry from later knots, so it understates the spread of ``Y0``
    across independent path sets.

    ``jump_estimator="value-fit"`` takes ``K_k`` as the conditional mean of the
    jump of the fitted value function at ``k+1`` under a default inside the
    step; every alive path contributes, so the estimate does not degrade as
    ``dt`` shrinks.  ``"increment"`` regresses ``(Y_{k+1} - E_k Y_{k+1}) dM``
    divided by the compensator, which only sees paths defaulting in the step.
    For the last step the terminal value is first regressed on the terminal state.
    """
    if scheme not in ("explicit", "implicit"):
        raise InvalidInputError(f"unknown scheme {scheme!r}")
    if jump_estimator not in ("value-fit", "increment"):
        raise InvalidInputError(f"unknown jump estimator {jump_estimator!r}")
    basis = basis or RegressionBasis()
    N = paths.base.n_steps
    P = paths.n_paths
    Y = np.zeros((P, N + 1))
    Z = np.zeros((P, N + 1))
    K = np.zeros((P, N + 1))
    Y[:, N] = spec.xi(paths)
    conds = {}
    se0 = float("nan")
    inner = {}
    vfit_next = None
    if jump_estimator == "value-fit":
        vfit_next, _ = fit_knot(basis, spec.state(paths, N), Y[:, N], N)
    knots = paths.base.knots
    for k in range(N - 1, -1, -1):
        s = spec.state(paths, k)
        dt = paths.base_dt[k]
        comp = paths.survival_compensator[:, k]
        Y1 = Y[:, k + 1]
        Yhat, fit = _fit_mean(basis, s, Y1, k)
        Z[:, k], K[:, k] = _martingale_parts(basis, s, Y1, Yhat, paths.base_dW[:, k],
                                             paths.base_dM[:, k], dt, comp, k)
        if jump_estimator == "value-fit":
            Kv = _jump_from_value_fit(basis, vfit_next, spec.state(paths, k + 1), s,
                                      0.5 * (knots[k] + knots[k + 1]), k)
            if Kv is not None:
                K[:, k] = Kv
        if scheme == "explicit":
            target = Y1 + spec.drift_increment(s, Y1, Z[:, k], K[:, k], dt, comp)
            Y[:, k], fit = _fit_mean(basis, s, target, k)
            if k == 0:
                se0 = float(target.std(ddof=1) / np.sqrt(P))
        else:
            y = Yhat.copy()
            for it in range(inner_max_iter):
                new = Yhat + spec.drift_increment(s, y, Z[:, k], K[:, k], dt, comp)
                err = float(np.max(np.abs(new - y)))
                y = new
                if err <= inner_tol * max(1.0, float(np.max(np.abs(y)))):
                    break
            else:
                raise BsdeStepError(f"inner fixed point did not converge at knot {k}", knot=k)
            inner[k] = it + 1
            Y[:, k] = y
            if k == 0:
                se0 = float(Y1.std(ddof=1) / np.sqrt(P))
            elif jump_estimator == "value-fit":
                fit, _ = fit_knot(basis, s, y, k)
        vfit_next = fit
        if fit is not None:
            conds[k] = {st: f.cond for st, f in fit.strata.items()}
    sol = BsdeSolution(paths, Y, Z, K, se0, {"method": f"regression-{scheme}", "cond": conds,
                                             "inner_iterations": inner})
    sol.residual_by_knot = bsde_residual(sol, spec, paths, per_knot=True)
    return sol


def bsde_residual(solution: BsdeSolution, spec: GeneralBsdeSpec, paths: PathBatch,
                  per_knot: bool = False):
    """Plug-back residual ``Y_k - [xi + sum_{j>=k} (f dt - Z dW - K dH)]``.

    With ``form="dM"`` the sum is ``F dt - Z dW - K dM``.  The generator is
    evaluated at ``(Y_j, Z_j, K_j)``.  Returns the root-mean-square over
    paths and knots ``0..N-1`` (or per knot, including ``T``).
    """
    N = paths.base.n_steps
    Y, Z, K = solution.Y, solution.Z, solution.K
    if Y.shape != (paths.n_paths, N + 1):
        raise InvalidInputError("solution and paths are not aligned")
    incr = np.empty((paths.n_paths, N))
    for j in range(N):
        s = spec.state(paths, j)
        f = spec.generator(s, Y[:, j], Z[:, j], K[:, j])
        if spec.form == "dH":
            incr[:, j] = f * paths.base_dt[j] - Z[:, j] * paths.base_dW[:, j] - K[:, j] * paths.base_dH[:, j]
        else:
            incr[:, j] = f * paths.base_dt[j] - Z[:, j] * paths.base_dW[:, j] - K[:, j] * paths.base_dM[:, j]
    cum = np.zeros((paths.n_paths, N + 1))
    cum[:, :-1] = np.cumsum(incr[:, ::-1], axis=1)[:, ::-1]
    R = Y - (spec.xi(paths)[:, None] + cum)
    if per_knot:
        return np.sqrt(np.mean(R * R, axis=0))
    return float(np.sqrt(np.mean(R[:, :-1] ** 2)))


@dataclass
class ContractionReport:
    beta_weight: float
    rho: float
    norms: list
    converged: bool

    @property
    def ratios(self) -> list:
        return [b / a if a > 0 else 0.0 for a, b in zip(self.norms, self.norms[1:])]

    @property
    def iterations(self) -> int:
        return max(len(self.norms) - 1, 0)

    def to_dict(self) -> dict:
        return {"beta_weight": self.beta_weight, "rho": self.rho, "norms": self.norms,
                "ratios": self.ratios, "iterations": self.iterations, "converged": self.converged}


def contraction_diagnostic(spec: GeneralBsdeSpec, paths: PathBatch,
                           basis: RegressionBasis | None = None, rho: float = 1.0,
                           max_iter: int = 40, rtol: float = 1e-20,
                           raise_on_failure: bool = False) -> ContractionReport:
    """Global Picard iteration on ``(Y, Z, K)`` with the generator frozen at the previous iterate.

    Each sweep solves the backward equation whose driver is
    ``F(t, Y^i_t, Z^i_t, K^i_t)``, starting from ``(0, 0, 0)``.  Reported norms
    are ``E[sum_k e^{beta t_k} (beta |dY|^2 + |dZ|^2 + lambda_G |dK|^2) dt_k]``
    of successive differences, with ``beta = 1 + 10 rho C^2``.
    """
    basis = basis or RegressionBasis()
    C = spec.lipschitz_const
    bw = 1.0 + 10.0 * rho * C * C
    N = paths.base.n_steps
    P = paths.n_paths
    xi = spec.xi(paths)
    w = np.exp(bw * paths.base.knots[:-1]) * paths.base_dt
    lam = paths.base_lam[:, :-1]
    prev = (np.zeros((P, N + 1)), np.zeros((P, N + 1)), np.zeros((P, N + 1)))
    states = [spec.state(paths, k) for k in range(N)]
    norms = []
    converged = False
    for _ in range(max_iter):
        Yp, Zp, Kp = prev
        Y = np.zeros((P, N + 1))
        Z = np.zeros((P, N + 1))
        K = np.zeros((P, N + 1))
        Y[:, N] = xi
        for k in range(N - 1, -1, -1):
            s = states[k]
            dt = paths.base_dt[k]
            comp = paths.survival_compensator[:, k]
            Yhat, _ = _fit_mean(basis, s, Y[:, k + 1], k)
            Z[:, k], K[:, k] = _martingale_parts(basis, s, Y[:, k + 1], Yhat, paths.base_dW[:, k],
                                                 paths.base_dM[:, k], dt, comp, k)
            Y[:, k] = Yhat + spec.drift_increment(s, Yp[:, k], Zp[:, k], Kp[:, k], dt, comp)
        dY, dZ, dK = Y - Yp, Z - Zp, K - Kp
        n = float(np.mean(np.sum(w * (bw * dY[:, :-1] ** 2 + dZ[:, :-1] ** 2
                                      + lam * dK[:, :-1] ** 2), axis=1)))
        norms.append(n)
        prev = (Y, Z, K)
        if n == 0.0 or n <= rtol * norms[0]:
            converged = True
            break
    rep = ContractionReport(bw, rho, norms, converged)
    if not converged and raise_on_failure:
        raise NonConvergenceError("BSDE Picard iteration did not converge", norms)
    return rep
