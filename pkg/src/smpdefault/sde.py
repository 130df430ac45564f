"""Forward SDE with a default jump: Euler scheme, Picard solver, wealth closed form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergenceError, InvalidInputError, NonConvergenceError
from .paths import KnotState, PathBatch, TimeGrid

__all__ = [
    "CoefficientSet",
    "ControlProcess",
    "SdePath",
    "SdeBatch",
    "PicardConfig",
    "PicardReport",
    "affine_coefficients",
    "wealth_coefficients",
    "effective_drift",
    "euler_simulate",
    "picard_solve",
    "explicit_wealth_solution",
    "as_time_function",
]

Coef = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def as_time_function(v) -> Callable[[np.ndarray], np.ndarray]:
    if callable(v):
        return v
    c = float(v)
    return lambda t: np.full_like(np.asarray(t, dtype=float), c)


@dataclass(frozen=True)
class CoefficientSet:
    """Drift, volatility and jump coefficients ``(t, x, u) -> value`` with partials."""

    b: Coef
    sigma: Coef
    gamma: Coef
    db_dx: Coef
    dsigma_dx: Coef
    dgamma_dx: Coef
    db_du: Coef
    dsigma_du: Coef
    dgamma_du: Coef
    lipschitz_const: float = 1.0
    growth_const: float = 1.0

    def check_derivatives(self, t, x, u, rtol: float = 1e-5) -> dict:
        """Centered finite differences of ``b, sigma, gamma`` against the partials.

        Returns the worst relative error per partial; ``ok`` is the overall verdict.
        """
        t, x, u = (np.asarray(a, dtype=float) for a in (t, x, u))
        hx = 1e-6 * np.maximum(1.0, np.abs(x))
        hu = 1e-6 * np.maximum(1.0, np.abs(u))
        out = {}
        for name in ("b", "sigma", "gamma"):
            f = getattr(self, name)
            for var, h in (("x", hx), ("u", hu)):
                if var == "x":
                    fd = (f(t, x + h, u) - f(t, x - h, u)) / (2 * h)
                else:
                    fd = (f(t, x, u + h) - f(t, x, u - h)) / (2 * h)
                an = np.broadcast_to(getattr(self, f"d{name}_d{var}")(t, x, u), fd.shape)
                err = np.abs(an - fd) / np.maximum(1.0, np.abs(an))
                out[f"d{name}_d{var}"] = float(err.max())
        out["ok"] = all(v <= rtol for v in out.values())
        return out


def _zero(t, x, u):
    return np.zeros(np.broadcast(t, x, u).shape)


def affine_coefficients(b0=0.0, bx=0.0, bu=0.0, s0=0.0, sx=0.0, su=0.0,
                        g0=0.0, gx=0.0, gu=0.0, u_bound: float = 1.0) -> CoefficientSet:
    """``b = b0 + bx x + bu u`` and likewise for ``sigma`` (``s*``) and ``gamma`` (``g*``)."""

    def lin(c0, cx, cu):
        return lambda t, x, u: c0 + cx * np.asarray(x) + cu * np.asarray(u) + 0.0 * np.asarray(t)

    def const(c):
        return lambda t, x, u: np.full(np.broadcast(t, x, u).shape, float(c))

    lip = max(abs(bx), abs(sx), abs(gx))
    growth = max(abs(b0) + abs(bu) * u_bound, abs(s0) + abs(su) * u_bound,
                 abs(g0) + abs(gu) * u_bound, lip)
    return CoefficientSet(lin(b0, bx, bu), lin(s0, sx, su), lin(g0, gx, gu),
                          const(bx), const(sx), const(gx), const(bu), const(su), const(gu),
                          lipschitz_const=lip, growth_const=growth)


def wealth_coefficients(alpha, beta, mu: float, u_max: float = 1.0) -> CoefficientSet:
    """Coefficients of ``dS = S[(alpha - pi) dt + beta dW + mu dH]`` with control ``pi``."""
    a = as_time_function(alpha)
    s = as_time_function(beta)
    mu = float(mu)
    grid = np.linspace(0.0, 1.0, 11)
    a_max = float(np.max(np.abs(a(grid)))) if not callable(alpha) else float(np.max(np.abs(a(grid))))
    lip = max(a_max + u_max, float(np.max(np.abs(s(grid)))), abs(mu))
    return CoefficientSet(
        b=lambda t, x, u: x * (a(t) - u),
        sigma=lambda t, x, u: s(t) * x,
        gamma=lambda t, x, u: mu * x + 0.0 * u,
        db_dx=lambda t, x, u: a(t) - u + 0.0 * x,
        dsigma_dx=lambda t, x, u: s(t) + 0.0 * (x + u),
        dgamma_dx=lambda t, x, u: np.full(np.broadcast(t, x, u).shape, mu),
        db_du=lambda t, x, u: -x + 0.0 * (u + t),
        dsigma_du=_zero,
        dgamma_du=_zero,
        lipschitz_const=lip,
        growth_const=lip,
    )


def effective_drift(coeffs: CoefficientSet, lam_G, t, x, u):
    """Drift of the compensated (dM) form: ``b + lambda_G * gamma``."""
    return coeffs.b(t, x, u) + lam_G * coeffs.gamma(t, x, u)


@dataclass(frozen=True)
class ControlProcess:
    """Feedback rule ``(t, x, state) -> u``, clamped to the interval ``value_set``."""

    rule: Callable[[np.ndarray, np.ndarray, KnotState], np.ndarray]
    value_set: tuple = (-np.inf, np.inf)
    name: str = "control"

    def evaluate(self, t, x, state: KnotState):
        raw = np.broadcast_to(np.asarray(self.rule(t, x, state), dtype=float), np.shape(x))
        lo, hi = self.value_set
        u = np.clip(raw, lo, hi)
        return u, int(np.count_nonzero(u != raw))

    @classmethod
    def constant(cls, c: float, value_set=(-np.inf, np.inf)) -> "ControlProcess":
        return cls(lambda t, x, s: np.full(np.shape(x), float(c)), value_set, f"const({c})")

    @classmethod
    def deterministic(cls, f, value_set=(-np.inf, np.inf), name="deterministic") -> "ControlProcess":
        return cls(lambda t, x, s: f(t), value_set, name)

    @classmethod
    def tabulated(cls, table: np.ndarray, value_set=(-np.inf, np.inf), name="tabulated") -> "ControlProcess":
        """Adapted control given as values per path and batch column."""
        table = np.asarray(table)
        return cls(lambda t, x, s: table[:, s.index], value_set, name)

    def scaled(self, c: float) -> "ControlProcess":
        rule = self.rule
        return ControlProcess(lambda t, x, s: c * rule(t, x, s), self.value_set, f"{c}*{self.name}")

    def shifted(self, y: float, direction: "ControlProcess") -> "ControlProcess":
        """The control ``u + y * direction``."""
        r0, r1 = self.rule, direction.rule
        return ControlProcess(lambda t, x, s: r0(t, x, s) + y * r1(t, x, s), self.value_set,
                              f"{self.name}{y:+g}*{direction.name}")


@dataclass(frozen=True)
class SdePath:
    grid: TimeGrid
    X: np.ndarray
    X_pre_jump: float | None
    u: np.ndarray
    H: np.ndarray

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["knot", "X", "u", "H"])
        for row in zip(self.grid.knots, self.X, self.u, self.H):
            w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class SdeBatch:
    """Forward solution on the column layout of ``paths``.

    At the ``tau-`` slot ``X`` holds the left limit and ``u`` the control in
    force just before default.
    """

    paths: PathBatch
    X: np.ndarray
    u: np.ndarray
    n_clamped: int = 0
    scheme: str = "euler-dH"

    @property
    def X_base(self) -> np.ndarray:
        return self.paths.at_base(self.X)

    @property
    def u_base(self) -> np.ndarray:
        return self.paths.at_base(self.u)

    @property
    def X_T(self) -> np.ndarray:
        return self.X[:, -1]

    def path(self, i: int) -> SdePath:
        p = self.paths
        cols = list(p.base_col[i])
        pre = None
        if p.jump_col[i] >= 0:
            j = int(p.jump_col[i])
            pre = float(self.X[i, j])
            if j + 1 not in cols:
                cols.append(j + 1)
            cols.sort()
        cols = np.asarray(cols)
        tau_idx = int(np.searchsorted(p.t[i, cols], p.tau[i])) if pre is not None else None
        return SdePath(TimeGrid(p.t[i, cols], tau_index=tau_idx), self.X[i, cols], pre,
                       self.u[i, cols], p.H[i, cols])

    def to_csv(self, fh, max_paths: int | None = None) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "knot", "X", "u", "H"])
        n = self.paths.n_paths if max_paths is None else min(max_paths, self.paths.n_paths)
        for i in range(n):
            sp = self.path(i)
            for row in zip(sp.grid.knots, sp.X, sp.u, sp.H):
                w.writerow([i] + [repr(float(v)) for v in row])


def _step_increment(coeffs, paths: PathBatch, j, t, x, u, form):
    dt, dW, dH, dA = paths.dt[:, j], paths.dW[:, j], paths.dH[:, j], paths.dA[:, j]
    g = coeffs.gamma(t, x, u)
    if form == "dH":
        return coeffs.b(t, x, u) * dt + coeffs.sigma(t, x, u) * dW + g * dH
    # compensated form: B dt with lambda_G dt discretised as the exact compensator dA
    return (coeffs.b(t, x, u) * dt + g * dA) + coeffs.sigma(t, x, u) * dW + g * (dH - dA)


def euler_simulate(coeffs: CoefficientSet, control: ControlProcess, paths: PathBatch,
                   x0: float, form: str = "dH") -> SdeBatch:
    """Explicit Euler between columns; the default jump is its own zero-length step.

    ``form="dH"`` integrates ``b dt + sigma dW + gamma dH``; ``form="dM"``
    integrates ``B dt + sigma dW + gamma dM`` with ``B = b + lambda_G gamma``.
    """
    if form not in ("dH", "dM"):
        raise InvalidInputError(f"unknown form {form!r}")
    if not np.isfinite(x0):
        raise InvalidInputError("x0 must be finite")
    if hasattr(paths, "batch") and not isinstance(paths, PathBatch):
        paths = paths.batch
    P, C = paths.t.shape
    X = np.empty((P, C))
    U = np.empty((P, C))
    X[:, 0] = x0
    clamped = 0
    for j in range(C - 1):
        t, x = paths.t[:, j], X[:, j]
        u, nc = control.evaluate(t, x, paths.column_state(j, X))
        clamped += nc
        U[:, j] = u
        X[:, j + 1] = x + _step_increment(coeffs, paths, j, t, x, u, form)
        if not np.all(np.isfinite(X[:, j + 1])):
            raise DivergenceError(f"non-finite state at step {j} (t={float(np.max(t)):.6g})",
                                  step=j, time=float(np.max(t)))
    U[:, -1], nc = control.evaluate(paths.t[:, -1], X[:, -1], paths.column_state(C - 1, X))
    return SdeBatch(paths, X, U, clamped + nc, f"euler-{form}")


@dataclass(frozen=True)
class PicardConfig:
    beta_weight: float | None = None
    tol: float = 1e-20
    max_iter: int = 200
    epsilon: float = 0.5

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.epsilon <= 0:
            raise InvalidInputError("PicardConfig needs tol > 0, max_iter >= 1, epsilon > 0")
        if self.beta_weight is not None and self.beta_weight <= 0:
            raise InvalidInputError("beta_weight must be positive")

    def weight_for(self, lipschitz_const: float) -> float:
        if self.beta_weight is not None:
            return self.beta_weight
        return 1.0 + lipschitz_const ** 2 / self.epsilon


@dataclass
class PicardReport:
    beta_weight: float
    norms: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        # the last map application only certifies convergence
        return max(len(self.norms) - 1, 0)

    @property
    def ratios(self) -> list:
        return [b / a if a > 0 else 0.0 for a, b in zip(self.norms, self.norms[1:])]

    def merge(self, other: "PicardReport", n_self: int, n_other: int) -> "PicardReport":
        """Combine reports from two disjoint path sets (path-weighted mean of norms)."""
        norms = [(a * n_self + b * n_other) / (n_self + n_other)
                 for a, b in zip(self.norms, other.norms)]
        return PicardReport(self.beta_weight, norms, self.converged and other.converged)


def weighted_norm(paths: PathBatch, diff: np.ndarray, beta_weight: float) -> float:
    """Discrete ``E[int_0^T e^{-beta s} |diff_s|^2 ds]`` (trapezoid per path)."""
    w = paths.trapezoid_weights * np.exp(-beta_weight * paths.t)
    return float(np.mean(np.sum(w * diff * diff, axis=1)))


def picard_solve(coeffs: CoefficientSet, control: ControlProcess, paths: PathBatch, x0: float,
                 cfg: PicardConfig | None = None, form: str = "dH"):
    """Iterate the integral map ``X -> x0 + int B ds + int sigma dW + int gamma dM``.

    The map is evaluated on the same discrete increments as :func:`euler_simulate`,
    so its fixed point is the Euler solution.  Starts from ``X = x0``.
    """
    cfg = cfg or PicardConfig()
    bw = cfg.weight_for(coeffs.lipschitz_const)
    report = PicardReport(bw)
    P, C = paths.t.shape
    X = np.full((P, C), float(x0))
    U = np.empty((P, C))
    for _ in range(cfg.max_iter):
        clamped = 0
        incr = np.empty((P, C - 1))
        for j in range(C):
            u, nc = control.evaluate(paths.t[:, j], X[:, j], paths.column_state(j, X))
            U[:, j] = u
            clamped += nc
        for j in range(C - 1):
            incr[:, j] = _step_increment(coeffs, paths, j, paths.t[:, j], X[:, j], U[:, j], form)
        new = np.add.accumulate(np.concatenate([np.full((P, 1), float(x0)), incr], axis=1), axis=1)
        if not np.all(np.isfinite(new)):
            raise DivergenceError("non-finite Picard iterate", step=len(report.norms))
        d = weighted_norm(paths, new - X, bw)
        report.norms.append(d)
        X = new
        if d < cfg.tol:
            report.converged = True
            break
    else:
        raise NonConvergenceError(f"Picard iteration did not reach tol={cfg.tol} in "
                                  f"{cfg.max_iter} iterations", report.norms)
    for j in range(C):
        U[:, j], _ = control.evaluate(paths.t[:, j], X[:, j], paths.column_state(j, X))
    return SdeBatch(paths, X, U, clamped, f"picard-{form}"), report


def _step_integral(f, t0, t1):
    # Simpson on one step; exact for polynomials up to degree 3
    return (t1 - t0) / 6.0 * (f(t0) + 4.0 * f(0.5 * (t0 + t1)) + f(t1))


def explicit_wealth_solution(alpha, beta, mu: float, pi, paths: PathBatch, S0: float) -> SdeBatch:
    """Closed-form wealth ``dS = S_-[(alpha - pi) dt + beta dW + mu dH]``.

    Before default ``S_t = S0 exp(int (alpha - pi - beta^2/2) ds + int beta dW)``;
    at ``tau`` the wealth is multiplied by ``1 + mu``; afterwards the same
    exponential continues from ``S_tau``.  ``pi`` may be a constant, a function
    of time (integrated exactly per step), a per-column table, or a feedback
    :class:`ControlProcess` held constant on each step.  For time-dependent
    ``beta`` the stochastic integral uses the left-point value on each step.
    """
    if mu < -1:
        raise InvalidInputError(f"jump size mu={mu} < -1")
    if S0 <= 0:
        raise InvalidInputError("S0 must be positive")
    a = as_time_function(alpha)
    s = as_time_function(beta)
    t0, t1 = paths.t[:, :-1], paths.t[:, 1:]
    drift = _step_integral(a, t0, t1) - 0.5 * _step_integral(lambda t: s(t) ** 2, t0, t1)
    diffusion = s(t0) * paths.dW
    jump = (1.0 + mu) ** paths.H
    P, C = paths.t.shape
    clamped = 0
    if isinstance(pi, ControlProcess):
        L = np.zeros((P, C))
        U = np.empty((P, C))
        for j in range(C - 1):
            x = S0 * np.exp(L[:, j]) * jump[:, j]
            U[:, j], nc = pi.evaluate(paths.t[:, j], x, paths.column_state(j, S0 * np.exp(L) * jump))
            clamped += nc
            L[:, j + 1] = L[:, j] + drift[:, j] - U[:, j] * paths.dt[:, j] + diffusion[:, j]
        S = S0 * np.exp(L) * jump
        U[:, -1], nc = pi.evaluate(paths.t[:, -1], S[:, -1], paths.column_state(C - 1, S))
        clamped += nc
    else:
        if callable(pi):
            cons = _step_integral(pi, t0, t1)
            U = pi(paths.t)
        elif np.ndim(pi) == 2:
            U = np.asarray(pi, dtype=float)
            cons = U[:, :-1] * paths.dt
        else:
            U = np.full((P, C), float(pi))
            cons = U[:, :-1] * paths.dt
        L = np.zeros((P, C))
        L[:, 1:] = np.cumsum(drift - cons + diffusion, axis=1)
        S = S0 * np.exp(L) * jump
    return SdeBatch(paths, S, U, clamped, "wealth-exact")
