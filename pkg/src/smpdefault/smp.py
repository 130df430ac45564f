"""Maximum-principle checks: Hamiltonian, adjoint equation, performance functional.

The performance functional is ``J(u) = E[int_0^T h(t, X_t, u_t) dt + g(X_T)]``
(trapezoid on the batch columns) and the Hamiltonian is
``h + (b + lambda_G gamma) p + sigma q + lambda_G gamma w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import BsdeSolution, GeneralBsdeSpec, LinearBsdeSpec, solve_linear_explicit
from .errors import InvalidInputError, NonFiniteCostError
from .paths import IntensitySpec, KnotState, PathBatch
from .regression import RegressionBasis
from .sde import CoefficientSet, ControlProcess, SdeBatch, euler_simulate

__all__ = [
    "ControlProblem",
    "AdjointTriple",
    "Perturbation",
    "JEstimate",
    "DirectionalDerivative",
    "hamiltonian",
    "hamiltonian_partials",
    "check_hamiltonian_partials",
    "forward_solve",
    "assemble_adjoint",
    "adjoint_general_spec",
    "solve_adjoint",
    "estimate_J",
    "directional_derivative",
    "check_sufficient",
]

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class ControlProblem:
    """Running cost ``h(t, x, u)``, terminal cost ``g(x, state_T)`` and the dynamics.

    ``forward`` optionally replaces the default Euler (dH form) scheme; it is
    called as ``forward(control, paths)`` and returns an :class:`SdeBatch`.
    ``v_bounds`` is the finite search interval for the first-order condition.
    """

    coeffs: CoefficientSet
    h: Callable
    dh_dx: Callable
    dh_du: Callable
    g: Callable
    dg: Callable
    x0: float
    intensity: IntensitySpec
    value_set: tuple = (-np.inf, np.inf)
    v_bounds: tuple | None = None
    forward: Callable | None = None

    def scaled(self, c: float) -> "ControlProblem":
        """Same dynamics with ``h`` and ``g`` multiplied by ``c``."""
        h, hx, hu, g, dg = self.h, self.dh_dx, self.dh_du, self.g, self.dg
        return ControlProblem(self.coeffs, lambda t, x, u: c * h(t, x, u),
                              lambda t, x, u: c * hx(t, x, u), lambda t, x, u: c * hu(t, x, u),
                              lambda x, s: c * g(x, s), lambda x, s: c * dg(x, s), self.x0,
                              self.intensity, self.value_set, self.v_bounds, self.forward)

    def check_derivatives(self, t, x, u, state=None, rtol: float = 1e-5) -> dict:
        """Centered finite differences of ``h`` and ``g`` (plus the coefficient partials)."""
        t, x, u = (np.asarray(a, dtype=float) for a in (t, x, u))
        hx = 1e-6 * np.maximum(1.0, np.abs(x))
        hu = 1e-6 * np.maximum(1.0, np.abs(u))
        out = dict(self.coeffs.check_derivatives(t, x, u, rtol))
        for name, fd, an in (
            ("dh_dx", (self.h(t, x + hx, u) - self.h(t, x - hx, u)) / (2 * hx), self.dh_dx(t, x, u)),
            ("dh_du", (self.h(t, x, u + hu) - self.h(t, x, u - hu)) / (2 * hu), self.dh_du(t, x, u)),
            ("dg", (self.g(x + hx, state) - self.g(x - hx, state)) / (2 * hx), self.dg(x, state)),
        ):
            out[name] = float(np.max(np.abs(an - fd) / np.maximum(1.0, np.abs(an))))
        out["ok"] = all(v <= rtol for k, v in out.items() if k != "ok")
        return out


def forward_solve(problem: ControlProblem, control: ControlProcess, paths: PathBatch) -> SdeBatch:
    if problem.forward is not None:
        return problem.forward(control, paths)
    return euler_simulate(problem.coeffs, control, paths, problem.x0, form="dH")


def hamiltonian(problem: ControlProblem, t, x, u, p, q, w, lam):
    c = problem.coeffs
    gam = c.gamma(t, x, u)
    return problem.h(t, x, u) + (c.b(t, x, u) + lam * gam) * p + c.sigma(t, x, u) * q + lam * gam * w


def hamiltonian_partials(problem: ControlProblem, t, x, u, p, q, w, lam):
    """Analytic ``(dH/dx, dH/du)`` assembled from the coefficient partials."""
    c = problem.coeffs
    gx = c.dgamma_dx(t, x, u)
    gu = c.dgamma_du(t, x, u)
    dx = problem.dh_dx(t, x, u) + (c.db_dx(t, x, u) + lam * gx) * p + c.dsigma_dx(t, x, u) * q + lam * gx * w
    du = problem.dh_du(t, x, u) + (c.db_du(t, x, u) + lam * gu) * p + c.dsigma_du(t, x, u) * q + lam * gu * w
    return dx, du


def check_hamiltonian_partials(problem: ControlProblem, n: int = 1000, seed: int = 0,
                               x_range=(0.5, 2.0), u_range=(0.1, 1.0), T: float = 1.0) -> dict:
    """Compare the analytic partials with centered differences at random points."""
    g = np.random.default_rng(seed)
    t = g.uniform(0.0, T, n)
    x = g.uniform(*x_range, n)
    u = g.uniform(*u_range, n)
    p, q, w = g.normal(size=(3, n))
    lam = g.uniform(0.0, max(problem.intensity.bound_c, 1.0), n)
    dx, du = hamiltonian_partials(problem, t, x, u, p, q, w, lam)
    hx = 1e-6 * np.maximum(1.0, np.abs(x))
    hu = 1e-6 * np.maximum(1.0, np.abs(u))
    fdx = (hamiltonian(problem, t, x + hx, u, p, q, w, lam)
           - hamiltonian(problem, t, x - hx, u, p, q, w, lam)) / (2 * hx)
    fdu = (hamiltonian(problem, t, x, u + hu, p, q, w, lam)
           - hamiltonian(problem, t, x, u - hu, p, q, w, lam)) / (2 * hu)
    ex = float(np.max(np.abs(dx - fdx) / np.maximum(1.0, np.abs(dx))))
    eu = float(np.max(np.abs(du - fdu) / np.maximum(1.0, np.abs(du))))
    return {"dH_dx": ex, "dH_du": eu, "ok": max(ex, eu) <= 1e-5}


def assemble_adjoint(problem: ControlProblem, forward: SdeBatch) -> LinearBsdeSpec:
    """The adjoint equation as a linear BSDE on the forward columns.

    ``phi = h_x``, ``alpha = b_x``, ``pi = 0``, ``beta = sigma_x``,
    ``mu = gamma_x`` and ``F = g'(X_T)``; the ``w`` coefficient
    ``lambda_G gamma_x`` is implied by the linear form.
    """
    paths = forward.paths
    if forward.X.shape != paths.t.shape:
        raise InvalidInputError("forward solution is not aligned with its paths")
    t, X, U = paths.t, forward.X, forward.u
    c = problem.coeffs
    F = problem.dg(X[:, -1], paths.terminal_state(X))
    return LinearBsdeSpec(phi=problem.dh_dx(t, X, U), alpha=c.db_dx(t, X, U), pi=0.0,
                          mu=c.dgamma_dx(t, X, U), beta=c.dsigma_dx(t, X, U),
                          terminal_F=np.asarray(F, dtype=float))


def adjoint_general_spec(problem: ControlProblem, forward: SdeBatch) -> GeneralBsdeSpec:
    """The adjoint equation with generator ``dH/dx`` (compensated form)."""
    paths = forward.paths

    def gen(s: KnotState, y, z, k):
        dx, _ = hamiltonian_partials(problem, s.t, s.X, s.u, y, z, k, s.lam)
        return dx

    c = problem.coeffs
    t, X, U = paths.t, forward.X, forward.u
    lam_c = problem.intensity.bound_c
    gx = np.abs(c.dgamma_dx(t, X, U))
    C = float(max(np.max(np.abs(c.db_dx(t, X, U)) + lam_c * gx),
                  np.max(np.abs(c.dsigma_dx(t, X, U))), lam_c * np.max(gx)))
    F = problem.dg(X[:, -1], paths.terminal_state(X))
    return GeneralBsdeSpec(gen, np.asarray(F, dtype=float), C, "dM", X=X, u=U)


@dataclass
class AdjointTriple:
    """``p, q, w`` on the base knots (rows are paths).

    ``p_pathwise`` is a per-path quantity whose conditional mean is ``p``
    (the payoff inside the explicit formula); expectations of expressions
    affine in ``p`` can use it without regression bias.
    """

    p: np.ndarray
    q: np.ndarray
    w: np.ndarray
    solution: BsdeSolution | None = None
    p_pathwise: np.ndarray | None = None

    def terminal_exact(self, problem: ControlProblem, forward: SdeBatch) -> bool:
        F = problem.dg(forward.X[:, -1], forward.paths.terminal_state(forward.X))
        return bool(np.array_equal(self.p[:, -1], np.asarray(F, dtype=float)))


def solve_adjoint(problem: ControlProblem, forward: SdeBatch,
                  basis: RegressionBasis | None = None) -> AdjointTriple:
    spec = assemble_adjoint(problem, forward)
    sol = solve_linear_explicit(spec, forward.paths, basis, X=forward.X)
    return AdjointTriple(sol.Y, sol.Z, sol.K, sol, sol.Y_pathwise)


@dataclass
class JEstimate:
    mean: float
    se: float
    values: np.ndarray = field(repr=False)


def _path_costs(problem: ControlProblem, fwd: SdeBatch) -> np.ndarray:
    paths = fwd.paths
    w = paths.trapezoid_weights
    with np.errstate(divide="ignore", invalid="ignore"):
        h = problem.h(paths.t, fwd.X, fwd.u)
        running = np.sum(np.where(w > 0, w * h, 0.0), axis=1)
        term = problem.g(fwd.X[:, -1], paths.terminal_state(fwd.X))
    return running + term


def estimate_J(problem: ControlProblem, control: ControlProcess, paths: PathBatch,
               forward: SdeBatch | None = None) -> JEstimate:
    """Monte Carlo mean and standard error of the performance functional."""
    fwd = forward if forward is not None else forward_solve(problem, control, paths)
    v = _path_costs(problem, fwd)
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise NonFiniteCostError(f"non-finite cost on {bad.size} paths", path_ids=bad.tolist())
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return JEstimate(float(v.mean()), se, v)


@dataclass(frozen=True)
class Perturbation:
    """Direction ``beta`` (feedback rule) of a control perturbation ``u + y beta``."""

    beta: ControlProcess
    delta_max: float = 1e-4
    name: str = "beta"

    @classmethod
    def constant(cls, c: float, delta_max: float = 1e-4) -> "Perturbation":
        return cls(ControlProcess.constant(c), delta_max, f"const({c})")

    def table(self, forward: SdeBatch) -> np.ndarray:
        """Values of the direction along the unperturbed forward columns."""
        paths = forward.paths
        out = np.empty(paths.t.shape)
        for j in range(paths.n_cols):
            out[:, j] = np.broadcast_to(
                self.beta.rule(paths.t[:, j], forward.X[:, j], paths.column_state(j, forward.X, forward.u)),
                (paths.n_paths,))
        return out

    def admissible(self, u_table, beta_table, value_set, y: float) -> bool:
        lo, hi = value_set
        v = u_table + y * beta_table
        return bool(np.all((v >= lo) & (v <= hi)))


@dataclass
class DirectionalDerivative:
    fd_value: float
    fd_se: float
    hamiltonian_value: float
    hamiltonian_se: float
    J: float
    tolerance: float
    one_sided: bool
    fd_truncation: float = 0.0
    fd_rounding: float = 0.0

    @property
    def fd_error_floor(self) -> float:
        """Deterministic error bound of the difference quotient (truncation plus rounding)."""
        return self.fd_truncation + self.fd_rounding

    @property
    def difference(self) -> float:
        return self.fd_value - self.hamiltonian_value

    @property
    def agree(self) -> bool:
        return abs(self.difference) <= self.tolerance

    def to_dict(self) -> dict:
        return {"fd_value": self.fd_value, "fd_se": self.fd_se,
                "hamiltonian_value": self.hamiltonian_value, "hamiltonian_se": self.hamiltonian_se,
                "J": self.J, "tolerance": self.tolerance, "one_sided": self.one_sided,
                "fd_truncation": self.fd_truncation, "fd_rounding": self.fd_rounding,
                "difference": self.difference, "agree": self.agree}


def _base_trapezoid(paths: PathBatch) -> np.ndarray:
    dt = paths.base_dt
    w = np.zeros(dt.size + 1)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def directional_derivative(problem: ControlProblem, control: ControlProcess, pert: Perturbation,
                           paths: PathBatch, y: float = 1e-4, basis: RegressionBasis | None = None,
                           forward: SdeBatch | None = None,
                           adjoint: AdjointTriple | None = None,
                           pathwise_p: bool = True) -> DirectionalDerivative:
    """Two estimates of ``d/dy J(u + y beta)`` at ``y = 0``.

    The finite difference perturbs the control process along the realised
    unperturbed path (so ``u`` and ``beta`` are fixed adapted processes) and
    reuses the same paths for every shift.  The Hamiltonian form is
    ``E[int beta dH/du dt]`` with the adjoint triple, trapezoid on the base knots.
    ``dH/du`` is affine in ``p`` and ``beta`` is adapted, so with
    ``pathwise_p`` the per-path payoff of the explicit formula stands in for
    ``p`` (same expectation, no regression bias).
    """
    fwd = forward if forward is not None else forward_solve(problem, control, paths)
    u_tab = fwd.u
    b_tab = pert.table(fwd)
    lo_hi = problem.value_set
    J0 = estimate_J(problem, control, paths, forward=fwd)

    def J_of(shift: float) -> np.ndarray:
        ctrl = ControlProcess.tabulated(u_tab + shift * b_tab, problem.value_set, "perturbed")
        return estimate_J(problem, ctrl, paths).values

    one_sided = not pert.admissible(u_tab, b_tab, lo_hi, -y)
    Jp = J_of(y)
    if one_sided:
        diff = (Jp - J0.values) / y
        coarse = (J_of(2 * y) - J0.values) / (2 * y)
        trunc = abs(float(coarse.mean() - diff.mean()))
    else:
        diff = (Jp - J_of(-y)) / (2 * y)
        coarse = (J_of(2 * y) - J_of(-2 * y)) / (4 * y)
        # step-doubling estimate of the O(y^2) error of the central difference
        trunc = abs(float(coarse.mean() - diff.mean())) / 3.0
    rounding = 1e3 * _EPS * float(np.mean(np.abs(J0.values))) / y
    adj = adjoint if adjoint is not None else solve_adjoint(problem, fwd, basis)
    Xb, ub, bb = paths.at_base(fwd.X), fwd.u_base, paths.at_base(b_tab)
    t = np.broadcast_to(paths.base.knots, Xb.shape)
    p = adj.p_pathwise if (pathwise_p and adj.p_pathwise is not None) else adj.p
    _, du = hamiltonian_partials(problem, t, Xb, ub, p, adj.q, adj.w, paths.base_lam)
    ham = np.sum(_base_trapezoid(paths) * bb * du, axis=1)
    n = paths.n_paths
    fd_se = float(diff.std(ddof=1) / np.sqrt(n))
    ham_se = float(ham.std(ddof=1) / np.sqrt(n))
    tol = max(3.0 * float(np.hypot(fd_se, ham_se)), 1e-3 * abs(J0.mean))
    return DirectionalDerivative(float(diff.mean()), fd_se, float(ham.mean()), ham_se, J0.mean,
                                 tol, one_sided, trunc, rounding)


def _max_eig_2x2(a, b, c):
    return 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)


def check_sufficient(problem: ControlProblem, control: ControlProcess, paths: PathBatch,
                     basis: RegressionBasis | None = None, v_bounds=None, n_v: int = 21,
                     n_sample: int = 500, seed: int = 0, rtol: float = 1e-4,
                     forward: SdeBatch | None = None, adjoint: AdjointTriple | None = None) -> dict:
    """Numerical check of the sufficient maximum principle for a candidate control.

    (a) the 2x2 Hessian of the Hamiltonian in ``(x, u)`` at sampled states has
    largest eigenvalue ``<= rtol * scale`` (second differences);
    (b) ``g`` has nonpositive second differences at sampled terminal states;
    (c) ``max_{v, t} E[dH/du (v - u_t)] <= 3 SE`` over a grid of ``n_v`` values.
    """
    fwd = forward if forward is not None else forward_solve(problem, control, paths)
    adj = adjoint if adjoint is not None else solve_adjoint(problem, fwd, basis)
    Xb, ub = paths.at_base(fwd.X), fwd.u_base
    N = paths.base.n_steps
    t = np.broadcast_to(paths.base.knots, Xb.shape)
    lam = paths.base_lam
    g = np.random.default_rng(seed)

    # (a) concavity of the Hamiltonian in (x, u)
    m = min(n_sample, paths.n_paths * N)
    flat = g.choice(paths.n_paths * N, size=m, replace=False)
    i, k = np.divmod(flat, N)
    args = (t[i, k], Xb[i, k], ub[i, k], adj.p[i, k], adj.q[i, k], adj.w[i, k], lam[i, k])
    tt, x, u, p, q, w, lm = args
    hx = 1e-3 * np.maximum(np.abs(x), 1e-6)
    hu = 1e-3 * np.maximum(np.abs(u), 1e-6)

    def H(dx, du):
        with np.errstate(divide="ignore", invalid="ignore"):
            return hamiltonian(problem, tt, x + dx, u + du, p, q, w, lm)

    h0 = H(0, 0)
    hpp, hmm = H(hx, 0), H(-hx, 0)
    upp, umm = H(0, hu), H(0, -hu)
    c1, c2, c3, c4 = H(hx, hu), H(hx, -hu), H(-hx, hu), H(-hx, -hu)
    a = (hpp - 2 * h0 + hmm) / hx ** 2
    c = (upp - 2 * h0 + umm) / hu ** 2
    b = (c1 - c2 - c3 + c4) / (4 * hx * hu)
    lam_max = _max_eig_2x2(a, b, c)
    mag = np.abs(h0) + np.abs(hpp) + np.abs(hmm) + np.abs(upp) + np.abs(umm)
    noise = 100 * _EPS * mag / np.minimum(hx, hu) ** 2
    scale = np.abs(a) + np.abs(c) + 2 * np.abs(b)
    finite = np.isfinite(lam_max)
    slack = lam_max - (rtol * scale + noise)
    concave_H = bool(finite.any() and np.all(slack[finite] <= 0))

    # (b) concavity of g
    XT = fwd.X[:, -1]
    st = paths.terminal_state(fwd.X)
    hg = 1e-3 * np.maximum(np.abs(XT), 1e-6)
    with np.errstate(divide="ignore", invalid="ignore"):
        gp, g0, gm = problem.g(XT + hg, st), problem.g(XT, st), problem.g(XT - hg, st)
    g2 = (gp - 2 * g0 + gm) / hg ** 2
    gnoise = 100 * _EPS * (np.abs(gp) + 2 * np.abs(g0) + np.abs(gm)) / hg ** 2
    gfin = np.isfinite(g2)
    concave_g = bool(gfin.any() and np.all(g2[gfin] <= rtol * np.abs(g2[gfin]) + gnoise[gfin]))

    # (c) first-order condition over a grid of v
    vb = v_bounds or problem.v_bounds
    if vb is None:
        lo, hi = problem.value_set
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise InvalidInputError("an unbounded value set needs finite v_bounds")
        vb = (lo, hi)
    v_grid = np.linspace(vb[0], vb[1], n_v)
    _, du = hamiltonian_partials(problem, t, Xb, ub, adj.p, adj.q, adj.w, lam)
    du = du[:, :N]
    uu = ub[:, :N]
    prod = du[None] * (v_grid[:, None, None] - uu[None])
    means = prod.mean(axis=1)
    ses = prod.std(axis=1, ddof=1) / np.sqrt(paths.n_paths)
    iv, kk = np.unravel_index(np.argmax(means - 3 * ses), means.shape)
    best = (float(means[iv, kk]), float(ses[iv, kk]), float(v_grid[iv]), int(kk))
    c_mean, c_se, c_v, c_k = best
    # floating-point floor: size of the terms that make up dH/du
    cc = problem.coeffs
    terms = (np.abs(problem.dh_du(t, Xb, ub)) + np.abs((cc.db_du(t, Xb, ub) + lam * cc.dgamma_du(t, Xb, ub)) * adj.p)
             + np.abs(cc.dsigma_du(t, Xb, ub) * adj.q) + np.abs(lam * cc.dgamma_du(t, Xb, ub) * adj.w))
    atol = 1e-9 * float(np.mean(terms[:, :N])) * float(np.max(np.abs(v_grid[:, None, None] - uu[None])))
    margin = c_mean - 3 * c_se
    foc = bool(c_mean <= 3 * c_se + atol)
    return {
        "hamiltonian_concave": concave_H,
        "hamiltonian_max_eig": float(np.max(lam_max[finite])) if finite.any() else None,
        "hamiltonian_worst_slack": float(np.max(slack[finite])) if finite.any() else None,
        "hamiltonian_samples": int(finite.sum()),
        "g_concave": concave_g,
        "g_max_second_difference": float(np.max(g2[gfin])) if gfin.any() else None,
        "foc_max": c_mean,
        "foc_se": c_se,
        "foc_argmax_v": c_v,
        "foc_argmax_knot": c_k,
        "foc_margin": margin,
        "foc_atol": atol,
        "foc_ok": foc,
        "verdict": "PASS" if (concave_H and concave_g and foc) else "FAIL",
    }
