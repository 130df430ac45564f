import math

import numpy as np
import pytest

import oracles
from smpdefault.bsde import (GeneralBsdeSpec, LinearBsdeSpec, bsde_residual, contraction_diagnostic,
                             gamma_martingale_check, simulate_gamma, solve_linear_explicit,
                             solve_regression_backward)
from smpdefault.errors import InvalidInputError
from smpdefault.paths import IntensitySpec, TimeGrid, build_filtration_batch
from smpdefault.regression import RegressionBasis

SEED = 20240601
GENERAL = dict(phi=0.3, alpha=0.2, pi=0.1, mu=-0.4, beta=0.3)


def _F(p):
    return 1.0 + 0.5 * p.H[:, -1] + 0.2 * p.W[:, -1] + 0.3 * np.sin(p.W[:, -1])


def _deterministic(n_steps, n_paths=200):
    return build_filtration_batch(TimeGrid.uniform(1.0, n_steps), IntensitySpec.constant(0.5), SEED, n_paths)


# ---------------------------------------------------------------- Gamma

def test_gamma_trivial(small_batch):
    assert np.all(simulate_gamma(LinearBsdeSpec(), small_batch).Gamma == 1.0)


def test_gamma_jump_factor_is_exact(small_batch):
    G = simulate_gamma(LinearBsdeSpec(**GENERAL), small_batch).Gamma
    d = np.flatnonzero(small_batch.defaulted)
    j = small_batch.jump_col[d]
    np.testing.assert_allclose(G[d, j + 1] / G[d, j], 1 + GENERAL["mu"], rtol=1e-14)
    Ge = simulate_gamma(LinearBsdeSpec(**GENERAL), small_batch, "euler").Gamma
    np.testing.assert_allclose(Ge[d, j + 1] / Ge[d, j], 1 + GENERAL["mu"], rtol=1e-14)


def test_gamma_exact_and_fine_euler_agree():
    b = build_filtration_batch(TimeGrid.uniform(1.0, 2000), IntensitySpec.constant(0.5), SEED, 300)
    spec = LinearBsdeSpec(**GENERAL)
    ex = simulate_gamma(spec, b).Gamma[:, -1]
    eu = simulate_gamma(spec, b, "euler").Gamma[:, -1]
    assert np.max(np.abs(ex - eu) / ex) < 0.02


def test_gamma_discounted_is_martingale():
    b = build_filtration_batch(TimeGrid.uniform(1.0, 10), IntensitySpec.constant(0.5), SEED, 100_000)
    for method in ("exact", "euler"):
        m, se = gamma_martingale_check(LinearBsdeSpec(**GENERAL), b, method)
        assert abs(m - 1.0) <= 3 * se


def test_mu_at_or_below_minus_one_rejected(small_batch):
    with pytest.raises(InvalidInputError):
        simulate_gamma(LinearBsdeSpec(mu=-1.0), small_batch)
    with pytest.raises(InvalidInputError):
        solve_linear_explicit(LinearBsdeSpec(mu=-2.0), small_batch)


# ---------------------------------------------------------------- linear explicit solver

def test_linear_trivial_solution(small_batch):
    sol = solve_linear_explicit(LinearBsdeSpec(terminal_F=1.0), small_batch)
    np.testing.assert_allclose(sol.Y, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.Z, 0.0, atol=1e-12)
    np.testing.assert_allclose(sol.K, 0.0, atol=1e-12)


def test_linear_running_cost_only(small_batch):
    sol = solve_linear_explicit(LinearBsdeSpec(phi=1.0, terminal_F=0.0), small_batch)
    exact = np.broadcast_to(1.0 - small_batch.base.knots, sol.Y.shape)
    np.testing.assert_allclose(sol.Y, exact, atol=1e-12)


def test_linear_terminal_exact_and_no_jump_after_default(small_batch):
    sol = solve_linear_explicit(LinearBsdeSpec(**GENERAL, terminal_F=_F), small_batch)
    assert np.array_equal(sol.Y[:, -1], _F(small_batch))
    assert np.all(sol.K[small_batch.base_H > 0] == 0.0)
    assert np.all(np.isfinite(sol.Y)) and np.all(np.isfinite(sol.Y_pathwise))


def test_linear_martingale_plug_back(medium_batch):
    spec = LinearBsdeSpec(**GENERAL, terminal_F=_F)
    sol = solve_linear_explicit(spec, medium_batch)
    G = sol.diagnostics["Gamma"]
    b = medium_batch
    Gb = b.at_base(G)
    seg = 0.5 * b.dt * (G[:, :-1] + G[:, 1:]) * GENERAL["phi"]
    cum = np.concatenate([np.zeros((b.n_paths, 1)), np.cumsum(seg, axis=1)], axis=1)
    phi_int = b.at_base(cum)
    v = Gb * sol.Y + phi_int
    m = v.mean(axis=0)
    se = v.std(axis=0, ddof=1) / math.sqrt(b.n_paths)
    for k in range(2, b.base.n_steps, 2):
        assert abs(m[k] - m[0]) <= 3 * math.hypot(se[k], se[0])


# ---------------------------------------------------------------- regression backward solver

def test_zero_generator_constant_terminal(small_batch):
    spec = GeneralBsdeSpec(lambda s, y, z, k: 0.0 * y, 2.5, 0.0)
    for scheme in ("explicit", "implicit"):
        sol = solve_regression_backward(spec, small_batch, scheme=scheme)
        np.testing.assert_allclose(sol.Y, 2.5, atol=1e-12)
        np.testing.assert_allclose(sol.Z, 0.0, atol=1e-12)
        np.testing.assert_allclose(sol.K, 0.0, atol=1e-12)
        assert bsde_residual(sol, spec, small_batch) <= 1e-12


def _discount_spec(r):
    return GeneralBsdeSpec(lambda s, y, z, k: -r * y, 1.0, r)


def test_scalar_ode_first_order_convergence():
    r = 0.5
    errs = [abs(solve_regression_backward(_discount_spec(r), _deterministic(n)).Y0
                - oracles.DISCOUNT_HALF) for n in (10, 20, 40, 80)]
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    np.testing.assert_allclose(ratios, 0.5, atol=0.05)


def test_scalar_ode_residual_decreases_with_step():
    res = []
    for n in (10, 20, 40):
        b = _deterministic(n)
        res.append(bsde_residual(solve_regression_backward(_discount_spec(0.5), b), _discount_spec(0.5), b))
    assert res[0] > res[1] > res[2]


def test_implicit_scheme_solves_its_fixed_point():
    r = 0.5
    b = _deterministic(20)
    sol = solve_regression_backward(_discount_spec(r), b, scheme="implicit")
    dt = 1.0 / 20
    assert sol.Y0 == pytest.approx((1.0 + r * dt) ** -20, rel=1e-9)


def test_regression_solver_no_jump_after_default(small_batch):
    g = LinearBsdeSpec(**GENERAL, terminal_F=_F).as_general(small_batch)
    for est in ("value-fit", "increment"):
        sol = solve_regression_backward(g, small_batch, jump_estimator=est)
        assert np.all(sol.K[small_batch.base_H > 0] == 0.0)
        assert np.array_equal(sol.Y[:, -1], _F(small_batch))


def test_plug_back_residual_falls_as_missing_features_are_added(medium_batch):
    g = LinearBsdeSpec(**GENERAL, terminal_F=_F).as_general(medium_batch)
    res = [bsde_residual(solve_regression_backward(g, medium_batch, RegressionBasis(names)), g, medium_batch)
           for names in (("1",), ("1", "W"), ("1", "W", "W2"), ("1", "W", "W2", "W3"))]
    assert all(b < a for a, b in zip(res, res[1:])), res


def test_regression_matches_explicit_solution(medium_batch):
    spec = LinearBsdeSpec(**GENERAL, terminal_F=_F)
    ex = solve_linear_explicit(spec, medium_batch)
    reg = solve_regression_backward(spec.as_general(medium_batch), medium_batch)
    assert abs(reg.Y0 - ex.Y0) <= 3 * math.hypot(reg.Y0_se, ex.Y0_se)


def test_unknown_scheme_rejected(small_batch):
    with pytest.raises(InvalidInputError):
        solve_regression_backward(_discount_spec(0.1), small_batch, scheme="rk4")
    with pytest.raises(InvalidInputError):
        solve_regression_backward(_discount_spec(0.1), small_batch, jump_estimator="magic")


def test_integrability_and_lipschitz_checks(small_batch):
    g = LinearBsdeSpec(**GENERAL, terminal_F=_F).as_general(small_batch)
    assert g.check_integrability(small_batch)["ok"]
    assert g.check_lipschitz(small_batch)["ok"]
    bad = GeneralBsdeSpec(lambda s, y, z, k: 10 * y, 1.0, 1.0)
    assert not bad.check_lipschitz(small_batch)["ok"]


# ---------------------------------------------------------------- contraction

def test_contraction_generator_without_unknowns(small_batch):
    spec = GeneralBsdeSpec(lambda s, y, z, k: np.sin(s.W), _F, 0.0)
    rep = contraction_diagnostic(spec, small_batch)
    assert rep.converged and rep.norms[1] == 0.0 and rep.iterations == 1


def test_contraction_small_lipschitz_ratio_below_half(small_batch):
    spec = GeneralBsdeSpec(lambda s, y, z, k: 0.1 * y + 0.05 * z + 0.05 * k, _F, 0.1)
    rep = contraction_diagnostic(spec, small_batch, rho=1.0, max_iter=8)
    assert len(rep.ratios) >= 3
    assert all(r < 0.5 for r in rep.ratios)
