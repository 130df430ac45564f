import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smpdefault.errors import NonFiniteCostError
from smpdefault.logutility import WealthModel, closed_form_pi_hat, log_problem
from smpdefault.paths import IntensitySpec, TimeGrid, build_filtration_batch
from smpdefault.sde import ControlProcess, affine_coefficients
from smpdefault.smp import (ControlProblem, Perturbation, assemble_adjoint, check_hamiltonian_partials,
                            check_sufficient, directional_derivative, estimate_J, forward_solve,
                            hamiltonian, hamiltonian_partials, solve_adjoint)

SEED = 20240601
ALPHA, BETA, MU, LAM = 0.05, 0.2, -0.5, 0.3
MODEL = WealthModel(ALPHA, BETA, MU, IntensitySpec.constant(LAM))


def _simple_problem(h=lambda t, x, u: u * u, g=lambda x, s: x, dg=lambda x, s: np.ones_like(x),
                    value_set=(-np.inf, np.inf)):
    return ControlProblem(affine_coefficients(b0=0.1, bu=0.5, s0=0.2, g0=0.3), h,
                          lambda t, x, u: 0.0 * x, lambda t, x, u: 2.0 * u + 0.0 * x, g, dg, 1.0,
                          IntensitySpec.constant(0.8), value_set)


@pytest.fixture(scope="module")
def log_batch():
    return build_filtration_batch(TimeGrid.uniform(1.0, 25), IntensitySpec.constant(LAM), SEED, 4000)


@pytest.fixture(scope="module")
def pi_hat(log_batch):
    return closed_form_pi_hat(MODEL, log_batch).control()


# ---------------------------------------------------------------- Hamiltonian

def test_hamiltonian_reduces_to_running_cost():
    pr = _simple_problem()
    assert hamiltonian(pr, 0.3, 1.2, 0.7, 0.0, 0.0, 0.0, 0.8) == pytest.approx(0.49)
    c = pr.coeffs
    expected = 0.49 + c.b(0.3, 1.2, 0.7) * 1.5 + c.sigma(0.3, 1.2, 0.7) * -0.4
    assert hamiltonian(pr, 0.3, 1.2, 0.7, 1.5, -0.4, 9.0, 0.0) == pytest.approx(expected)


def test_log_model_hamiltonian_and_state_derivative():
    pr = log_problem(MODEL)
    rng = np.random.default_rng(3)
    s, u, p, q, w = rng.uniform(0.2, 2.0, 5), rng.uniform(0.1, 1.0, 5), *rng.normal(size=(3, 5))
    t = rng.uniform(0, 1, 5)
    expected = np.log(s * u) + s * (ALPHA - u + LAM * MU) * p + s * BETA * q + LAM * s * MU * w
    np.testing.assert_allclose(hamiltonian(pr, t, s, u, p, q, w, LAM), expected, rtol=1e-13)
    dx, du = hamiltonian_partials(pr, t, s, u, p, q, w, LAM)
    np.testing.assert_allclose(dx, 1 / s + (ALPHA - u + LAM * MU) * p + BETA * q + LAM * MU * w, rtol=1e-13)
    np.testing.assert_allclose(du, 1 / u - s * p, rtol=1e-13)


def test_gradient_consistency_at_random_points():
    assert check_hamiltonian_partials(log_problem(MODEL), n=1000)["ok"]
    assert check_hamiltonian_partials(_simple_problem(), n=1000)["ok"]
    assert log_problem(MODEL).check_derivatives(0.5, np.array([0.7, 1.3]), np.array([0.4, 0.9]))["ok"]


# ---------------------------------------------------------------- adjoint

def test_adjoint_terminal_value_for_linear_utility(small_batch):
    pr = _simple_problem()
    fwd = forward_solve(pr, ControlProcess.constant(0.4), small_batch)
    assert np.all(assemble_adjoint(pr, fwd).resolve(small_batch)["F"] == 1.0)


def test_adjoint_trivial_when_nothing_depends_on_state(small_batch):
    pr = _simple_problem()
    fwd = forward_solve(pr, ControlProcess.constant(0.4), small_batch)
    adj = solve_adjoint(pr, fwd)
    np.testing.assert_allclose(adj.p, 1.0, atol=1e-12)
    np.testing.assert_allclose(adj.q, 0.0, atol=1e-12)
    np.testing.assert_allclose(adj.w, 0.0, atol=1e-12)
    assert adj.terminal_exact(pr, fwd)


def test_log_adjoint_terminal_condition(log_batch, pi_hat):
    pr = log_problem(MODEL)
    fwd = forward_solve(pr, pi_hat, log_batch)
    adj = solve_adjoint(pr, fwd)
    assert adj.terminal_exact(pr, fwd)
    assert np.array_equal(adj.p[:, -1], 1.0 / fwd.X[:, -1])


# ---------------------------------------------------------------- performance functional

def test_J_of_constant_terminal_cost(small_batch):
    pr = _simple_problem(h=lambda t, x, u: 0.0 * x, g=lambda x, s: 3.0 + 0.0 * x)
    J = estimate_J(pr, ControlProcess.constant(0.1), small_batch)
    assert J.mean == 3.0 and J.se == 0.0


def test_J_of_unit_running_cost(small_batch):
    pr = _simple_problem(h=lambda t, x, u: 1.0 + 0.0 * x, g=lambda x, s: 0.0 * x)
    J = estimate_J(pr, ControlProcess.constant(0.1), small_batch)
    np.testing.assert_allclose(J.values, 1.0, rtol=1e-14)


def test_non_finite_cost_reports_paths(small_batch):
    pr = _simple_problem(g=lambda x, s: np.where(np.arange(x.size) == 7, np.nan, x))
    with pytest.raises(NonFiniteCostError) as exc:
        estimate_J(pr, ControlProcess.constant(0.1), small_batch)
    assert exc.value.path_ids == [7]


def test_optimal_control_beats_twenty_percent_perturbations(log_batch, pi_hat):
    pr = log_problem(MODEL)
    J0 = estimate_J(pr, pi_hat, log_batch).mean
    for c in (0.8, 1.2):
        assert J0 >= estimate_J(pr, pi_hat.scaled(c), log_batch).mean


# ---------------------------------------------------------------- directional derivative

def test_zero_direction_gives_zero_derivative(log_batch, pi_hat):
    dd = directional_derivative(log_problem(MODEL), pi_hat, Perturbation.constant(0.0), log_batch)
    assert dd.fd_value == 0.0 and dd.hamiltonian_value == 0.0


def test_derivative_vanishes_at_optimum(log_batch, pi_hat):
    dd = directional_derivative(log_problem(MODEL), pi_hat, Perturbation.constant(1.0), log_batch)
    assert abs(dd.fd_value) <= 3 * dd.fd_se + dd.fd_error_floor
    assert abs(dd.hamiltonian_value) <= 3 * dd.hamiltonian_se + dd.fd_error_floor
    assert dd.agree


def test_derivative_at_suboptimal_control(log_batch):
    dd = directional_derivative(log_problem(MODEL), ControlProcess.constant(1.0),
                                Perturbation.constant(1.0), log_batch)
    assert dd.agree
    assert abs(dd.fd_value) > 3 * dd.fd_se and abs(dd.hamiltonian_value) > 3 * dd.hamiltonian_se
    assert np.sign(dd.fd_value) == np.sign(dd.hamiltonian_value)


def test_inadmissible_backward_shift_uses_one_sided_difference(small_batch):
    pr = _simple_problem(value_set=(0.5, np.inf))
    dd = directional_derivative(pr, ControlProcess.constant(0.5), Perturbation.constant(1.0), small_batch)
    assert dd.one_sided and dd.agree


@settings(max_examples=5, deadline=None)
@given(st.floats(0.1, 10.0))
def test_scaling_costs_scales_every_derivative(c):
    b = build_filtration_batch(TimeGrid.uniform(1.0, 10), IntensitySpec.constant(LAM), SEED, 500)
    pr = log_problem(MODEL)
    prc = pr.scaled(c)
    ctrl = ControlProcess.constant(0.8)
    assert estimate_J(prc, ctrl, b).mean == pytest.approx(c * estimate_J(pr, ctrl, b).mean, rel=1e-12)
    _, du = hamiltonian_partials(pr, 0.2, 1.1, 0.8, 0.9, 0.1, -0.3, LAM)
    _, duc = hamiltonian_partials(prc, 0.2, 1.1, 0.8, c * 0.9, c * 0.1, -c * 0.3, LAM)
    assert duc == pytest.approx(c * du, rel=1e-12)
    d1 = directional_derivative(pr, ctrl, Perturbation.constant(1.0), b)
    d2 = directional_derivative(prc, ctrl, Perturbation.constant(1.0), b)
    assert d2.hamiltonian_value == pytest.approx(c * d1.hamiltonian_value, rel=1e-9)
    assert d2.fd_value == pytest.approx(c * d1.fd_value, rel=1e-6)
    s1 = check_sufficient(pr, ctrl, b, n_sample=100)
    s2 = check_sufficient(prc, ctrl, b, n_sample=100)
    assert np.sign(s1["foc_margin"]) == np.sign(s2["foc_margin"])


# ---------------------------------------------------------------- sufficient condition

def test_log_terminal_utility_is_concave(log_batch, pi_hat):
    res = check_sufficient(log_problem(MODEL), pi_hat, log_batch)
    assert res["g_concave"] and res["hamiltonian_concave"]
    assert res["verdict"] == "PASS"


def test_overconsumption_fails_first_order_condition(log_batch, pi_hat):
    res = check_sufficient(log_problem(MODEL), pi_hat.scaled(1.5), log_batch)
    assert not res["foc_ok"] and res["foc_margin"] > 0
    assert res["foc_max"] > 3 * res["foc_se"]
    assert res["verdict"] == "FAIL"


def test_convex_terminal_cost_is_flagged(small_batch):
    pr = _simple_problem(g=lambda x, s: x * x, dg=lambda x, s: 2 * x)
    res = check_sufficient(pr, ControlProcess.constant(0.2), small_batch, v_bounds=(0.0, 1.0))
    assert not res["g_concave"]
