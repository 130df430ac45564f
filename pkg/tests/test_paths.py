import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from smpdefault.errors import InvalidInputError
from smpdefault.paths import (IntensitySpec, RngSpec, TimeGrid, batch_quadratic_variation_ok,
                              build_filtration_batch, build_filtration_path,
                              quadratic_variation_check, sample_default_time)

SEED = 20240601


# ---------------------------------------------------------------- sample_default_time

def test_zero_intensity_never_defaults():
    spec = IntensitySpec.constant(0.0)
    assert all(math.isinf(sample_default_time(spec, RngSpec(SEED, i), 5.0)) for i in range(200))
    b = build_filtration_batch(TimeGrid.uniform(1.0, 4), spec, SEED, 500)
    assert np.all(np.isinf(b.tau)) and np.all(b.H == 0)


def test_constant_intensity_survival_matches_exponential():
    c, n = 0.7, 100_000
    b = build_filtration_batch(TimeGrid.uniform(2.0, 2), IntensitySpec.constant(c), SEED, n)
    for t in (0.25, 0.5, 1.0, 2.0):
        p = oracles.survival_constant(c, t)
        assert abs(np.mean(b.tau > t) - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_linear_intensity_matches_square_root_inverse_transform():
    spec = IntensitySpec.piecewise_linear((0.0, 1.0), (0.0, 2.0))
    e = np.array([RngSpec(SEED, i).generator().standard_exponential() for i in range(3000)])
    drawn = np.array([sample_default_time(spec, RngSpec(SEED, i), 1.0) for i in range(3000)])
    expected = oracles.tau_linear_from_exponential(e, 1.0)
    assert np.array_equal(np.isinf(drawn), np.isinf(expected))
    fin = np.isfinite(expected)
    np.testing.assert_allclose(drawn[fin], expected[fin], rtol=1e-12, atol=1e-14)


def test_linear_intensity_survival_at_one():
    n = 100_000
    spec = IntensitySpec.piecewise_linear((0.0, 1.0), (0.0, 2.0))
    b = build_filtration_batch(TimeGrid.uniform(1.0, 2), spec, SEED, n)
    p = oracles.SURVIVAL_LINEAR_AT_1
    assert abs(np.mean(np.isinf(b.tau)) - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_truncated_exponential_ks_distance():
    c, T, n = 0.5, 2.0, 100_000
    b = build_filtration_batch(TimeGrid.uniform(T, 2), IntensitySpec.constant(c), SEED + 1, n)
    tau = b.tau[np.isfinite(b.tau)]
    assert oracles.ks_distance(tau, lambda x: oracles.truncated_exponential_cdf(c, T, x)) <= 0.02


def test_negative_intensity_rejected():
    with pytest.raises(InvalidInputError):
        IntensitySpec.constant(-0.1)
    with pytest.raises(InvalidInputError):
        IntensitySpec.piecewise_linear((0.0, 1.0), (0.5, -0.5))


def test_time_grid_validation():
    with pytest.raises(InvalidInputError):
        TimeGrid.uniform(1.0, 1)
    with pytest.raises(InvalidInputError):
        TimeGrid.uniform(0.0, 10)
    with pytest.raises(InvalidInputError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))


def test_insert_tau_does_not_duplicate_existing_knot():
    g = TimeGrid.uniform(1.0, 4)
    assert g.insert_tau(0.5).knots.size == g.knots.size
    assert g.insert_tau(0.5).tau_index == 2
    h = g.insert_tau(0.3)
    assert h.knots.size == g.knots.size + 1 and h.knots[h.tau_index] == 0.3
    assert g.insert_tau(math.inf) is g


# ---------------------------------------------------------------- build_filtration_path

def _find_path(defaulted: bool, intensity=IntensitySpec.constant(1.0)):
    for i in range(1000):
        p = build_filtration_path(TimeGrid.uniform(1.0, 10), intensity, RngSpec(SEED, i))
        if (p.tau <= 1.0) == defaulted:
            return p
    raise AssertionError("no such path")


def test_compensator_before_default_is_exact():
    lam = IntensitySpec.piecewise_linear((0.0, 0.5, 1.0), (0.2, 1.0, 0.4))
    p = _find_path(False, lam)
    np.testing.assert_array_equal(p.H, 0.0)
    assert np.array_equal(p.M, -lam.cumulative(p.grid.knots))


def test_jump_at_default_and_no_compensator_afterwards():
    p = _find_path(True)
    k = p.grid.tau_index
    assert p.grid.knots[k] == p.tau
    assert p.M[k] - p.M[k - 1] == pytest.approx(1.0 - (p.compensator[k] - p.compensator[k - 1]))
    assert p.m_jumps()[k] == 1.0
    np.testing.assert_array_equal(p.lambda_G[k + 1:], 0.0)
    np.testing.assert_array_equal(np.diff(p.M[k:]), 0.0)


def test_quadratic_variation_on_both_path_types():
    q = _find_path(False)
    assert quadratic_variation_check(q)
    np.testing.assert_array_equal(np.cumsum(q.m_jumps() ** 2), 0.0)
    p = _find_path(True)
    assert quadratic_variation_check(p)
    assert np.array_equal(np.cumsum(p.m_jumps() ** 2), p.H)


def test_quadratic_variation_every_built_path(small_batch):
    assert batch_quadratic_variation_ok(small_batch).all()
    assert all(quadratic_variation_check(small_batch.path(i)) for i in range(0, 2000, 97))


def test_martingale_mean_of_M():
    n = 100_000
    b = build_filtration_batch(TimeGrid.uniform(1.0, 10), IntensitySpec.constant(0.5), SEED, n)
    M = b.at_base(b.M)
    se = M.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(M.mean(axis=0))[1:] <= 3 * se[1:])


# ---------------------------------------------------------------- determinism

def test_same_rng_spec_gives_identical_arrays():
    g = TimeGrid.uniform(1.0, 16)
    lam = IntensitySpec.constant(0.9)
    a = build_filtration_path(g, lam, RngSpec(7, 3))
    b = build_filtration_path(g, lam, RngSpec(7, 3))
    for name in ("dW", "H", "M", "lambda_G", "compensator"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_paths_do_not_depend_on_batch_position():
    g = TimeGrid.uniform(1.0, 16)
    lam = IntensitySpec.constant(0.9)
    whole = build_filtration_batch(g, lam, 11, 40)
    part = build_filtration_batch(g, lam, 11, 10, first_stream=30)
    assert whole.W.tobytes()[-10 * whole.W[0].nbytes:] == part.W.tobytes()
    assert np.array_equal(whole.tau[30:], part.tau)


# ---------------------------------------------------------------- properties

@st.composite
def piecewise_intensity(draw):
    n = draw(st.integers(1, 4))
    gaps = draw(st.lists(st.floats(0.05, 1.0), min_size=n - 1, max_size=n - 1))
    times = np.concatenate([[0.0], np.cumsum(gaps)]) if n > 1 else np.array([0.0])
    values = draw(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 3.0)), min_size=n, max_size=n))
    return IntensitySpec.piecewise_linear(tuple(times), tuple(values))


@settings(max_examples=60, deadline=None)
@given(piecewise_intensity(), st.floats(0.0, 4.0))
def test_inverse_cumulative_inverts_cumulative(spec, t):
    L = float(spec.cumulative(t))
    if L > 0:
        back = float(spec.inverse_cumulative(L))
        assert float(spec.cumulative(back)) == pytest.approx(L, rel=1e-9, abs=1e-12)
        # the inverse is ill-conditioned where the intensity is tiny; any overshoot past t
        # must lie where the cumulative intensity is flat to rounding
        if back > t + 1e-9:
            assert float(spec.cumulative(back)) - L <= 1e-12


@settings(max_examples=25, deadline=None)
@given(piecewise_intensity(), st.integers(0, 2 ** 32), st.integers(2, 12))
def test_batch_invariants_hold_for_any_intensity(spec, seed, n_steps):
    b = build_filtration_batch(TimeGrid.uniform(1.0, n_steps), spec, seed, 30)
    assert batch_quadratic_variation_ok(b).all()
    # the compensator is the closed-form integrated intensity, stopped at tau
    assert np.array_equal(b.A, spec.cumulative(np.minimum(b.t, b.tau[:, None])))
    assert np.array_equal(b.dM, b.dH - b.dA)
    # tau is a column of every defaulted path
    d = b.defaulted
    assert np.all(b.t[d, b.jump_col[d] + 1] == b.tau[d])
