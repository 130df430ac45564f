import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smpdefault.errors import RegressionError
from smpdefault.paths import IntensitySpec, TimeGrid, build_filtration_batch
from smpdefault.regression import RegressionBasis, feature, fit_knot


@pytest.fixture(scope="module")
def state(small_batch):
    return small_batch.base_state(12)


def test_exact_recovery_of_a_basis_function(state):
    target = 2.0 + 3.0 * state.W - state.W ** 2 + 0.5 * state.H * np.where(state.H > 0, state.t - state.tau, 0)
    _, fitted = fit_knot(RegressionBasis(), state, target, knot=12)
    np.testing.assert_allclose(fitted, target, atol=1e-10)


def test_constant_and_collinear_columns_are_dropped(state):
    kf, fitted = fit_knot(RegressionBasis(("1", "t", "W", "H")), state, state.W, knot=12)
    for fit in kf.strata.values():
        assert "t" in fit.dropped and "H" in fit.dropped
    np.testing.assert_allclose(fitted, state.W, atol=1e-12)


def test_mask_excludes_rows(state):
    alive = state.H == 0
    kf, fitted = fit_knot(RegressionBasis(), state, state.W, knot=12, mask=alive)
    assert np.all(fitted[~alive] == 0.0)
    assert not kf.has(1) and kf.has(0)


def test_weighted_fit_matches_direct_weighted_least_squares(state):
    rng = np.random.default_rng(1)
    y = np.exp(state.W) + rng.normal(size=state.W.size)
    w = rng.uniform(0.5, 2.0, size=y.size)
    basis = RegressionBasis(("1", "W"), split_on_default=False)
    _, fitted = fit_knot(basis, state, y, weights=w)
    D = np.column_stack([np.ones_like(y), state.W])
    coef, *_ = np.linalg.lstsq(D * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)
    np.testing.assert_allclose(fitted, D @ coef, rtol=1e-10, atol=1e-12)
    with pytest.raises(RegressionError):
        fit_knot(basis, state, y, weights=-w)


def test_multiple_targets_share_one_design(state):
    Y = np.column_stack([state.W, state.W ** 2])
    kf, fitted = fit_knot(RegressionBasis(), state, Y)
    assert fitted.shape == Y.shape
    np.testing.assert_allclose(kf.predict(state), fitted, atol=1e-12)


def test_feature_lookup_and_validation(state):
    np.testing.assert_allclose(feature("expW:2")(state), np.exp(2 * state.W - 2 * state.t))
    with pytest.raises(RegressionError):
        feature("nope")
    with pytest.raises(RegressionError):
        RegressionBasis(("W", "t"))
    with pytest.raises(RegressionError):
        feature("X")(state)
    assert RegressionBasis(("W", "1")).features[0] == "1"


def test_prediction_se_shrinks_with_sample_size():
    def se(n):
        b = build_filtration_batch(TimeGrid.uniform(1.0, 4), IntensitySpec.constant(0.0), 9, n)
        s = b.base_state(2)
        y = s.W + np.random.default_rng(0).normal(size=n)
        kf, _ = fit_knot(RegressionBasis(("1", "W"), split_on_default=False), s, y)
        return float(np.mean(kf.prediction_se(s)))

    assert se(4000) < se(400)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 4))
def test_least_squares_residual_is_monotone_in_nested_bases(seed, power):
    b = build_filtration_batch(TimeGrid.uniform(1.0, 4), IntensitySpec.constant(0.6), seed, 300)
    s = b.base_state(3)
    y = np.cos(s.W) ** power + s.H
    chain = [("1",), ("1", "W"), ("1", "W", "W2"), ("1", "W", "W2", "W3"),
             ("1", "W", "W2", "W3", "Hdt")]
    res = []
    for names in chain:
        _, fitted = fit_knot(RegressionBasis(names), s, y)
        res.append(float(np.sum((y - fitted) ** 2)))
    assert all(b_ <= a_ * (1 + 1e-9) + 1e-12 for a_, b_ in zip(res, res[1:]))
