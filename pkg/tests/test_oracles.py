"""The frozen reference values agree with the oracle functions that produced them."""

import math

import oracles


def test_frozen_survival_values():
    assert oracles.SURVIVAL_CONST_HALF_AT_1 == oracles.survival_constant(0.5, 1.0)
    assert oracles.SURVIVAL_LINEAR_AT_1 == oracles.survival_linear(1.0)
    assert oracles.SURVIVAL_LINEAR_AT_1 == math.exp(-1.0)


def test_frozen_discount_and_drift():
    assert oracles.DISCOUNT_HALF == oracles.discount(0.5, 1.0)
    assert oracles.EFFECTIVE_DRIFT_EXAMPLE == 1.0 + 0.5 * 2.0


def test_frozen_log_utility_values():
    assert oracles.PI_HAT_0 == float(oracles.pi_hat_constant_theta(1.0, 1.0, 0.0))
    assert oracles.P0_S0_THETA_ONE == 1.0 + 1.0 - 0.0
