"""Independent reference values for the tests.

Each function is written from the model definitions without calling the
package.  The frozen literals were produced once by these functions and are
checked against them in ``test_oracles.py``.
"""

import math

import numpy as np

# P(tau > 1) for constant intensity 0.5
SURVIVAL_CONST_HALF_AT_1 = 0.6065306597126334
# P(tau > 1) for intensity 2t (cumulative t^2)
SURVIVAL_LINEAR_AT_1 = 0.36787944117144233
# exp(-r T) for r = 0.5, T = 1
DISCOUNT_HALF = 0.6065306597126334
# compensated drift b + lambda gamma for b = 1, gamma = 2, lambda = 0.5
EFFECTIVE_DRIFT_EXAMPLE = 2.0
# optimal consumption at t = 0 for theta = 1, T = 1
PI_HAT_0 = 0.5
# adjoint identity p_0 S_0 for theta = 1, T = 1
P0_S0_THETA_ONE = 2.0


def survival_constant(c, t):
    return math.exp(-c * t)


def survival_linear(t):
    """Intensity ``2s``: ``P(tau > t) = exp(-t^2)``."""
    return math.exp(-t * t)


def tau_linear_from_exponential(e, T):
    """Inverse transform for intensity ``2s``: ``tau = sqrt(E)``, censored at ``T``."""
    tau = np.sqrt(np.asarray(e, dtype=float))
    return np.where(tau <= T, tau, np.inf)


def geometric_wealth(S0, alpha, pi, beta, mu, t, W, H):
    """Constant-coefficient wealth: lognormal part times ``(1 + mu)^H``."""
    return S0 * np.exp((alpha - pi - 0.5 * beta * beta) * t + beta * W) * (1.0 + mu) ** H


def discount(r, T):
    return math.exp(-r * T)


def pi_hat_constant_theta(theta, T, t):
    return 1.0 / (theta + T - np.asarray(t, dtype=float))


def truncated_exponential_cdf(c, T, x):
    """Law of ``tau`` given ``tau <= T`` for constant intensity ``c``."""
    return (1.0 - np.exp(-c * np.asarray(x))) / (1.0 - math.exp(-c * T))


def ks_distance(sample, cdf):
    x = np.sort(np.asarray(sample))
    n = x.size
    f = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))
