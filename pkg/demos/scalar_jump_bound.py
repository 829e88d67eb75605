"""How likely is a single measurement to knock the belief out of the safe set?

A scalar belief sits exactly on the boundary of a VaR wall.  The natural
bound predicts the probability that the next Kalman update lands outside;
gamma_margin gives the extra distance needed to push that below epsilon.
Both are checked against sampled measurements.

    python demos/scalar_jump_bound.py
"""

import math

import numpy as np

from bcbf.barrier import gamma_margin, natural_bound
from bcbf.belief_dynamics import kalman_gain, linear_observation
from bcbf.gaussian_belief import GaussianBelief, RiskHalfSpace, var_value


def sampled_leave(b, hs, obs, n, rng):
    K, H, S = kalman_gain(b, obs)
    cov_plus = (np.eye(b.n) - K @ H) @ b.cov
    z = rng.multivariate_normal(H @ b.mean, S, size=n)
    means = b.mean + (z - H @ b.mean) @ K.T
    spread = hs.risk * math.sqrt(2 * float(hs.alpha @ cov_plus @ hs.alpha))
    return float(np.mean(means @ hs.alpha - hs.beta - spread < 0))


def main():
    rng = np.random.default_rng(0)
    hs = RiskHalfSpace([-1.0], -2.0, 0.01)  # x <= 2 with 99 % confidence
    prior_var = 0.3
    b = GaussianBelief([2.0 - hs.risk * math.sqrt(2 * prior_var)], [[prior_var]])
    print(f"prior mean {b.mean[0]:.4f}, h_b = {var_value(b, hs):.2e}")

    print("\nsensor noise   natural bound   sampled")
    for r in (1.0, 0.3, 0.1, 0.01, 1e-6):
        obs = linear_observation([[1.0]], [[r]], 10.0)
        print(f"{r:>12g}   {natural_bound(b, obs, hs):13.5f}   {sampled_leave(b, hs, obs, 100_000, rng):7.5f}")

    obs = linear_observation([[1.0]], [[0.1]], 10.0)
    print("\nepsilon   gamma    sampled leave after backing off by gamma")
    for eps in (0.5, 0.2, 0.05, 0.01, 0.001):
        g = gamma_margin(b, obs, hs, eps)
        shifted = GaussianBelief(b.mean - g, b.cov)
        print(f"{eps:7g}   {g:.4f}   {sampled_leave(shifted, hs, obs, 100_000, rng):.5f}")


if __name__ == "__main__":
    main()
