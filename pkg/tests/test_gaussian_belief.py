import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcbf.errors import BeliefError, ConfigurationError, DegenerateDirectionError, DimensionError, DomainError, SingularGradientError
from bcbf.gaussian_belief import (
    GaussianBelief,
    RiskHalfSpace,
    belief_dim,
    erf,
    erfinv,
    prob_halfspace,
    risk_factor,
    state_dim,
    unvec_sym,
    var_gradient,
    var_value,
    vec_sym,
)

mpmath.mp.dps = 40


def random_spd(rng, n, scale=1.0):
    M = rng.normal(size=(n, n))
    return scale * (M @ M.T / n + 0.05 * np.eye(n))


class TestSpecialFunctions:
    def test_erf_zero(self):
        assert erf(0.0) == 0.0

    def test_erfinv_frozen_values(self):
        # independent high-precision oracle
        assert erfinv(0.98) == pytest.approx(1.6449763571331870, abs=1e-12)
        assert erfinv(0.8) == pytest.approx(0.9061938024368232, abs=1e-12)
        assert round(erfinv(0.98), 5) == 1.64498
        assert round(erfinv(0.8), 5) == 0.90619

    @pytest.mark.parametrize("p", np.concatenate([np.linspace(-0.999999, 0.999999, 401), [1e-300, -1e-17, 1 - 1e-15]]))
    def test_erfinv_matches_mpmath(self, p):
        exact = float(mpmath.erfinv(mpmath.mpf(p)))
        assert erfinv(p) == pytest.approx(exact, rel=1e-12, abs=1e-12)

    @given(st.floats(min_value=-0.9999999, max_value=0.9999999))
    def test_roundtrip(self, p):
        assert abs(erf(erfinv(p)) - p) <= 1e-12

    @given(st.floats(min_value=-6, max_value=6))
    def test_erf_odd_and_bounded(self, x):
        assert erf(-x) == -erf(x)
        assert -1.0 <= erf(x) <= 1.0

    def test_erf_matches_mpmath(self):
        for x in np.linspace(-5, 5, 201):
            assert erf(x) == pytest.approx(float(mpmath.erf(mpmath.mpf(x))), abs=1e-15)

    @pytest.mark.parametrize("p", [1.0, -1.0, 1.5, float("nan")])
    def test_erfinv_domain(self, p):
        with pytest.raises(DomainError):
            erfinv(p)

    def test_risk_factor(self):
        assert risk_factor(0.5) == 0.0
        assert risk_factor(0.01) == pytest.approx(erfinv(0.98))
        with pytest.raises((ConfigurationError, DomainError)):
            risk_factor(0.0)


class TestVecEncoding:
    def test_dimensions(self):
        assert belief_dim(4) == 14
        assert belief_dim(6) == 27
        assert state_dim(14) == 4
        with pytest.raises(DimensionError):
            state_dim(13)

    def test_row_major_upper_triangle(self):
        S = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
        np.testing.assert_array_equal(vec_sym(S), [1, 2, 3, 4, 5, 6])
        P = np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 0.25], [0.5, 0.25, 2.0]])
        b = GaussianBelief([7.0, 8.0, 9.0], P)
        np.testing.assert_array_equal(b.vec(), [7, 8, 9, 4, 1, 0.5, 3, 0.25, 2])

    @given(st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_roundtrip_exact(self, n, seed):
        rng = np.random.default_rng(seed)
        M = rng.normal(size=(n, n))
        S = M + M.T
        np.testing.assert_array_equal(unvec_sym(vec_sym(S), n), S)
        b = GaussianBelief(rng.normal(size=n), random_spd(rng, n))
        b2 = GaussianBelief.from_vec(b.vec(), n)
        np.testing.assert_array_equal(b2.mean, b.mean)
        np.testing.assert_array_equal(b2.cov, b.cov)

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            GaussianBelief.from_vec(np.zeros(10), 4)


class TestGaussianBelief:
    def test_symmetrized(self):
        b = GaussianBelief([0, 0], [[1.0, 0.2], [0.0, 1.0]])
        np.testing.assert_array_equal(b.cov, b.cov.T)
        assert b.cov[0, 1] == pytest.approx(0.1)

    def test_rejects_indefinite(self):
        with pytest.raises(BeliefError):
            GaussianBelief([0, 0], [[1.0, 0.0], [0.0, -0.1]])

    def test_tiny_negative_eigenvalue_tolerated(self):
        GaussianBelief([0, 0], [[1.0, 0.0], [0.0, -1e-10]])

    def test_repair_clamps(self):
        b = GaussianBelief([0, 0], [[1.0, 0.0], [0.0, -0.1]], repair=True)
        assert np.linalg.eigvalsh(b.cov).min() >= 0.0

    def test_immutable(self):
        b = GaussianBelief([0.0], [[1.0]])
        with pytest.raises(ValueError):
            b.mean[0] = 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            GaussianBelief([0, 0], np.eye(3))


class TestRiskHalfSpace:
    @pytest.mark.parametrize("delta", [0.0, -0.1, 0.6, 1.0])
    def test_delta_range(self, delta):
        with pytest.raises(ConfigurationError):
            RiskHalfSpace([1.0], 0.0, delta)

    def test_gamma_nonnegative(self):
        with pytest.raises(ConfigurationError):
            RiskHalfSpace([1.0], 0.0, 0.1, gamma=-1.0)

    def test_alpha_nonzero(self):
        with pytest.raises(ConfigurationError):
            RiskHalfSpace([0.0, 0.0], 0.0, 0.1)


class TestProbHalfspace:
    def test_symmetry(self):
        assert prob_halfspace(GaussianBelief([0.0], [[1.0]]), [1.0], 0.0) == 0.5

    def test_mean_on_boundary(self):
        assert prob_halfspace(GaussianBelief([2.0], [[0.25]]), [-1.0], -2.0) == pytest.approx(0.5)

    def test_quantile(self):
        p = prob_halfspace(GaussianBelief([1.3592], [[0.25]]), [-1.0], -2.0)
        assert p == pytest.approx(0.90, abs=1e-4)

    def test_degenerate(self):
        with pytest.raises(DegenerateDirectionError):
            prob_halfspace(GaussianBelief([0.0, 0.0], np.diag([0.0, 1.0])), [1.0, 0.0], 0.0)

    def test_sampling_oracle(self):
        rng = np.random.default_rng(7)
        mean = np.array([0.3, -0.2, 1.0])
        cov = random_spd(rng, 3, 0.5)
        alpha, beta = np.array([0.6, -1.0, 0.4]), 0.1
        b = GaussianBelief(mean, cov)
        N = 10**6
        x = rng.multivariate_normal(mean, cov, size=N)
        freq = np.mean(x @ alpha >= beta)
        p = prob_halfspace(b, alpha, beta)
        se = math.sqrt(p * (1 - p) / N)
        assert abs(freq - p) <= 3 * se


class TestVarValue:
    def test_mean_halfspace(self):
        b = GaussianBelief([1.0, 2.0], [[3.0, 0.5], [0.5, 2.0]])
        hs = RiskHalfSpace([1.0, -1.0], 0.5, 0.5)
        assert var_value(b, hs) == pytest.approx(1.0 - 2.0 - 0.5)

    def test_zero_variance_boundary(self):
        assert var_value(GaussianBelief([2.0], [[0.0]]), RiskHalfSpace([-1.0], -2.0, 0.1)) == 0.0

    def test_wall_example(self):
        h = var_value(GaussianBelief([1.0], [[0.25]]), RiskHalfSpace([-1.0], -2.0, 0.1))
        assert h == pytest.approx(1.0 - 0.9061938024368232 * math.sqrt(0.5), abs=1e-12)
        assert round(h, 4) == 0.3592

    def test_gamma_shifts(self):
        b = GaussianBelief([1.0], [[0.25]])
        h0 = var_value(b, RiskHalfSpace([-1.0], -2.0, 0.1))
        assert var_value(b, RiskHalfSpace([-1.0], -2.0, 0.1, gamma=0.2)) == pytest.approx(h0 - 0.2)

    def test_dimension_check(self):
        with pytest.raises(DimensionError):
            var_value(GaussianBelief([0.0], [[1.0]]), RiskHalfSpace([1.0, 0.0], 0.0, 0.1))

    @given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.49), st.floats(1e-3, 2.0))
    @settings(max_examples=50)
    def test_monotone_in_inflation(self, seed, delta, eps):
        rng = np.random.default_rng(seed)
        n = 3
        alpha = rng.normal(size=n)
        b = GaussianBelief(rng.normal(size=n), random_spd(rng, n))
        hs = RiskHalfSpace(alpha, rng.normal(), delta)
        inflated = GaussianBelief(b.mean, b.cov + eps * np.outer(alpha, alpha))
        assert var_value(inflated, hs) < var_value(b, hs)

    def test_equivalence_with_probability(self):
        rng = np.random.default_rng(11)
        disagreements = 0
        for _ in range(10**4):
            n = int(rng.integers(1, 5))
            alpha = rng.normal(size=n)
            b = GaussianBelief(rng.normal(size=n), random_spd(rng, n))
            delta = float(rng.uniform(0.001, 0.5))
            hs = RiskHalfSpace(alpha, rng.normal(scale=2.0), delta)
            h = var_value(b, hs)
            margin = prob_halfspace(b, alpha, hs.beta) - (1.0 - delta)
            if abs(h) < 1e-9 or abs(margin) < 1e-9:
                continue
            disagreements += (h >= 0) != (margin >= 0)
        assert disagreements == 0


class TestVarGradient:
    def test_mean_halfspace_gradient(self):
        b = GaussianBelief([0.0, 0.0], np.eye(2))
        g = var_gradient(b, RiskHalfSpace([2.0, -1.0], 0.0, 0.5))
        np.testing.assert_array_equal(g, [2.0, -1.0, 0.0, 0.0, 0.0])

    def test_scalar_value(self):
        g = var_gradient(GaussianBelief([0.0], [[1.0]]), RiskHalfSpace([1.0], 0.0, 0.1))
        assert g[1] == pytest.approx(-0.9061938024368232 / math.sqrt(2.0), abs=1e-12)
        assert round(g[1], 5) == -0.64078

    def test_offdiagonal_zero_when_alpha_component_zero(self):
        g = var_gradient(GaussianBelief([0.0, 0.0], np.eye(2)), RiskHalfSpace([1.0, 0.0], 0.0, 0.1))
        assert g[2 + 1] == 0.0

    def test_singular(self):
        with pytest.raises(SingularGradientError):
            var_gradient(GaussianBelief([0.0, 0.0], np.diag([0.0, 1.0])), RiskHalfSpace([1.0, 0.0], 0.0, 0.1))

    @pytest.mark.parametrize("seed", range(20))
    def test_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        n = 3
        b = GaussianBelief(rng.normal(size=n), random_spd(rng, n))
        hs = RiskHalfSpace(rng.normal(size=n), 0.3, float(rng.uniform(0.01, 0.4)))
        g = var_gradient(b, hs)
        v = b.vec()
        fd = np.zeros_like(v)
        for i in range(len(v)):
            step = 1e-6 * max(1.0, abs(v[i]))
            e = np.zeros_like(v)
            e[i] = step
            hp = var_value(GaussianBelief.from_vec(v + e, n), hs)
            hm = var_value(GaussianBelief.from_vec(v - e, n), hs)
            fd[i] = (hp - hm) / (2 * step)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
