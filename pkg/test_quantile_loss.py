"""
Tests for the check-loss primitives: prox against a refined grid search,
Moreau gradients against central differences, group shrinkage.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import philox
from errors import ParameterError
from quantile_loss import MoreauParams, check_tau, group_shrink, moreau_value_grad, prox_check, psi, rho


def _grid_prox(v, gamma, tau, points=2001, rounds=4):
    """argmin_s rho_tau(s) + (s - v)^2 / (2 gamma) by repeated grid refinement."""
    center = v.copy()
    half = np.abs(v) + gamma
    for _ in range(rounds):
        s = center[:, None] + half[:, None] * np.linspace(-1.0, 1.0, points)[None, :]
        f = s * (tau[:, None] - (s < 0)) + (s - v[:, None]) ** 2 / (2.0 * gamma[:, None])
        center = s[np.arange(s.shape[0]), np.argmin(f, axis=1)]
        half = 2.0 * half / (points - 1)
    return center


class TestCheckLoss:
    def test_known_values(self):
        assert rho(2.0, 0.25) == pytest.approx(0.5)
        assert rho(-2.0, 0.25) == pytest.approx(1.5)
        assert rho(0.0, 0.9) == 0.0
        assert_allclose(rho(np.array([-1.0, 1.0]), 0.5), [0.5, 0.5])

    def test_score_at_zero_is_tau(self):
        assert psi(0.0, 0.3) == pytest.approx(0.3)
        assert_allclose(psi(np.array([-1e-12, 1e-12]), 0.3), [-0.7, 0.3])

    def test_subgradient_inequality(self, rng):
        r = rng.standard_normal(5000) * 3
        t = rng.standard_normal(5000) * 3
        tau = rng.uniform(0.01, 0.99, size=5000)
        gap = rho(r - t, tau) - rho(r, tau) + t * psi(r, tau)
        assert np.all(gap >= -1e-12)

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
    def test_tau_outside_unit_interval(self, tau):
        with pytest.raises(ParameterError):
            check_tau(tau)


class TestProx:
    def test_matches_grid_oracle(self):
        rng = philox(3)
        v = rng.standard_normal(1000) * 2.0
        gamma = rng.uniform(0.01, 2.0, size=1000)
        tau = rng.uniform(0.01, 0.99, size=1000)
        expected = _grid_prox(v, gamma, tau)
        actual = np.array([prox_check(v[i], gamma[i], tau[i]) for i in range(v.size)])
        assert_allclose(actual, expected, atol=1e-8)

    def test_dead_zone_boundaries(self):
        gamma, tau = 0.5, 0.3
        assert prox_check(gamma * tau, gamma, tau) == 0.0
        assert prox_check(-gamma * (1 - tau), gamma, tau) == 0.0
        assert prox_check(1.0, gamma, tau) == pytest.approx(1.0 - gamma * tau)
        assert prox_check(-1.0, gamma, tau) == pytest.approx(-1.0 + gamma * (1 - tau))

    def test_nonpositive_gamma_rejected(self):
        with pytest.raises(ParameterError):
            prox_check(1.0, 0.0, 0.5)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.85])
    def test_monotone_and_nonexpansive_on_sorted_grid(self, tau):
        v = np.sort(philox(11).uniform(-4.0, 4.0, size=2000))
        out = prox_check(v, 0.7, tau)
        steps = np.diff(out)
        assert np.all(steps >= 0.0)
        assert np.all(steps <= np.diff(v) + 1e-12)


class TestMoreau:
    def test_gradient_matches_central_differences(self):
        rng = philox(5)
        r = rng.standard_normal(1000) * 2.0
        h = rng.uniform(0.05, 1.0, size=1000)
        tau = rng.uniform(0.05, 0.95, size=1000)
        for ri, hi, ti in zip(r, h, tau):
            params = MoreauParams(h=float(hi), tau=float(ti))
            eps = 1e-6 * hi
            plus, _ = moreau_value_grad(ri + eps, params)
            minus, _ = moreau_value_grad(ri - eps, params)
            _, grad = moreau_value_grad(ri, params)
            assert grad == pytest.approx((plus - minus) / (2 * eps), rel=1e-5, abs=1e-6)

    def test_envelope_below_loss_and_converges(self):
        r = np.linspace(-3, 3, 61)
        for h in (1.0, 0.1, 1e-3):
            value, _ = moreau_value_grad(r, MoreauParams(h=h, tau=0.4))
            assert np.all(value <= rho(r, 0.4) + 1e-12)
            assert np.max(rho(r, 0.4) - value) <= h * max(0.4, 0.6) ** 2 / 2 + 1e-12

    def test_gradient_bounded_by_score_range(self):
        _, grad = moreau_value_grad(np.linspace(-10, 10, 201), MoreauParams(h=0.2, tau=0.25))
        assert grad.min() >= -0.75 - 1e-12
        assert grad.max() <= 0.25 + 1e-12

    def test_invalid_bandwidth(self):
        with pytest.raises(ParameterError):
            MoreauParams(h=0.0, tau=0.5)


class TestGroupShrink:
    def test_zero_below_threshold_is_exact(self):
        out = group_shrink(np.array([0.3, -0.4]), 0.5)
        assert np.all(out == 0.0)

    def test_scaling_above_threshold(self):
        assert_allclose(group_shrink(np.array([3.0, 4.0]), 1.0), [2.4, 3.2])

    def test_zero_threshold_returns_copy(self):
        v = np.array([1.0, 2.0])
        out = group_shrink(v, 0.0)
        out[0] = 9.0
        assert v[0] == 1.0

    def test_negative_threshold(self):
        with pytest.raises(ParameterError):
            group_shrink(np.ones(3), -1.0)

    def test_matches_one_dimensional_oracle_along_the_ray(self):
        rng = philox(13)
        for _ in range(20):
            v = rng.standard_normal(6) * rng.uniform(0.1, 3.0)
            kappa = rng.uniform(0.0, 2.0)
            radius = float(np.linalg.norm(v))
            t = np.linspace(0.0, radius, 200001)
            best = t[np.argmin(kappa * t + 0.5 * (t - radius) ** 2)]
            out = group_shrink(v, kappa)
            assert np.linalg.norm(out) == pytest.approx(best, abs=2 * radius / 200000 + 1e-12)
            if best > 0:
                assert_allclose(out / np.linalg.norm(out), v / radius, atol=1e-12)

    def test_no_perturbation_lowers_the_prox_objective(self):
        rng = philox(14)
        v, kappa = rng.standard_normal(5), 0.8

        def value(x):
            return kappa * np.linalg.norm(x) + 0.5 * np.sum((x - v) ** 2)

        out = group_shrink(v, kappa)
        for _ in range(200):
            assert value(out) <= value(out + 1e-3 * rng.standard_normal(5)) + 1e-15
