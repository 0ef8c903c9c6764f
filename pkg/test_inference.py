"""
Tests for the KKT residual, density at zero, sandwich standard errors,
pseudo-R^2 and Moran's I.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import norm

from admm_solver import AdmmConfig, fit_global_qr
from conftest import philox
from errors import DataError, SingularSystemError
from inference import (
    deviation_summary,
    density_at_zero,
    kkt_components,
    kkt_residual,
    morans_i,
    pseudo_r2,
    sandwich,
    silverman_bandwidth,
)
from model_core import ParameterState, PenaltyConfig, SpatialDataset
from spatial_graph import build_graph


def _global_data(n, seed, beta=(1.0, 2.0)):
    rng = philox(seed)
    z = rng.standard_normal(n)
    Z = np.column_stack([np.ones(n), z])
    y = Z @ np.asarray(beta) + rng.standard_normal(n)
    return SpatialDataset(y, Z, np.empty((n, 0)), rng.uniform(size=(n, 2)))


def _moran_oracle(r, W):
    n = r.size
    z = r - r.mean()
    S0 = W.sum()
    statistic = n / S0 * (z @ W @ z) / (z @ z)
    S1 = 0.5 * np.sum((W + W.T) ** 2)
    S2 = np.sum((W.sum(axis=1) + W.sum(axis=0)) ** 2)
    b2 = n * np.sum(z ** 4) / np.sum(z ** 2) ** 2
    EI = -1.0 / (n - 1)
    A = n * ((n ** 2 - 3 * n + 3) * S1 - n * S2 + 3 * S0 ** 2)
    B = b2 * ((n ** 2 - n) * S1 - 2 * n * S2 + 6 * S0 ** 2)
    variance = (A - B) / ((n - 1) * (n - 2) * (n - 3) * S0 ** 2) - EI ** 2
    return statistic, variance


class TestKkt:
    def test_zero_groups_below_threshold_have_no_violation(self, dataset, dataset_graph):
        state = ParameterState(np.zeros(2), np.zeros(2), np.zeros((2, 80)))
        parts = kkt_components(dataset, dataset_graph, state, PenaltyConfig(tau=0.5, lambda1=1e6))
        assert parts["groups"] == [0.0, 0.0]
        assert parts["global_Z"] > 0

    def test_residual_is_sum_of_components(self, dataset, dataset_graph, rng):
        state = ParameterState(rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal((2, 80)))
        penalty = PenaltyConfig(tau=0.3, lambda1=0.5, lambda2=2.0)
        parts = kkt_components(dataset, dataset_graph, state, penalty)
        total = parts["global_Z"] + parts["global_X"] + sum(parts["groups"])
        assert kkt_residual(dataset, dataset_graph, state, penalty) == pytest.approx(total)

    def test_global_fit_is_nearly_stationary(self):
        data = _global_data(500, seed=1)
        fit = fit_global_qr(data, None, 0.5, AdmmConfig(eps_abs=1e-8, eps_rel=1e-8, max_iter=20000))
        assert fit.kkt_residual <= 1e-2 * np.sqrt(500)


class TestDensity:
    def test_normal_density_at_zero(self):
        r = philox(2).standard_normal(5000)
        f0 = density_at_zero(r)
        assert f0.shape == (5000,)
        assert f0[0] == pytest.approx(norm.pdf(0.0), abs=0.02)

    def test_silverman_rule(self):
        r = philox(3).standard_normal(1000)
        assert 0.9 * 0.8 * 1000 ** -0.2 < silverman_bandwidth(r) < 0.9 * 1.2 * 1000 ** -0.2

    def test_degenerate_inputs(self):
        with pytest.raises(DataError):
            density_at_zero(np.arange(5.0))
        with pytest.raises(DataError):
            density_at_zero(np.ones(50))


class TestSandwich:
    def test_standard_errors_match_asymptotic_formula(self):
        n = 4000
        data = _global_data(n, seed=4)
        fit = fit_global_qr(data, None, 0.5)
        estimate = sandwich(data, fit.state, 0.5)
        gram = data.Z.T @ data.Z / n
        expected = np.sqrt(np.diag(0.25 / norm.pdf(0.0) ** 2 * np.linalg.inv(gram)) / n)
        assert_allclose(estimate.standard_errors, expected, rtol=0.2)
        assert estimate.covariance.shape == (2, 2)
        assert set(estimate.as_dict()) == {"standard_errors", "covariance", "density_bandwidth"}

    def test_rescaled_column_rescales_its_standard_error(self):
        data = _global_data(800, seed=9)
        fit = fit_global_qr(data, None, 0.5)
        base = sandwich(data, fit.state, 0.5).standard_errors
        Z = data.Z * np.array([1.0, 3.0])
        scaled = SpatialDataset(data.y, Z, data.X, data.locations)
        state = ParameterState(fit.state.alpha / np.array([1.0, 3.0]), fit.state.beta_G, fit.state.delta)
        assert_allclose(sandwich(scaled, state, 0.5).standard_errors, base / np.array([1.0, 3.0]), rtol=1e-8)

    def test_singular_design(self):
        n = 200
        rng = philox(5)
        Z = np.ones((n, 2))
        data = SpatialDataset(rng.standard_normal(n), Z, np.empty((n, 0)), rng.uniform(size=(n, 2)))
        state = ParameterState(np.array([0.0, 0.0]), np.zeros(0), np.zeros((0, n)))
        with pytest.raises(SingularSystemError):
            sandwich(data, state, 0.5)

    @pytest.mark.slow
    def test_coverage_of_nominal_95_percent_intervals(self):
        covered = 0
        for seed in range(100):
            data = _global_data(2000, seed=100 + seed)
            fit = fit_global_qr(data, None, 0.5)
            se = sandwich(data, fit.state, 0.5).standard_errors
            covered += int(abs(fit.state.alpha[1] - 2.0) <= 1.96 * se[1])
        assert covered >= 85


class TestPseudoR2:
    def test_perfect_and_null_predictions(self):
        y = philox(6).standard_normal(101)
        assert pseudo_r2(y, y, 0.5) == pytest.approx(1.0)
        null = np.full(101, np.quantile(y, 0.5, method="inverted_cdf"))
        assert pseudo_r2(y, null, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_undefined_cases(self):
        with pytest.raises(DataError):
            pseudo_r2(np.ones(10), np.zeros(10), 0.5)
        with pytest.raises(DataError):
            pseudo_r2(np.ones(10), np.zeros(9), 0.5)


class TestMoransI:
    def test_matches_dense_formula(self, graph, rng):
        r = rng.standard_normal(graph.n)
        result = morans_i(r, graph)
        statistic, variance = _moran_oracle(r, graph.adjacency.toarray())
        assert result["statistic"] == pytest.approx(statistic, rel=1e-10)
        assert result["variance"] == pytest.approx(variance, rel=1e-8)
        assert result["expectation"] == pytest.approx(-1.0 / (graph.n - 1))

    def test_iid_residuals_show_no_autocorrelation(self):
        locations = philox(7).uniform(size=(1000, 2))
        graph = build_graph(locations, k=8)
        passing = 0
        for seed in range(20):
            result = morans_i(philox(500 + seed).standard_normal(1000), graph)
            passing += int(abs(result["statistic"]) < 0.05 and result["p_value"] > 0.01)
        assert passing >= 17

    def test_smooth_field_is_detected(self):
        locations = philox(8).uniform(size=(400, 2))
        graph = build_graph(locations, k=8)
        field = np.sin(3 * locations[:, 0]) + np.cos(3 * locations[:, 1])
        result = morans_i(field, graph)
        assert result["statistic"] > 0.5
        assert result["p_value"] < 1e-6

    def test_constant_residuals(self, graph):
        with pytest.raises(DataError):
            morans_i(np.ones(graph.n), graph)


def test_deviation_summary_rows():
    state = ParameterState(np.zeros(1), np.array([1.5, -2.0]), np.array([[0.0, 0.0, 0.0], [1.0, -1.0, 0.0]]))
    rows = deviation_summary(state, ["a", "b"])
    assert [row["covariate"] for row in rows] == ["a", "b"]
    assert rows[0]["local"] is False and rows[1]["local"] is True
    assert rows[1]["delta_norm"] == pytest.approx(np.sqrt(2.0))
    assert (rows[1]["delta_min"], rows[1]["delta_max"]) == (-1.0, 1.0)
