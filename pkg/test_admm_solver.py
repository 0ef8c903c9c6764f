"""
Tests for the ADMM solver: the constrained delta_j subproblem against a dense
KKT solve, the global-QR special case and full fits on small instances.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from admm_solver import (
    AdmmConfig,
    AdmmState,
    factorize_design,
    fit_admm,
    fit_global_qr,
    projected_pcg,
    update_delta_j,
    update_primal_block,
    update_s,
    update_z_and_duals,
)
from conftest import make_dataset, philox
from errors import DataError, SingularSystemError
from model_core import ParameterState, PenaltyConfig, SpatialDataset, objective, predict_quantile
from spatial_graph import build_graph, orthogonal_center

TIGHT = AdmmConfig(eps_abs=1e-7, eps_rel=1e-6, max_iter=20000, cg_tol=1e-12)


def _constraint_basis(graph):
    N = np.zeros((graph.n, graph.n_components))
    N[np.arange(graph.n), graph.components] = graph.degrees
    return N


def _constrained_solve(A, b, N):
    """x minimizing x^T A x / 2 - b^T x subject to N^T x = 0, from the dense KKT system."""
    n, m = N.shape
    kkt = np.block([[A, N], [N.T, np.zeros((m, m))]])
    return np.linalg.solve(kkt, np.concatenate([b, np.zeros(m)]))[:n]


def _random_state(dataset, graph, rng):
    params = ParameterState(rng.standard_normal(dataset.q), rng.standard_normal(dataset.p),
                            np.vstack([orthogonal_center(graph, rng.standard_normal(dataset.n))
                                       for _ in range(dataset.p)]))
    state = AdmmState.start(dataset, params, TIGHT)
    state.s = rng.standard_normal(dataset.n)
    state.dual_u = rng.standard_normal(dataset.n)
    state.z = rng.standard_normal((dataset.p, dataset.n))
    state.dual_v = rng.standard_normal((dataset.p, dataset.n))
    state.rho_s, state.rho_z = 1.7, 0.6
    return state


class TestProjectedPcg:
    def test_matches_dense_constrained_solve(self, graph, rng):
        A = 3.0 * graph.laplacian.toarray() + np.diag(rng.uniform(0.5, 2.0, graph.n))
        b = rng.standard_normal(graph.n)
        x, converged, _ = projected_pcg(lambda v: A @ v, b, np.zeros(graph.n), np.diag(A).copy(),
                                        lambda v: orthogonal_center(graph, v), 1e-12, 1000)
        assert converged
        assert_allclose(x, _constrained_solve(A, b, _constraint_basis(graph)), atol=1e-8)

    def test_zero_rhs(self, graph):
        x, converged, iterations = projected_pcg(lambda v: v, np.zeros(graph.n), np.ones(graph.n),
                                                 np.ones(graph.n), lambda v: orthogonal_center(graph, v),
                                                 1e-10, 10)
        assert converged and iterations == 0
        assert np.all(x == 0)


class TestDeltaUpdate:
    def test_matches_dense_oracle(self, dataset, dataset_graph, rng):
        state = _random_state(dataset, dataset_graph, rng)
        penalty = PenaltyConfig(tau=0.5, lambda1=1.0, lambda2=2.5)
        j = 1
        x_j = dataset.X[:, j]
        other = (dataset.Z @ state.params.alpha + dataset.X @ state.params.beta_G
                 + dataset.X[:, 0] * state.params.delta[0])
        target = dataset.y - other - state.s + state.dual_u
        A = (2.0 * penalty.lambda2 * dataset_graph.laplacian.toarray()
             + np.diag(state.rho_s * x_j ** 2 + state.rho_z))
        b = state.rho_s * x_j * target + state.rho_z * (state.z[j] - state.dual_v[j])
        expected = _constrained_solve(A, b, _constraint_basis(dataset_graph))
        actual = update_delta_j(state, dataset_graph, dataset, TIGHT, penalty, j)
        assert_allclose(actual, expected, atol=1e-7)

    def test_no_smoothing_and_zero_column_copies_centered_target(self, dataset_graph, rng):
        base = make_dataset()
        X = base.X.copy()
        X[:, 0] = 0.0
        data = SpatialDataset(base.y, base.Z, X, base.locations)
        state = _random_state(data, dataset_graph, rng)
        state.z[0] = orthogonal_center(dataset_graph, state.z[0])
        state.dual_v[0] = orthogonal_center(dataset_graph, state.dual_v[0])
        out = update_delta_j(state, dataset_graph, data, TIGHT, PenaltyConfig(tau=0.5), 0)
        assert_allclose(out, state.z[0] - state.dual_v[0], atol=1e-9)


class TestGlobalQr:
    @pytest.mark.parametrize("tau", [0.25, 0.5, 0.75])
    def test_intercept_only_returns_sample_quantile(self, tau):
        rng = philox(21)
        n = 1001
        y = rng.standard_normal(n)
        data = SpatialDataset(y, np.ones((n, 1)), np.empty((n, 0)), rng.uniform(size=(n, 2)))
        fit = fit_global_qr(data, None, tau, TIGHT)
        assert fit.state.alpha[0] == pytest.approx(np.quantile(y, tau, method="inverted_cdf"), abs=1e-4)

    def test_deviation_fields_stay_zero(self, dataset, dataset_graph):
        fit = fit_global_qr(dataset, dataset_graph, 0.5)
        assert fit.solver == "admm-global"
        assert np.all(fit.state.delta == 0)
        assert not fit.selected_local.any()

    def test_collinear_design(self, dataset):
        X = np.column_stack([dataset.X[:, 0], dataset.X[:, 0]])
        with pytest.raises(SingularSystemError):
            factorize_design(SpatialDataset(dataset.y, dataset.Z, X, dataset.locations))


class TestFitAdmm:
    def test_converges_with_small_kkt_residual(self, dataset, dataset_graph):
        penalty = PenaltyConfig(tau=0.5, lambda1=2.0, lambda2=5.0)
        fit = fit_admm(dataset, dataset_graph, TIGHT, penalty)
        assert fit.converged
        assert fit.kkt_residual <= 1e-2 * np.sqrt(dataset.n)
        assert fit.objective == pytest.approx(objective(dataset, dataset_graph, fit.state, penalty), rel=1e-12)
        assert np.array_equal(fit.selected_local, np.any(fit.state.delta != 0, axis=1))

    def test_deviations_satisfy_centering(self, dataset, dataset_graph):
        fit = fit_admm(dataset, dataset_graph, TIGHT, PenaltyConfig(tau=0.3, lambda1=1.0, lambda2=2.0))
        N = _constraint_basis(dataset_graph)
        scale = max(1.0, float(np.abs(fit.state.delta).max()))
        assert_allclose(fit.state.delta @ N, 0.0, atol=1e-8 * scale * dataset_graph.degrees.sum())

    def test_large_lambda1_zeroes_every_group_exactly(self, dataset, dataset_graph):
        fit = fit_admm(dataset, dataset_graph, TIGHT, PenaltyConfig(tau=0.5, lambda1=1e4, lambda2=1.0))
        assert np.all(fit.state.delta == 0.0)
        assert fit.n_local == 0

    def test_objective_not_above_pooled_fit(self, dataset, dataset_graph):
        """Adding deviation fields can only lower the check loss."""
        penalty = PenaltyConfig(tau=0.5, lambda1=0.5, lambda2=0.5)
        fit = fit_admm(dataset, dataset_graph, TIGHT, penalty)
        pooled = fit_global_qr(dataset, dataset_graph, 0.5, TIGHT)
        assert fit.objective <= objective(dataset, dataset_graph, pooled.state, penalty) + 1e-4

    def test_warm_start_shape_checked(self, dataset, dataset_graph):
        with pytest.raises(DataError):
            fit_admm(dataset, dataset_graph, TIGHT, PenaltyConfig(tau=0.5), initial=ParameterState.zeros(2, 2, 10))

    def test_graph_required(self, dataset):
        with pytest.raises(DataError):
            fit_admm(dataset, None, TIGHT, PenaltyConfig(tau=0.5))

    def test_deterministic(self, dataset, dataset_graph):
        penalty = PenaltyConfig(tau=0.5, lambda1=2.0, lambda2=5.0)
        first = fit_admm(dataset, dataset_graph, AdmmConfig(), penalty)
        second = fit_admm(dataset, dataset_graph, AdmmConfig(), penalty)
        assert np.array_equal(first.state.delta, second.state.delta)
        assert first.objective_trace == second.objective_trace


class TestRelaxedSweep:
    def test_dual_step_reuses_the_relaxed_fit(self, dataset, dataset_graph, rng):
        state = _random_state(dataset, dataset_graph, rng)
        config = AdmmConfig(over_relax=1.6)
        penalty = PenaltyConfig(tau=0.4, lambda1=1.0)
        s_old, u_old = state.s.copy(), state.dual_u.copy()
        z_old, v_old = state.z.copy(), state.dual_v.copy()
        fit = predict_quantile(dataset, state.params)

        state.s = update_s(state, dataset, config, penalty.tau)
        update_z_and_duals(state, dataset, config, penalty)

        relaxed = 1.6 * fit - 0.6 * (dataset.y - s_old)
        assert_allclose(state.dual_u - u_old, dataset.y - relaxed - state.s, atol=1e-12)
        assert_allclose(state.primal_s, dataset.y - fit - state.s, atol=1e-12)
        relaxed_z = 1.6 * state.params.delta - 0.6 * z_old
        assert_allclose(state.dual_v, v_old + relaxed_z - state.z, atol=1e-12)

    def test_primal_block_reaches_its_minimizer(self, dataset, dataset_graph, rng):
        state = _random_state(dataset, dataset_graph, rng)
        config = AdmmConfig(block_tol=1e-10, max_block_passes=500, cg_tol=1e-12)
        penalty = PenaltyConfig(tau=0.5, lambda1=1.0, lambda2=2.0)
        factorization = factorize_design(dataset)
        passes = update_primal_block(state, dataset_graph, dataset, config, penalty, factorization)
        assert 1 < passes < 500
        theta = np.concatenate([state.params.alpha, state.params.beta_G])
        delta = state.params.delta.copy()
        assert update_primal_block(state, dataset_graph, dataset, config, penalty, factorization) >= 1
        assert_allclose(np.concatenate([state.params.alpha, state.params.beta_G]), theta, atol=1e-6)
        assert_allclose(state.params.delta, delta, atol=1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2, 105])
    def test_relaxed_and_plain_runs_reach_the_same_optimum(self, seed):
        data = make_dataset(n=100, seed=seed)
        graph = build_graph(data.locations, k=6)
        penalty = PenaltyConfig(tau=0.5, lambda1=3.0, lambda2=4.0)
        relaxed = fit_admm(data, graph, AdmmConfig(eps_abs=1e-7, eps_rel=1e-6, max_iter=20000), penalty)
        plain = fit_admm(data, graph, AdmmConfig(eps_abs=1e-7, eps_rel=1e-6, max_iter=20000, over_relax=1.0),
                         penalty)
        assert relaxed.converged and plain.converged
        assert relaxed.objective == pytest.approx(plain.objective, rel=1e-3)
        assert relaxed.kkt_residual <= 1e-2 * np.sqrt(data.n)

    def test_primal_residual_falls_by_an_order_of_magnitude(self, dataset, dataset_graph):
        fit = fit_admm(dataset, dataset_graph, TIGHT, PenaltyConfig(tau=0.5, lambda1=2.0, lambda2=5.0))
        primal = fit.diagnostics["primal_trace"]
        assert len(primal) == fit.iterations >= 20
        assert max(primal[-10:]) <= max(primal[:10]) / 10.0


class TestPenaltySchedule:
    def test_rho_freezes_after_bounded_updates(self):
        rng = philox(21)
        n = 1001
        y = rng.standard_normal(n)
        data = SpatialDataset(y, np.ones((n, 1)), np.empty((n, 0)), rng.uniform(size=(n, 2)))
        config = AdmmConfig(eps_abs=1e-7, eps_rel=1e-6, max_iter=20000, max_rho_updates=4)
        fit = fit_global_qr(data, None, 0.5, config)
        assert fit.converged
        assert len(fit.diagnostics["rho_history"]) <= 4
        assert fit.state.alpha[0] == pytest.approx(np.quantile(y, 0.5, method="inverted_cdf"), abs=1e-4)

    def test_zero_updates_keeps_initial_rho(self, dataset, dataset_graph):
        config = AdmmConfig(rho_s=0.7, rho_z=1.3, max_rho_updates=0, max_iter=300)
        fit = fit_admm(dataset, dataset_graph, config, PenaltyConfig(tau=0.5, lambda1=2.0, lambda2=5.0))
        assert fit.diagnostics["rho_history"] == []
        assert (fit.diagnostics["rho_s"], fit.diagnostics["rho_z"]) == (0.7, 1.3)


class TestOptimalityProperties:
    def test_site_order_does_not_change_the_fit(self, dataset, dataset_graph):
        penalty = PenaltyConfig(tau=0.5, lambda1=2.0, lambda2=5.0)
        perm = philox(31).permutation(dataset.n)
        shuffled = SpatialDataset(dataset.y[perm], dataset.Z[perm], dataset.X[perm], dataset.locations[perm])
        base = fit_admm(dataset, dataset_graph, TIGHT, penalty)
        moved = fit_admm(shuffled, build_graph(shuffled.locations, k=6), TIGHT, penalty)
        assert np.array_equal(base.selected_local, moved.selected_local)
        assert moved.objective == pytest.approx(base.objective, rel=1e-6)
        assert_allclose(moved.state.alpha, base.state.alpha, atol=1e-3)

    @pytest.mark.parametrize("tau", [0.3, 0.5])
    def test_global_fit_interpolates_and_splits_signs(self, tau):
        rng = philox(41)
        n = 201
        Z = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = Z @ np.array([0.5, 1.5]) + rng.standard_normal(n)
        data = SpatialDataset(y, Z, np.empty((n, 0)), rng.uniform(size=(n, 2)))
        fit = fit_global_qr(data, None, tau, TIGHT)
        r = y - Z @ fit.state.alpha
        tol = 1e-3
        assert np.count_nonzero(np.abs(r) <= tol) >= data.q
        assert np.mean(r < -tol) <= tau <= np.mean(r <= tol)
        assert abs(np.mean(r < 0) - tau) <= (data.q + 1) / n
