"""
admm_solver.py
ADMM for the sparse-smooth SVC quantile regression.

Splitting: s = y - Z alpha - X beta_G - sum_j X_j * delta_j and z_j = delta_j,
with scaled duals (u, v_j). The two ADMM blocks are x = (alpha, beta_G, delta)
and (s, z). One sweep runs

    [parametric normal equations -> each delta_j] repeated until the x-block
    settles -> check-loss prox on s -> group shrink on z_j -> dual ascent
    -> stopping check

Over-relaxation mixes the new x-block image with the previous (s, z) and the
same relaxed vectors feed the prox, the shrink and the dual steps. Adaptive
rho stops after max_rho_updates changes so the run ends with a fixed penalty.

The delta_j system 2 lambda2 L + rho_s diag(X_j^2) + rho_z I is solved on the
centered subspace {1_C^T D delta = 0} by projected Jacobi-preconditioned CG.
The reported deviation fields are the z_j, which are exactly zero for every
group the shrink removed.

Usage
-----
from admm_solver import AdmmConfig, fit_admm
result = fit_admm(dataset, graph, AdmmConfig(), PenaltyConfig(tau=0.5, lambda1=0.1, lambda2=0.01))
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from errors import DataError, SingularSystemError
from inference import kkt_residual
from model_core import (
    FitResult,
    ParameterState,
    PenaltyConfig,
    SpatialDataset,
    deviation_term,
    objective,
    predict_quantile,
)
from performance_monitor import monitor_function
from quantile_loss import group_shrink, prox_check
from spatial_graph import SpatialGraph, orthogonal_center, project_centered

logger = logging.getLogger(__name__)

_MAX_GRAM_CONDITION = 1e12
_RHO_RATIO = 10.0
_RHO_FACTOR = 2.0


class AdmmConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho_s: float = Field(1.0, gt=0, description="Penalty on the residual split s")
    rho_z: float = Field(1.0, gt=0, description="Penalty on the deviation copies z_j")
    eps_abs: float = Field(1e-5, gt=0, description="Absolute stopping tolerance")
    eps_rel: float = Field(1e-4, gt=0, description="Relative stopping tolerance")
    max_iter: int = Field(5000, gt=0, description="Maximum number of sweeps")
    over_relax: float = Field(1.6, ge=1.0, le=1.8, description="Relaxation of the s and z updates; 1 disables it")
    adaptive_rho: bool = Field(True, description="Rebalance rho_s / rho_z from the residual ratio")
    rho_update_interval: int = Field(10, gt=0, description="Sweeps between adaptive-rho checks")
    max_rho_updates: int = Field(10, ge=0, description="Penalty changes allowed before rho is frozen")
    block_tol: float = Field(1e-3, gt=0, lt=1, description="x-block passes stop once a pass moves less "
                                                              "than this fraction of the first pass")
    max_block_passes: int = Field(10, gt=0, description="Gauss-Seidel passes over the x-block per sweep")
    cg_tol: float = Field(1e-8, gt=0, description="Relative residual target of the delta_j CG solves")
    cg_max_iter: int = Field(500, gt=0, description="CG iteration cap per delta_j solve")


@dataclass
class AdmmState:
    params: ParameterState
    s: np.ndarray
    z: np.ndarray
    dual_u: np.ndarray
    dual_v: np.ndarray
    rho_s: float
    rho_z: float
    iteration: int = 0
    s_prev: Optional[np.ndarray] = None
    z_prev: Optional[np.ndarray] = None
    primal_s: Optional[np.ndarray] = None
    relaxed_fit: Optional[np.ndarray] = None
    cg_failures: int = 0
    block_passes: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    primal_trace: List[float] = field(default_factory=list)

    @classmethod
    def start(cls, dataset: SpatialDataset, params: ParameterState, config: AdmmConfig) -> "AdmmState":
        s = dataset.y - predict_quantile(dataset, params)
        return cls(
            params=params,
            s=s,
            z=params.delta.copy(),
            dual_u=np.zeros(dataset.n),
            dual_v=np.zeros_like(params.delta),
            rho_s=config.rho_s,
            rho_z=config.rho_z,
        )

    def fitted_without_deviation(self, dataset: SpatialDataset) -> np.ndarray:
        return dataset.Z @ self.params.alpha + dataset.X @ self.params.beta_G


def factorize_design(dataset: SpatialDataset):
    """Cholesky factor of G^T G for G = [Z X]; computed once per fit."""
    G = dataset.design
    gram = G.T @ G
    condition = float(np.linalg.cond(gram))
    if not np.isfinite(condition) or condition > _MAX_GRAM_CONDITION:
        raise SingularSystemError(
            f"[Z X]^T [Z X] is rank deficient (condition number {condition:.3e}); "
            "drop collinear columns",
            condition_number=condition,
        )
    try:
        return cho_factor(gram)
    except LinAlgError as exc:
        raise SingularSystemError(f"Cholesky of the Gram matrix failed: {exc}", condition_number=condition)


def update_parametric(state: AdmmState, dataset: SpatialDataset, factorization) -> Tuple[np.ndarray, np.ndarray]:
    target = dataset.y - deviation_term(dataset.X, state.params.delta) - state.s + state.dual_u
    theta = cho_solve(factorization, dataset.design.T @ target)
    return theta[:dataset.q], theta[dataset.q:]


def _relaxed(new: np.ndarray, previous: np.ndarray, over_relax: float) -> np.ndarray:
    if over_relax == 1.0:
        return new
    return over_relax * new + (1.0 - over_relax) * previous


def update_s(state: AdmmState, dataset: SpatialDataset, config: AdmmConfig, tau: float) -> np.ndarray:
    """Check-loss prox on s against the relaxed fit of the current x-block.

    ``state.s`` still holds the previous split when this runs. The relaxed fit
    is kept on the state so the u-update uses the very same vector.
    """
    fit = state.fitted_without_deviation(dataset) + deviation_term(dataset.X, state.params.delta)
    state.relaxed_fit = _relaxed(fit, dataset.y - state.s, config.over_relax)
    return prox_check(dataset.y - state.relaxed_fit + state.dual_u, 1.0 / state.rho_s, tau)


def projected_pcg(matvec: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, x0: np.ndarray,
                  diagonal: np.ndarray, project: Callable[[np.ndarray], np.ndarray],
                  tol: float, max_iter: int) -> Tuple[np.ndarray, bool, int]:
    """Jacobi-preconditioned CG restricted to the range of the orthogonal projector ``project``."""
    x = project(x0)
    b = project(rhs)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(x), True, 0
    r = b - project(matvec(x))
    z = project(r / diagonal)
    p = z.copy()
    rz = float(r @ z)
    for it in range(max_iter):
        if np.linalg.norm(r) <= tol * b_norm:
            return x, True, it
        Ap = project(matvec(p))
        curvature = float(p @ Ap)
        if curvature <= 0:
            break
        step = rz / curvature
        x += step * p
        r -= step * Ap
        z = project(r / diagonal)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, bool(np.linalg.norm(r) <= tol * b_norm), max_iter


def update_delta_j(state: AdmmState, graph: SpatialGraph, dataset: SpatialDataset, config: AdmmConfig,
                   penalty: PenaltyConfig, j: int, other_fit: Optional[np.ndarray] = None) -> np.ndarray:
    """Minimize the delta_j block of the augmented Lagrangian over centered fields.

    ``other_fit`` is Z alpha + X beta_G + sum_{l != j} X_l * delta_l; it is
    recomputed from the state when omitted.
    """
    x_j = dataset.X[:, j]
    delta = state.params.delta
    if other_fit is None:
        other_fit = (state.fitted_without_deviation(dataset) + deviation_term(dataset.X, delta)
                     - x_j * delta[j])
    target = dataset.y - other_fit - state.s + state.dual_u
    rhs = state.rho_s * x_j * target + state.rho_z * (state.z[j] - state.dual_v[j])
    diagonal = state.rho_s * x_j ** 2 + state.rho_z
    smooth = 2.0 * penalty.lambda2

    if smooth > 0:
        laplacian = graph.laplacian
        precond = diagonal + smooth * laplacian.diagonal()

        def matvec(vec):
            return smooth * (laplacian @ vec) + diagonal * vec
    else:
        precond = diagonal

        def matvec(vec):
            return diagonal * vec

    solution, converged, _ = projected_pcg(
        matvec, rhs, delta[j], precond, lambda vec: orthogonal_center(graph, vec),
        config.cg_tol, config.cg_max_iter,
    )
    if not converged:
        state.cg_failures += 1
        logger.warning(
            f"CG for delta_{j} stopped at cg_max_iter={config.cg_max_iter} above cg_tol={config.cg_tol:g}; "
            "using the last iterate"
        )
    return project_centered(graph, solution)


def update_z_and_duals(state: AdmmState, dataset: SpatialDataset, config: AdmmConfig,
                       penalty: PenaltyConfig) -> AdmmState:
    """Shrink each z_j, then take the dual steps; runs right after ``update_s``."""
    weights = penalty.weight_vector(dataset.p)
    delta = state.params.delta
    for j in range(dataset.p):
        relaxed = _relaxed(delta[j], state.z[j], config.over_relax)
        state.z[j] = group_shrink(relaxed + state.dual_v[j], penalty.lambda1 * weights[j] / state.rho_z)
        state.dual_v[j] += relaxed - state.z[j]

    fit = state.fitted_without_deviation(dataset) + deviation_term(dataset.X, delta)
    state.primal_s = dataset.y - fit - state.s
    state.dual_u += dataset.y - state.relaxed_fit - state.s
    return state


def update_primal_block(state: AdmmState, graph: Optional[SpatialGraph], dataset: SpatialDataset,
                        config: AdmmConfig, penalty: PenaltyConfig, factorization) -> int:
    """Gauss-Seidel passes over (alpha, beta_G) and each delta_j with (s, z, u, v) held fixed.

    Stops once a pass moves the x-block by at most ``block_tol`` times the
    first pass of the sweep. Returns the number of passes taken.
    """
    params = state.params
    first_move = None
    for n_pass in range(1, config.max_block_passes + 1):
        theta_before = np.concatenate([params.alpha, params.beta_G])
        delta_before = params.delta.copy()

        params.alpha, params.beta_G = update_parametric(state, dataset, factorization)
        if dataset.p == 0:
            return n_pass
        fit = state.fitted_without_deviation(dataset) + deviation_term(dataset.X, params.delta)
        for j in range(dataset.p):
            x_j = dataset.X[:, j]
            other_fit = fit - x_j * params.delta[j]
            params.delta[j] = update_delta_j(state, graph, dataset, config, penalty, j, other_fit)
            fit = other_fit + x_j * params.delta[j]

        move = float(np.linalg.norm(np.concatenate([params.alpha, params.beta_G]) - theta_before)
                     + np.linalg.norm(params.delta - delta_before))
        if first_move is None:
            first_move = move
        if move <= config.block_tol * first_move:
            return n_pass
    return config.max_block_passes


def check_stop(state: AdmmState, config: AdmmConfig) -> Dict[str, object]:
    n = state.s.shape[0]
    r_s = float(np.linalg.norm(state.primal_s))
    r_z = float(np.linalg.norm(state.params.delta - state.z))
    d_s = float(np.linalg.norm(state.rho_s * (state.s - state.s_prev)))
    d_z = float(np.linalg.norm(state.rho_z * (state.z - state.z_prev)))
    fit_gap = float(np.linalg.norm(state.primal_s + state.s))
    eps_pri = np.sqrt(n) * config.eps_abs + config.eps_rel * max(float(np.linalg.norm(state.s)), fit_gap)
    eps_dual = np.sqrt(n) * config.eps_abs + config.eps_rel * max(d_s, d_z)
    converged = r_s <= eps_pri and r_z <= eps_pri and d_s <= eps_dual and d_z <= eps_dual
    return {
        "converged": bool(converged),
        "eps_pri": float(eps_pri),
        "eps_dual": float(eps_dual),
        "primal_norms": (r_s, r_z),
        "dual_norms": (d_s, d_z),
    }


def _adapt_rho(state: AdmmState, stop: Dict[str, object]) -> None:
    r_s, r_z = stop["primal_norms"]
    d_s, d_z = stop["dual_norms"]
    if r_s > _RHO_RATIO * d_s:
        state.rho_s *= _RHO_FACTOR
        state.dual_u /= _RHO_FACTOR
    elif d_s > _RHO_RATIO * r_s:
        state.rho_s /= _RHO_FACTOR
        state.dual_u *= _RHO_FACTOR
    if state.z.shape[0]:
        if r_z > _RHO_RATIO * d_z:
            state.rho_z *= _RHO_FACTOR
            state.dual_v /= _RHO_FACTOR
        elif d_z > _RHO_RATIO * r_z:
            state.rho_z /= _RHO_FACTOR
            state.dual_v *= _RHO_FACTOR


def _initial_state(dataset: SpatialDataset, graph: Optional[SpatialGraph], config: AdmmConfig,
                   tau: float, initial: Optional[ParameterState]) -> ParameterState:
    if initial is not None:
        start = initial.copy()
        if start.alpha.shape[0] != dataset.q or start.delta.shape != (dataset.p, dataset.n):
            raise DataError("warm start does not match the dataset dimensions")
        for j in range(dataset.p):
            start.delta[j] = project_centered(graph, start.delta[j])
        return start
    if dataset.p == 0:
        return ParameterState.zeros(dataset.q, 0, dataset.n)
    return fit_global_qr(dataset, graph, tau, config).state


@monitor_function
def fit_admm(dataset: SpatialDataset, graph: Optional[SpatialGraph], config: Optional[AdmmConfig],
             penalty: PenaltyConfig, initial: Optional[ParameterState] = None) -> FitResult:
    config = config or AdmmConfig()
    if dataset.p and (graph is None or graph.n != dataset.n):
        raise DataError("a graph over the n sites is required when the model has varying coefficients")
    factorization = factorize_design(dataset)
    state = AdmmState.start(dataset, _initial_state(dataset, graph, config, penalty.tau, initial), config)
    params = state.params

    trace: List[float] = []
    stop: Dict[str, object] = {"converged": False}
    for it in range(1, config.max_iter + 1):
        state.iteration = it
        state.s_prev = state.s.copy()
        state.z_prev = state.z.copy()

        state.block_passes += update_primal_block(state, graph, dataset, config, penalty, factorization)
        state.s = update_s(state, dataset, config, penalty.tau)
        update_z_and_duals(state, dataset, config, penalty)
        stop = check_stop(state, config)
        state.primal_trace.append(float(np.hypot(*stop["primal_norms"])))
        trace.append(objective(dataset, graph, ParameterState(params.alpha, params.beta_G, state.z), penalty))

        if it % 100 == 0:
            logger.debug(
                f"ADMM sweep {it}: objective={trace[-1]:.6g}, primal={stop['primal_norms']}, "
                f"dual={stop['dual_norms']}, rho=({state.rho_s:g}, {state.rho_z:g})"
            )
        if stop["converged"]:
            break
        if (config.adaptive_rho and it % config.rho_update_interval == 0
                and len(state.history) < config.max_rho_updates):
            before = (state.rho_s, state.rho_z)
            _adapt_rho(state, stop)
            if (state.rho_s, state.rho_z) != before:
                state.history.append({"iteration": it, "rho_s": state.rho_s, "rho_z": state.rho_z})

    reported = ParameterState(params.alpha.copy(), params.beta_G.copy(), state.z.copy())
    converged = bool(stop["converged"])
    if converged:
        logger.info(f"ADMM converged in {state.iteration} sweeps, objective={trace[-1]:.6g}")
    else:
        logger.warning(f"ADMM stopped at max_iter={config.max_iter} without meeting the residual tolerances")

    kkt = kkt_residual(dataset, graph, reported, penalty, score=state.rho_s * state.dual_u)
    return FitResult(
        state=reported,
        converged=converged,
        iterations=state.iteration,
        objective=trace[-1] if trace else objective(dataset, graph, reported, penalty),
        kkt_residual=kkt,
        selected_local=np.array([np.any(row != 0) for row in state.z], dtype=bool),
        solver="admm",
        penalty=penalty,
        objective_trace=trace,
        diagnostics={
            "primal_norms": stop.get("primal_norms"),
            "dual_norms": stop.get("dual_norms"),
            "rho_s": state.rho_s,
            "rho_z": state.rho_z,
            "rho_history": state.history,
            "primal_trace": state.primal_trace,
            "block_passes": state.block_passes,
            "cg_failures": state.cg_failures,
        },
    )


def fit_global_qr(dataset: SpatialDataset, graph: Optional[SpatialGraph], tau: float,
                  config: Optional[AdmmConfig] = None) -> FitResult:
    """Purely global quantile regression: every X column enters with a constant coefficient."""
    penalty = PenaltyConfig(tau=tau)
    pooled = fit_admm(dataset.as_global(), graph, config, penalty)
    theta = pooled.state.alpha
    state = ParameterState(theta[:dataset.q], theta[dataset.q:], np.zeros((dataset.p, dataset.n)))
    return FitResult(
        state=state,
        converged=pooled.converged,
        iterations=pooled.iterations,
        objective=pooled.objective,
        kkt_residual=pooled.kkt_residual,
        selected_local=np.zeros(dataset.p, dtype=bool),
        solver="admm-global",
        penalty=penalty,
        objective_trace=pooled.objective_trace,
        diagnostics=pooled.diagnostics,
    )
