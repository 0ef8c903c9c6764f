"""
spg_solver.py
Smoothed proximal-gradient solver: the check loss is replaced by its Moreau
envelope M_h, the smooth part

    G_h = sum_i M_h(r_i) + lambda2 sum_j delta_j^T L_sym delta_j

is minimized by accelerated proximal gradient (FISTA) with backtracking and
function-value restart, and h is halved towards h_min whenever progress at the
current h stalls. The group penalty and the centering constraint are handled
together by the prox step: Euclidean projection onto the centered subspace
followed by group shrinkage.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import median_abs_deviation

from errors import DataError
from inference import kkt_residual
from model_core import (
    FitResult,
    ParameterState,
    PenaltyConfig,
    SpatialDataset,
    objective,
    residuals,
)
from performance_monitor import monitor_function
from quantile_loss import MoreauParams, group_shrink, moreau_value_grad
from spatial_graph import SpatialGraph, orthogonal_center, project_centered

logger = logging.getLogger(__name__)


class SpgConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    h_init: Optional[float] = Field(None, gt=0, description="Initial bandwidth; None means MAD(y)")
    h_min: Optional[float] = Field(None, gt=0, description="Final bandwidth; None means 1e-4 * MAD(y)")
    continuation_factor: float = Field(0.5, gt=0, lt=1)
    stagnation_window: int = Field(50, gt=0, description="Stalled iterations before h is reduced")
    step_init: float = Field(1.0, gt=0)
    backtrack_factor: float = Field(0.5, gt=0, lt=1)
    max_iter: int = Field(20000, gt=0)
    objective_tol: float = Field(1e-7, gt=0, description="Relative decrease counted as progress")
    kkt_tol: float = Field(1e-3, gt=0, description="KKT target at h_min, scaled by sqrt(n)")
    kkt_check_interval: int = Field(50, gt=0)

    @model_validator(mode="after")
    def _ordered_bandwidths(self):
        if self.h_init is not None and self.h_min is not None and self.h_min > self.h_init:
            raise ValueError(f"h_min={self.h_min} exceeds h_init={self.h_init}")
        return self


def response_mad(y: np.ndarray) -> float:
    mad = float(median_abs_deviation(y))
    if mad > 0:
        return mad
    spread = float(np.std(y))
    return spread if spread > 0 else 1.0


def _value_and_gradient(dataset: SpatialDataset, graph: Optional[SpatialGraph], state: ParameterState,
                        penalty: PenaltyConfig, h: float):
    r = residuals(dataset, state)
    values, g = moreau_value_grad(r, MoreauParams(h=h, tau=penalty.tau))
    value = float(np.sum(values))
    grad_alpha = -dataset.Z.T @ g
    grad_beta = -dataset.X.T @ g
    grad_delta = -(dataset.X * g[:, None]).T
    if penalty.lambda2 > 0 and dataset.p:
        smooth = (graph.laplacian @ state.delta.T).T
        value += penalty.lambda2 * float(np.sum(state.delta * smooth))
        grad_delta = grad_delta + 2.0 * penalty.lambda2 * smooth
    return value, (grad_alpha, grad_beta, grad_delta), g


def smooth_value(dataset: SpatialDataset, graph: Optional[SpatialGraph], state: ParameterState,
                 penalty: PenaltyConfig, h: float) -> float:
    return _value_and_gradient(dataset, graph, state, penalty, h)[0]


def smooth_gradient(dataset: SpatialDataset, graph: Optional[SpatialGraph], state: ParameterState,
                    penalty: PenaltyConfig, h: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of G_h with respect to alpha, beta_G and each delta_j (rows)."""
    return _value_and_gradient(dataset, graph, state, penalty, h)[1]


def group_penalty(state: ParameterState, penalty: PenaltyConfig) -> float:
    if penalty.lambda1 == 0 or not state.delta.shape[0]:
        return 0.0
    weights = penalty.weight_vector(state.delta.shape[0])
    return penalty.lambda1 * float(weights @ np.linalg.norm(state.delta, axis=1))


def spg_step(state: ParameterState, gradients, step: float, penalty: PenaltyConfig,
             graph: Optional[SpatialGraph]) -> ParameterState:
    """Gradient step on (alpha, beta_G); centered group prox on each delta_j."""
    grad_alpha, grad_beta, grad_delta = gradients
    delta = state.delta - step * grad_delta
    p = delta.shape[0]
    weights = penalty.weight_vector(p)
    for j in range(p):
        delta[j] = group_shrink(orthogonal_center(graph, delta[j]), step * penalty.lambda1 * weights[j])
    return ParameterState(state.alpha - step * grad_alpha, state.beta_G - step * grad_beta, delta)


def _extrapolate(current: ParameterState, previous: ParameterState, weight: float) -> ParameterState:
    if weight == 0:
        return current
    return ParameterState(
        current.alpha + weight * (current.alpha - previous.alpha),
        current.beta_G + weight * (current.beta_G - previous.beta_G),
        current.delta + weight * (current.delta - previous.delta),
    )


def _inner(gradients, a: ParameterState, b: ParameterState) -> float:
    grad_alpha, grad_beta, grad_delta = gradients
    return float(grad_alpha @ (a.alpha - b.alpha) + grad_beta @ (a.beta_G - b.beta_G)
                 + np.sum(grad_delta * (a.delta - b.delta)))


def _squared_distance(a: ParameterState, b: ParameterState) -> float:
    return float(np.sum((a.alpha - b.alpha) ** 2) + np.sum((a.beta_G - b.beta_G) ** 2)
                 + np.sum((a.delta - b.delta) ** 2))


def _initial_state(dataset: SpatialDataset, graph: Optional[SpatialGraph], penalty: PenaltyConfig,
                   initial: Optional[ParameterState]) -> ParameterState:
    if initial is not None:
        start = initial.copy()
        if start.alpha.shape[0] != dataset.q or start.delta.shape != (dataset.p, dataset.n):
            raise DataError("warm start does not match the dataset dimensions")
        for j in range(dataset.p):
            start.delta[j] = project_centered(graph, start.delta[j])
        return start
    if dataset.p == 0:
        return ParameterState.zeros(dataset.q, 0, dataset.n)
    from admm_solver import fit_global_qr
    return fit_global_qr(dataset, graph, penalty.tau).state


@monitor_function
def fit_spg(dataset: SpatialDataset, graph: Optional[SpatialGraph], penalty: PenaltyConfig,
            config: Optional[SpgConfig] = None, initial: Optional[ParameterState] = None) -> FitResult:
    config = config or SpgConfig()
    if dataset.p and (graph is None or graph.n != dataset.n):
        raise DataError("a graph over the n sites is required when the model has varying coefficients")
    mad = response_mad(dataset.y)
    h = config.h_init if config.h_init is not None else mad
    h_min = config.h_min if config.h_min is not None else 1e-4 * mad
    h_min = min(h_min, h)
    kkt_target = config.kkt_tol * np.sqrt(dataset.n)

    x = _initial_state(dataset, graph, penalty, initial)
    x_prev = x
    momentum = 1.0
    step = config.step_init
    F_x = smooth_value(dataset, graph, x, penalty, h) + group_penalty(x, penalty)

    trace: List[float] = [F_x]
    trace_h: List[float] = [h]
    stagnant, restarts, iteration = 0, 0, 0
    converged = False
    last_g = None

    for iteration in range(1, config.max_iter + 1):
        momentum_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum ** 2))
        y_point = _extrapolate(x, x_prev, (momentum - 1.0) / momentum_next)
        G_y, gradients, _ = _value_and_gradient(dataset, graph, y_point, penalty, h)

        while True:
            candidate = spg_step(y_point, gradients, step, penalty, graph)
            G_c = smooth_value(dataset, graph, candidate, penalty, h)
            upper = G_y + _inner(gradients, candidate, y_point) + _squared_distance(candidate, y_point) / (2.0 * step)
            if G_c <= upper + 1e-12 * abs(G_y) or step < 1e-20:
                break
            step *= config.backtrack_factor

        F_c = G_c + group_penalty(candidate, penalty)
        if F_c > F_x:
            # reject, drop momentum and retry from x with a plain prox-gradient step
            restarts += 1
            stagnant += 1
            momentum = 1.0
            x_prev = x
        else:
            decrease = (F_x - F_c) / max(abs(F_x), 1e-12)
            x_prev, x = x, candidate
            F_x = F_c
            momentum = momentum_next
            trace.append(F_x)
            trace_h.append(h)
            if decrease < config.objective_tol:
                stagnant += 1

        at_floor = h <= h_min
        if at_floor and iteration % config.kkt_check_interval == 0:
            _, _, last_g = _value_and_gradient(dataset, graph, x, penalty, h)
            if kkt_residual(dataset, graph, x, penalty, score=last_g) <= kkt_target:
                converged = True
                break
        if stagnant >= config.stagnation_window:
            if at_floor:
                converged = True
                break
            h = max(h * config.continuation_factor, h_min)
            F_x = smooth_value(dataset, graph, x, penalty, h) + group_penalty(x, penalty)
            x_prev = x
            momentum = 1.0
            stagnant = 0
            logger.debug(f"SPG continuation at iteration {iteration}: h={h:.3e}")

    _, _, last_g = _value_and_gradient(dataset, graph, x, penalty, h)
    final_objective = objective(dataset, graph, x, penalty)
    kkt = kkt_residual(dataset, graph, x, penalty, score=last_g)
    if converged:
        logger.info(f"SPG converged in {iteration} iterations at h={h:.3e}, objective={final_objective:.6g}")
    else:
        logger.warning(f"SPG stopped at max_iter={config.max_iter} (h={h:.3e}, h_min={h_min:.3e})")

    return FitResult(
        state=x,
        converged=converged,
        iterations=iteration,
        objective=final_objective,
        kkt_residual=kkt,
        selected_local=np.array([np.any(row != 0) for row in x.delta], dtype=bool),
        solver="spg",
        penalty=penalty,
        objective_trace=trace,
        diagnostics={
            "final_h": h,
            "h_min": h_min,
            "restarts": restarts,
            "final_step": step,
            "trace_h": trace_h,
        },
    )
