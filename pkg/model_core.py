"""
model_core.py
Dataset, parameter and penalty types of the sparse-smooth spatially varying
coefficient quantile regression, with the quantile predictor, residuals and the
penalized objective

    sum_i rho_tau(r_i) + lambda1 sum_j w_j ||delta_j||_2 + lambda2 sum_j delta_j^T L_sym delta_j.

delta is stored as a (p, n) array: row j is the deviation field of covariate j
evaluated at the n sites.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from errors import DataError, ParameterError
from quantile_loss import rho
from spatial_graph import SpatialGraph, as_coordinates, component_means, project_centered


@dataclass(frozen=True)
class SpatialDataset:
    y: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        Z = np.asarray(self.Z, dtype=float)
        X = np.asarray(self.X, dtype=float)
        n = y.shape[0]
        if Z.ndim == 1:
            Z = Z.reshape(n, -1)
        if X.ndim == 1:
            X = X.reshape(n, -1) if X.size else np.empty((n, 0))
        locations = as_coordinates(self.locations)
        for name, rows in (("Z", Z.shape[0]), ("X", X.shape[0]), ("locations", locations.shape[0])):
            if rows != n:
                raise DataError(f"{name} has {rows} rows but y has {n}")
        if Z.shape[1] < 1:
            raise DataError("Z needs at least one column (supply an explicit intercept)")
        for name, values in (("y", y), ("Z", Z), ("X", X)):
            if not np.all(np.isfinite(values)):
                raise DataError(f"{name} contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "locations", locations)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def design(self) -> np.ndarray:
        """G = [Z X], the parametric design."""
        return np.hstack([self.Z, self.X])

    def subset(self, indices) -> "SpatialDataset":
        indices = np.asarray(indices)
        return SpatialDataset(self.y[indices], self.Z[indices], self.X[indices], self.locations[indices])

    def as_global(self) -> "SpatialDataset":
        """Same data with every X column moved into the global block (p = 0)."""
        return SpatialDataset(self.y, self.design, np.empty((self.n, 0)), self.locations)


@dataclass
class ParameterState:
    alpha: np.ndarray
    beta_G: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).ravel()
        self.beta_G = np.asarray(self.beta_G, dtype=float).ravel()
        self.delta = np.asarray(self.delta, dtype=float)
        if self.delta.ndim != 2 or self.delta.shape[0] != self.beta_G.shape[0]:
            raise DataError(
                f"delta must have shape (p, n) with p={self.beta_G.shape[0]}, got {self.delta.shape}"
            )

    @classmethod
    def zeros(cls, q: int, p: int, n: int) -> "ParameterState":
        return cls(np.zeros(q), np.zeros(p), np.zeros((p, n)))

    @property
    def theta_p(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta_G])

    def copy(self) -> "ParameterState":
        return ParameterState(self.alpha.copy(), self.beta_G.copy(), self.delta.copy())


class PenaltyConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: float = Field(..., description="Quantile level in (0, 1)")
    lambda1: float = Field(0.0, ge=0, description="Group-lasso level on the deviation fields")
    lambda2: float = Field(0.0, ge=0, description="Laplacian smoothing level")
    weights: Optional[List[float]] = Field(None, description="Adaptive group weights w_j; None means all ones")
    a: float = Field(0.01, gt=0, description="Stabilizer of the adaptive weights")
    gamma: float = Field(1.0, gt=0, le=1, description="Exponent of the adaptive weights")

    @field_validator("tau")
    @classmethod
    def _tau_interior(cls, value: float) -> float:
        if not (0.0 < value < 1.0):
            raise ValueError(f"tau must lie strictly inside (0, 1), got {value}")
        return value

    @field_validator("weights")
    @classmethod
    def _weights_positive(cls, value):
        if value is not None and not all(np.isfinite(w) and w > 0 for w in value):
            raise ValueError("adaptive weights must be positive and finite")
        return value

    def weight_vector(self, p: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(p)
        if len(self.weights) != p:
            raise ParameterError(f"penalty has {len(self.weights)} weights but the model has p={p}")
        return np.asarray(self.weights, dtype=float)


@dataclass
class FitResult:
    state: ParameterState
    converged: bool
    iterations: int
    objective: float
    kkt_residual: float
    selected_local: np.ndarray
    solver: str
    penalty: PenaltyConfig
    objective_trace: List[float] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_local(self) -> int:
        return int(np.sum(self.selected_local))


def deviation_term(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """sum_j X_{.j} * delta_j, i.e. X_delta Delta."""
    if X.shape[1] == 0:
        return np.zeros(X.shape[0])
    return np.einsum("ij,ji->i", X, delta)


def _check_conformable(dataset: SpatialDataset, state: ParameterState) -> None:
    if state.alpha.shape[0] != dataset.q or state.beta_G.shape[0] != dataset.p:
        raise DataError(
            f"state has q={state.alpha.shape[0]}, p={state.beta_G.shape[0]} but the dataset "
            f"has q={dataset.q}, p={dataset.p}"
        )
    if state.delta.shape[1] != dataset.n:
        raise DataError(f"delta fields have length {state.delta.shape[1]} but n={dataset.n}")


def predict_quantile(dataset: SpatialDataset, state: ParameterState) -> np.ndarray:
    """q_tau = Z alpha + X beta_G + sum_j X_{.j} * delta_j."""
    _check_conformable(dataset, state)
    return dataset.Z @ state.alpha + dataset.X @ state.beta_G + deviation_term(dataset.X, state.delta)


def residuals(dataset: SpatialDataset, state: ParameterState) -> np.ndarray:
    return dataset.y - predict_quantile(dataset, state)


def check_loss(r: np.ndarray, tau: float) -> float:
    return float(np.sum(rho(np.asarray(r, dtype=float), tau)))


def mean_check_loss(r: np.ndarray, tau: float) -> float:
    r = np.asarray(r, dtype=float)
    return check_loss(r, tau) / max(r.size, 1)


def penalty_value(graph: SpatialGraph, delta: np.ndarray, config: PenaltyConfig) -> float:
    p = delta.shape[0]
    total = 0.0
    if config.lambda1 > 0 and p:
        total += config.lambda1 * float(config.weight_vector(p) @ np.linalg.norm(delta, axis=1))
    if config.lambda2 > 0 and p:
        smooth = graph.laplacian @ delta.T
        total += config.lambda2 * float(np.sum(delta.T * smooth))
    return total


def objective(dataset: SpatialDataset, graph: SpatialGraph, state: ParameterState,
              config: PenaltyConfig) -> float:
    """Check-loss sum plus the group and Laplacian penalties."""
    return check_loss(residuals(dataset, state), config.tau) + penalty_value(graph, state.delta, config)


def recenter(state: ParameterState, graph: SpatialGraph) -> ParameterState:
    """Center every delta_j and move its degree-weighted mean into beta_G.

    Leaves the fitted quantiles unchanged on connected graphs; with several
    components beta_G absorbs the volume-weighted average of the per-component
    means.
    """
    out = state.copy()
    total_volume = graph.component_volumes.sum()
    for j in range(out.delta.shape[0]):
        means = component_means(graph, out.delta[j])
        out.beta_G[j] += float(means @ graph.component_volumes) / total_volume
        out.delta[j] = project_centered(graph, out.delta[j])
    return out
