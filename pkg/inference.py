"""
inference.py
Post-fit diagnostics: KKT residual, plug-in sandwich covariance for the global
coefficients, density of the residuals at zero, pseudo-R^2 against a
constant-quantile null, Moran's I of residuals and a global/local summary table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import iqr, norm

from errors import DataError, SingularSystemError
from model_core import (
    ParameterState,
    PenaltyConfig,
    SpatialDataset,
    mean_check_loss,
    residuals,
)
from quantile_loss import check_tau, psi
from spatial_graph import SpatialGraph, orthogonal_center

logger = logging.getLogger(__name__)

DEFAULT_KINK_TOL = 1e-4
_MIN_DENSITY_SAMPLE = 10


def _score(dataset: SpatialDataset, state: ParameterState, tau: float,
           score: Optional[np.ndarray], zero_tol: float) -> np.ndarray:
    """psi_tau of the residuals, with the solver's own subgradient at residuals on the kink."""
    r = residuals(dataset, state)
    out = np.asarray(psi(r, tau), dtype=float).reshape(-1)
    if score is not None:
        score = np.clip(np.asarray(score, dtype=float).reshape(-1), tau - 1.0, tau)
        if score.shape != out.shape:
            raise DataError(f"score has shape {score.shape}, expected {out.shape}")
        kink = np.abs(r) <= zero_tol * (1.0 + np.max(np.abs(dataset.y)))
        out[kink] = score[kink]
    return out


def kkt_components(dataset: SpatialDataset, graph: Optional[SpatialGraph], state: ParameterState,
                   penalty: PenaltyConfig, score: Optional[np.ndarray] = None,
                   zero_tol: float = DEFAULT_KINK_TOL) -> Dict[str, object]:
    """Per-block stationarity violations; ``kkt_residual`` is their sum.

    For each group the stationarity vector is X_j * psi - 2 lambda2 L delta_j
    with its component along D 1_C removed (the centering constraint's
    multiplier absorbs it), measured against lambda1 w_j times the
    subdifferential of ||delta_j||.
    """
    psi_hat = _score(dataset, state, penalty.tau, score, zero_tol)
    out: Dict[str, object] = {
        "global_Z": float(np.linalg.norm(dataset.Z.T @ psi_hat)),
        "global_X": float(np.linalg.norm(dataset.X.T @ psi_hat)) if dataset.p else 0.0,
        "groups": [],
    }
    weights = penalty.weight_vector(dataset.p)
    groups: List[float] = []
    for j in range(dataset.p):
        delta_j = state.delta[j]
        v = dataset.X[:, j] * psi_hat
        if penalty.lambda2 > 0:
            v = v - 2.0 * penalty.lambda2 * (graph.laplacian @ delta_j)
        if graph is not None:
            v = orthogonal_center(graph, v)
        threshold = penalty.lambda1 * weights[j]
        norm_delta = float(np.linalg.norm(delta_j))
        if norm_delta > 0:
            groups.append(float(np.linalg.norm(v - threshold * delta_j / norm_delta)))
        else:
            groups.append(max(float(np.linalg.norm(v)) - threshold, 0.0))
    out["groups"] = groups
    return out


def kkt_residual(dataset: SpatialDataset, graph: Optional[SpatialGraph], state: ParameterState,
                 penalty: PenaltyConfig, score: Optional[np.ndarray] = None,
                 zero_tol: float = DEFAULT_KINK_TOL) -> float:
    parts = kkt_components(dataset, graph, state, penalty, score=score, zero_tol=zero_tol)
    return float(parts["global_Z"] + parts["global_X"] + sum(parts["groups"]))


def silverman_bandwidth(r: np.ndarray) -> float:
    r = np.asarray(r, dtype=float)
    sd = float(np.std(r, ddof=1))
    spread = float(iqr(r)) / 1.34
    scale = min(sd, spread) if spread > 0 else sd
    return 0.9 * scale * r.size ** (-0.2)


def density_at_zero(r, bandwidth: float | str = "auto") -> np.ndarray:
    """Gaussian-kernel estimate of the residual density at 0, broadcast to every observation."""
    r = np.asarray(r, dtype=float).ravel()
    if r.size < _MIN_DENSITY_SAMPLE:
        raise DataError(f"density at zero needs at least {_MIN_DENSITY_SAMPLE} residuals, got {r.size}")
    if np.ptp(r) == 0:
        raise DataError("residuals have zero variance; density at zero is undefined")
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise DataError(f"bandwidth must be positive or 'auto', got {bandwidth!r}")
        bandwidth = silverman_bandwidth(r)
    bandwidth = float(bandwidth)
    if not bandwidth > 0:
        raise DataError(f"bandwidth must be positive, got {bandwidth}")
    f0 = float(np.mean(norm.pdf(r / bandwidth)) / bandwidth)
    return np.full(r.size, f0)


@dataclass
class SandwichEstimate:
    M_hat: np.ndarray
    V_hat: np.ndarray
    covariance: np.ndarray
    standard_errors: np.ndarray
    density_bandwidth: float

    def as_dict(self) -> dict:
        return {
            "standard_errors": self.standard_errors.tolist(),
            "covariance": self.covariance.tolist(),
            "density_bandwidth": self.density_bandwidth,
        }


def sandwich(dataset: SpatialDataset, state: ParameterState, tau: float,
             bandwidth: float | str = "auto") -> SandwichEstimate:
    """Plug-in covariance M^-1 V M^-1 / n of (alpha, beta_G) with G_i = (Z_i, X_i)."""
    check_tau(tau)
    G = dataset.design
    n = dataset.n
    r = residuals(dataset, state)
    h = silverman_bandwidth(r) if bandwidth == "auto" else float(bandwidth)
    f0 = density_at_zero(r, h)
    M_hat = (G.T * f0) @ G / n
    V_hat = tau * (1.0 - tau) * (G.T @ G) / n
    M_hat = 0.5 * (M_hat + M_hat.T)
    V_hat = 0.5 * (V_hat + V_hat.T)

    eigenvalues = np.linalg.eigvalsh(M_hat)
    if eigenvalues[0] <= 1e-12 * max(eigenvalues[-1], 1e-300):
        raise SingularSystemError(
            f"M_hat is singular: smallest eigenvalue {eigenvalues[0]:.3e} "
            f"(largest {eigenvalues[-1]:.3e})",
            condition_number=float(eigenvalues[-1] / max(abs(eigenvalues[0]), 1e-300)),
        )
    M_inv = np.linalg.inv(M_hat)
    covariance = M_inv @ V_hat @ M_inv / n
    covariance = 0.5 * (covariance + covariance.T)
    return SandwichEstimate(
        M_hat=M_hat,
        V_hat=V_hat,
        covariance=covariance,
        standard_errors=np.sqrt(np.clip(np.diag(covariance), 0.0, None)),
        density_bandwidth=h,
    )


def pseudo_r2(heldout_y, predictions, tau: float) -> float:
    """1 - CL(model) / CL(null), the null predicting the tau-quantile of ``heldout_y``."""
    check_tau(tau)
    y = np.asarray(heldout_y, dtype=float).ravel()
    pred = np.asarray(predictions, dtype=float).ravel()
    if y.size == 0 or y.shape != pred.shape:
        raise DataError(f"need matching nonempty responses and predictions, got {y.shape} and {pred.shape}")
    null = np.quantile(y, tau, method="inverted_cdf")
    null_loss = mean_check_loss(y - null, tau)
    if null_loss <= 0:
        raise DataError("null check loss is zero; pseudo-R^2 is undefined")
    return 1.0 - mean_check_loss(y - pred, tau) / null_loss


def morans_i(r, graph: SpatialGraph) -> Dict[str, float]:
    """Moran's I of ``r`` over the graph weights with a randomization normal approximation."""
    r = np.asarray(r, dtype=float).ravel()
    n = r.size
    if n != graph.n:
        raise DataError(f"{n} residuals but the graph has {graph.n} nodes")
    if n < 4:
        raise DataError("Moran's I needs at least 4 observations")
    z = r - r.mean()
    m2 = float(z @ z)
    if m2 == 0:
        raise DataError("constant residuals; Moran's I is undefined")

    W = graph.adjacency
    S0 = float(W.sum())
    statistic = n / S0 * float(z @ (W @ z)) / m2

    # W is symmetric, so (w_il + w_li)^2 = 4 w_il^2 and row + column sums = 2 d_i
    S1 = 2.0 * float(W.multiply(W).sum())
    S2 = float(np.sum((2.0 * graph.degrees) ** 2))
    b2 = n * float(np.sum(z ** 4)) / m2 ** 2
    expectation = -1.0 / (n - 1)
    numerator = (
        n * ((n * n - 3 * n + 3) * S1 - n * S2 + 3 * S0 ** 2)
        - b2 * ((n * n - n) * S1 - 2 * n * S2 + 6 * S0 ** 2)
    )
    variance = numerator / ((n - 1) * (n - 2) * (n - 3) * S0 ** 2) - expectation ** 2
    variance = max(variance, 1e-300)
    z_score = (statistic - expectation) / np.sqrt(variance)
    return {
        "statistic": float(statistic),
        "p_value": float(2.0 * norm.sf(abs(z_score))),
        "expectation": float(expectation),
        "variance": float(variance),
        "z_score": float(z_score),
    }


def deviation_summary(state: ParameterState, names: Optional[Sequence[str]] = None) -> List[dict]:
    """Global coefficient and deviation-field range per varying covariate."""
    p = state.beta_G.shape[0]
    names = list(names) if names is not None else [f"X{j + 1}" for j in range(p)]
    rows = []
    for j in range(p):
        delta_j = state.delta[j]
        rows.append({
            "covariate": names[j],
            "beta_G": float(state.beta_G[j]),
            "delta_norm": float(np.linalg.norm(delta_j)),
            "delta_min": float(delta_j.min()) if delta_j.size else 0.0,
            "delta_max": float(delta_j.max()) if delta_j.size else 0.0,
            "local": bool(np.any(delta_j != 0)),
        })
    return rows
