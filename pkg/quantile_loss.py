"""
quantile_loss.py
Check-loss primitives: rho_tau, its score psi_tau, the proximal map of the
check loss, the Moreau envelope with its gradient, and group soft-thresholding.

All functions accept scalars or numpy arrays and broadcast elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import ParameterError


def check_tau(tau: float) -> float:
    if not (0.0 < tau < 1.0):
        raise ParameterError(f"quantile level tau must lie in (0, 1), got {tau}")
    return float(tau)


@dataclass(frozen=True)
class MoreauParams:
    h: float
    tau: float

    def __post_init__(self):
        if not (self.h > 0):
            raise ParameterError(f"smoothing bandwidth h must be positive, got {self.h}")
        check_tau(self.tau)


def rho(r, tau: float):
    """Check loss r * (tau - 1{r < 0})."""
    r = np.asarray(r, dtype=float)
    out = r * (tau - (r < 0))
    return out if out.ndim else float(out)


def psi(r, tau: float):
    """Score tau - 1{r < 0}; psi(0) = tau."""
    r = np.asarray(r, dtype=float)
    out = tau - (r < 0).astype(float)
    return out if out.ndim else float(out)


def prox_check(v, gamma: float, tau: float):
    """Proximal map of gamma * rho_tau: an asymmetric soft-threshold.

    Returns v - gamma*tau above the dead zone, v + gamma*(1-tau) below it and
    0 on [-gamma*(1-tau), gamma*tau].
    """
    if not (gamma > 0):
        raise ParameterError(f"prox step gamma must be positive, got {gamma}")
    v = np.asarray(v, dtype=float)
    upper = gamma * tau
    lower = -gamma * (1.0 - tau)
    out = np.where(v > upper, v - upper, np.where(v < lower, v - lower, 0.0))
    return out if out.ndim else float(out)


def moreau_value_grad(r, params: MoreauParams):
    """Moreau envelope M_h(r) of rho_tau and its gradient (r - prox)/h."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(prox_check(r, params.h, params.tau))
    value = rho(s, params.tau) + (s - r) ** 2 / (2.0 * params.h)
    grad = (r - s) / params.h
    if r.ndim == 0:
        return float(value), float(grad)
    return value, grad


def group_shrink(v, kappa: float) -> np.ndarray:
    """(1 - kappa/||v||)_+ v, exactly zero when ||v|| <= kappa."""
    v = np.asarray(v, dtype=float)
    if kappa < 0:
        raise ParameterError(f"shrink threshold must be nonnegative, got {kappa}")
    if kappa == 0:
        return v.copy()
    norm = float(np.linalg.norm(v))
    if norm <= kappa:
        return np.zeros_like(v)
    return (1.0 - kappa / norm) * v
