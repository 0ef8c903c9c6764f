"""
tuning.py
Adaptive weights from a pilot fit, heuristic lambda anchors, spatially blocked
K-fold cross-validation and the two-stage fitting protocol.

Every fold rebuilds the k-NN graph from its training locations only, so no
edge ever joins a training site to a held-out one. Held-out deviation values
come from the nearest training site.

Usage
-----
from tuning import TuningConfig, fit_two_stage
two_stage = fit_two_stage(dataset, graph, tau=0.5, config=TuningConfig(folds=5, seed=1))
two_stage.fit.state.delta
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.stats import median_abs_deviation

from admm_solver import AdmmConfig, fit_admm, fit_global_qr
from errors import DataError, DegenerateGraphError, ParameterError
from model_core import FitResult, ParameterState, PenaltyConfig, SpatialDataset, deviation_term, mean_check_loss
from multi_thread_workers import map_ordered
from performance_monitor import monitor_function
from quantile_loss import check_tau
from spatial_graph import DEFAULT_K, SpatialGraph, as_coordinates, build_graph, spectral_summary
from spg_solver import SpgConfig, fit_spg

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
MAX_PLAN_RETRIES = 5
_MAX_GRID_CELLS_PER_AXIS = 64

# Looser tolerances for the many fits of a CV grid; warm starts along lambda2 recover most of the gap.
CV_ADMM_CONFIG = AdmmConfig(eps_abs=1e-4, eps_rel=1e-3, max_iter=2000)

SolverConfig = Union[AdmmConfig, SpgConfig]


class TuningConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    folds: int = Field(DEFAULT_FOLDS, ge=2, description="Number of spatial CV folds")
    seed: int = Field(0, ge=0, description="Seed of the fold plan")
    grid_points: int = Field(9, ge=1, description="Log-spaced values per lambda")
    grid_decades: float = Field(2.0, ge=0, description="Grid spans anchor * 10^[-d, d]")
    pilot: Literal["adaptive", "smooth"] = Field("adaptive", description="Pilot fit used for the adaptive weights")
    a: Optional[float] = Field(None, gt=0, description="Weight stabilizer; None means 0.01 * scale(y)")
    gamma: float = Field(1.0, gt=0, le=1)
    k: int = Field(DEFAULT_K, gt=0, description="Neighbours of the per-fold graphs")
    sigma: Union[float, Literal["auto"]] = Field("auto", description="Kernel bandwidth of the per-fold graphs")


def robust_scale(y) -> float:
    """Median absolute deviation times 1.4826."""
    return float(median_abs_deviation(np.asarray(y, dtype=float), scale="normal"))


@dataclass(frozen=True)
class CvPlan:
    K: int
    fold_assignment: np.ndarray
    seed: int

    def split(self, fold: int):
        held_out = self.fold_assignment == fold
        return np.flatnonzero(~held_out), np.flatnonzero(held_out)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.fold_assignment, minlength=self.K)


def _cut_cells(counts: np.ndarray, K: int) -> Optional[np.ndarray]:
    """Split an ordered run of cells into K consecutive groups of near-equal point counts."""
    occupied = np.flatnonzero(counts)
    if occupied.size < K:
        return None
    cumulative = np.cumsum(counts[occupied])
    total = cumulative[-1]
    cuts = []
    start = 1
    for k in range(1, K):
        stop = occupied.size - (K - k)
        candidates = np.arange(start, stop + 1)
        best = candidates[np.argmin(np.abs(cumulative[candidates - 1] - k * total / K))]
        cuts.append(best)
        start = best + 1
    group_of_occupied = np.searchsorted(np.asarray(cuts), np.arange(occupied.size), side="right")
    groups = np.full(counts.size, -1, dtype=np.int64)
    groups[occupied] = group_of_occupied
    return groups


def make_spatial_folds(locations, K: int = DEFAULT_FOLDS, seed: int = 0, jitter: bool = False) -> CvPlan:
    """Blocked folds from a ceil(sqrt K) x ceil(sqrt K) grid over the bounding box.

    Cells are visited column by column in serpentine order, so consecutive cells
    share an edge, and the run is cut into K pieces of near-equal size. With
    ``jitter`` the grid origin is shifted by a seeded random fraction of a cell,
    which is how a rejected plan is regenerated. The grid is refined when fewer
    than K cells are occupied.
    """
    coords = as_coordinates(locations)
    n = coords.shape[0]
    if int(K) != K or K < 2:
        raise ParameterError(f"fold count K must be an integer >= 2, got {K}")
    K = int(K)
    if K > n / 10:
        raise ParameterError(f"K={K} folds need at least {10 * K} observations, got {n}")
    lower = coords.min(axis=0)
    span = coords.max(axis=0) - lower
    if np.all(span == 0):
        raise DegenerateGraphError("all locations coincide; spatial folds are undefined")
    span = np.where(span > 0, span, 1.0)

    rng = np.random.Generator(np.random.Philox(seed))
    offset = rng.uniform(0.0, 1.0, size=2) if jitter else np.zeros(2)
    cells = math.ceil(math.sqrt(K))
    while cells <= _MAX_GRID_CELLS_PER_AXIS:
        per_axis = cells + (1 if jitter else 0)
        position = (coords - lower) / span * cells + offset
        index = np.clip(np.floor(position).astype(np.int64), 0, per_axis - 1)
        column, row = index[:, 0], index[:, 1]
        serpentine_row = np.where(column % 2 == 0, row, per_axis - 1 - row)
        rank = column * per_axis + serpentine_row
        groups = _cut_cells(np.bincount(rank, minlength=per_axis * per_axis), K)
        if groups is not None:
            return CvPlan(K=K, fold_assignment=groups[rank], seed=seed)
        cells *= 2
    raise DegenerateGraphError(f"could not place {K} spatial blocks over {n} locations")


@dataclass
class LambdaGrid:
    lambda1_values: np.ndarray
    lambda2_values: np.ndarray
    lambda1_anchor: float
    lambda2_anchor: float
    loss_scale: float = 1.0
    degenerate: bool = False

    @classmethod
    def single(cls, lambda1: float, lambda2: float) -> "LambdaGrid":
        return cls(np.array([float(lambda1)]), np.array([float(lambda2)]), float(lambda1), float(lambda2))

    def restrict(self, lambda1: Optional[float] = None, lambda2: Optional[float] = None) -> "LambdaGrid":
        """Same grid with each given lambda pinned to its single value."""
        return LambdaGrid(
            lambda1_values=self.lambda1_values if lambda1 is None else np.array([float(lambda1)]),
            lambda2_values=self.lambda2_values if lambda2 is None else np.array([float(lambda2)]),
            lambda1_anchor=self.lambda1_anchor,
            lambda2_anchor=self.lambda2_anchor,
            loss_scale=self.loss_scale,
            degenerate=self.degenerate,
        )

    @property
    def pilot_lambdas(self) -> tuple[float, float]:
        """(lambda1, lambda2) of the adaptive pilot fit in objective units."""
        return 0.01 * self.lambda1_anchor * self.loss_scale, self.lambda2_anchor * self.loss_scale


def lambda_anchors(dataset: SpatialDataset, graph: SpatialGraph, tau: float,
                   n_points: int = 9, decades: float = 2.0) -> LambdaGrid:
    """Anchors lambda2 = median nonzero eigenvalue of L_sym / n and
    lambda1 = sqrt(tau (1 - tau)) * scale(y) * sqrt(log p / n).

    The anchors are per-observation levels (loss averaged over sites). The
    objective sums the check loss, so the grid values are n * anchor *
    10^[-decades, decades] with ``n_points`` log-spaced values each.
    """
    check_tau(tau)
    n = dataset.n
    lambda2_anchor = spectral_summary(graph)["median_nonzero_eigenvalue_estimate"] / n
    scale = robust_scale(dataset.y)
    degenerate = scale <= 0
    if degenerate:
        logger.warning("scale(y) is zero (constant response); lambda1 anchor uses unit scale")
        scale = 1.0
    # log p vanishes at p = 1, so the group count is floored at 2
    lambda1_anchor = math.sqrt(tau * (1.0 - tau)) * scale * math.sqrt(math.log(max(dataset.p, 2)) / n)
    factors = np.logspace(-decades, decades, n_points) if n_points > 1 else np.ones(1)
    return LambdaGrid(
        lambda1_values=n * lambda1_anchor * factors,
        lambda2_values=n * lambda2_anchor * factors,
        lambda1_anchor=lambda1_anchor,
        lambda2_anchor=lambda2_anchor,
        loss_scale=float(n),
        degenerate=degenerate,
    )


def adaptive_weights(pilot_state: ParameterState, a: float, gamma: float = 1.0) -> np.ndarray:
    """w_j = (||delta_j||_2 + a)^(-gamma) from the pilot deviation fields."""
    if not a > 0:
        raise ParameterError(f"weight stabilizer a must be positive, got {a}")
    if not (0 < gamma <= 1):
        raise ParameterError(f"weight exponent gamma must lie in (0, 1], got {gamma}")
    return (np.linalg.norm(pilot_state.delta, axis=1) + a) ** (-gamma)


def transfer_deviations(train_locations, delta: np.ndarray, new_locations) -> np.ndarray:
    """Deviation fields at new locations, copied from the nearest training site."""
    train = as_coordinates(train_locations)
    new = as_coordinates(new_locations)
    delta = np.asarray(delta, dtype=float)
    if delta.shape[0] == 0:
        return np.zeros((0, new.shape[0]))
    if delta.shape[1] != train.shape[0]:
        raise DataError(f"delta has {delta.shape[1]} sites but {train.shape[0]} training locations were given")
    _, nearest = cKDTree(train).query(new, k=1)
    return delta[:, nearest]


def predict_at(state: ParameterState, train_locations, Z, X, new_locations) -> np.ndarray:
    """Conditional quantiles at new rows using alpha, beta_G and 1-NN transferred deviations."""
    Z = np.asarray(Z, dtype=float).reshape(len(new_locations), -1)
    X = np.asarray(X, dtype=float).reshape(len(new_locations), -1)
    delta_new = transfer_deviations(train_locations, state.delta, new_locations)
    return Z @ state.alpha + X @ state.beta_G + deviation_term(X, delta_new)


def _fit(dataset: SpatialDataset, graph: SpatialGraph, penalty: PenaltyConfig,
         solver_config: Optional[SolverConfig], initial: Optional[ParameterState] = None) -> FitResult:
    if isinstance(solver_config, SpgConfig):
        return fit_spg(dataset, graph, penalty, solver_config, initial=initial)
    return fit_admm(dataset, graph, solver_config, penalty, initial=initial)


def fold_graph(dataset: SpatialDataset, plan: CvPlan, fold: int, k: int = DEFAULT_K,
               sigma: float | str = "auto"):
    """Training indices, held-out indices and the graph built on the training sites alone."""
    train, test = plan.split(fold)
    graph = build_graph(dataset.locations[train], k=min(k, train.size - 1), sigma=sigma)
    return train, test, graph


def leakage_audit(dataset: SpatialDataset, plan: CvPlan, k: int = DEFAULT_K, sigma: float | str = "auto") -> int:
    """Number of training-graph edges, over all folds, with an endpoint in the held-out set."""
    violations = 0
    for fold in range(plan.K):
        train, test, graph = fold_graph(dataset, plan, fold, k, sigma)
        edges = sparse.triu(graph.adjacency, k=1).tocoo()
        held_out = np.isin(train[edges.row], test) | np.isin(train[edges.col], test)
        violations += int(np.sum(held_out))
    return violations


def _plan_is_usable(plan: CvPlan, graph: SpatialGraph) -> bool:
    sizes = plan.fold_sizes()
    if np.any(sizes == 0):
        return False
    for fold in range(plan.K):
        train, _ = plan.split(fold)
        if train.size <= 2 or np.unique(graph.components[train]).size < graph.n_components:
            return False
    return True


@dataclass
class CvResult:
    best_lambda1: float
    best_lambda2: float
    cv_table: pd.DataFrame
    summary: pd.DataFrame
    plan: CvPlan


def select_lambdas(cv_table: pd.DataFrame) -> tuple[float, float, pd.DataFrame]:
    """Pair with the smallest mean held-out loss; ties go to larger lambda1, then larger lambda2."""
    summary = (cv_table.groupby(["lambda1", "lambda2"], as_index=False)["heldout_checkloss"].mean()
               .rename(columns={"heldout_checkloss": "mean_checkloss"}))
    ranked = summary.assign(_key=summary["mean_checkloss"].round(12)).sort_values(
        ["_key", "lambda1", "lambda2"], ascending=[True, False, False], kind="mergesort")
    best = ranked.iloc[0]
    return float(best["lambda1"]), float(best["lambda2"]), summary


@monitor_function
def cross_validate(dataset: SpatialDataset, plan: CvPlan, grid: LambdaGrid, tau: float,
                   solver_config: Optional[SolverConfig] = None, weights: Optional[Sequence[float]] = None,
                   k: int = DEFAULT_K, sigma: float | str = "auto", n_jobs: int = 1,
                   graph: Optional[SpatialGraph] = None) -> CvResult:
    """Blocked CV over the lambda grid; see the module docstring for the leakage rule."""
    check_tau(tau)
    solver_config = solver_config if solver_config is not None else CV_ADMM_CONFIG
    weights = None if weights is None else [float(w) for w in weights]
    full_graph = graph if graph is not None else build_graph(dataset.locations, k=k, sigma=sigma)

    for attempt in range(MAX_PLAN_RETRIES + 1):
        if _plan_is_usable(plan, full_graph):
            break
        if attempt == MAX_PLAN_RETRIES:
            raise DataError(f"no usable fold plan after {MAX_PLAN_RETRIES} regenerations")
        logger.warning(f"Fold plan (seed={plan.seed}) leaves a graph component without training sites; regenerating")
        plan = make_spatial_folds(dataset.locations, plan.K, seed=plan.seed + attempt + 1, jitter=True)

    lambda1_values = [float(v) for v in np.sort(grid.lambda1_values)]
    lambda2_descending = [float(v) for v in np.sort(grid.lambda2_values)[::-1]]

    def score_fold(fold: int) -> List[dict]:
        train, test, train_graph = fold_graph(dataset, plan, fold, k, sigma)
        train_data = dataset.subset(train)
        test_data = dataset.subset(test)
        pilot = fit_global_qr(train_data, train_graph, tau,
                              solver_config if isinstance(solver_config, AdmmConfig) else None)
        rows = []
        for lambda1 in lambda1_values:
            warm = pilot.state
            for lambda2 in lambda2_descending:
                penalty = PenaltyConfig(tau=tau, lambda1=lambda1, lambda2=lambda2, weights=weights)
                result = _fit(train_data, train_graph, penalty, solver_config, initial=warm)
                warm = result.state
                prediction = predict_at(result.state, train_data.locations, test_data.Z, test_data.X,
                                        test_data.locations)
                rows.append({
                    "lambda1": lambda1,
                    "lambda2": lambda2,
                    "fold": fold,
                    "heldout_checkloss": mean_check_loss(test_data.y - prediction, tau),
                })
        logger.debug(f"CV fold {fold}: {len(train)} training / {len(test)} held-out sites")
        return rows

    fold_rows = map_ordered(score_fold, list(range(plan.K)), n_jobs)
    cv_table = (pd.DataFrame([row for rows in fold_rows for row in rows])
                .sort_values(["lambda1", "lambda2", "fold"], kind="mergesort").reset_index(drop=True))
    best_lambda1, best_lambda2, summary = select_lambdas(cv_table)
    logger.info(f"CV selected lambda1={best_lambda1:.4g}, lambda2={best_lambda2:.4g}")
    return CvResult(best_lambda1, best_lambda2, cv_table, summary, plan)


@dataclass
class TwoStageResult:
    fit: FitResult
    pilot: FitResult
    weights: np.ndarray
    grid: LambdaGrid
    lambda1: float
    lambda2: float
    cv: Optional[CvResult] = None


@dataclass
class PilotStage:
    pilot: FitResult
    weights: np.ndarray
    grid: LambdaGrid
    a: float


def pilot_stage(dataset: SpatialDataset, graph: SpatialGraph, tau: float,
                config: Optional[TuningConfig] = None,
                solver_config: Optional[SolverConfig] = None) -> PilotStage:
    """Anchored grid, pilot fit and the adaptive weights derived from it."""
    config = config or TuningConfig()
    grid = lambda_anchors(dataset, graph, tau, config.grid_points, config.grid_decades)
    pilot_lambda1, pilot_lambda2 = grid.pilot_lambdas
    pilot_penalty = PenaltyConfig(
        tau=tau,
        lambda1=pilot_lambda1 if config.pilot == "adaptive" else 0.0,
        lambda2=pilot_lambda2,
    )
    pilot = _fit(dataset, graph, pilot_penalty, solver_config)
    a = config.a if config.a is not None else 0.01 * robust_scale(dataset.y)
    if not a > 0:
        a = 0.01
    return PilotStage(pilot=pilot, weights=adaptive_weights(pilot.state, a, config.gamma), grid=grid, a=a)


def fit_two_stage(dataset: SpatialDataset, graph: SpatialGraph, tau: float,
                  lambda1: Optional[float] = None, lambda2: Optional[float] = None,
                  config: Optional[TuningConfig] = None, solver_config: Optional[SolverConfig] = None,
                  cv_solver_config: Optional[SolverConfig] = None, n_jobs: int = 1) -> TwoStageResult:
    """Pilot fit -> adaptive weights -> CV (unless both lambdas are given) -> final fit on all sites."""
    config = config or TuningConfig()
    stage = pilot_stage(dataset, graph, tau, config, solver_config)
    grid, weights = stage.grid, stage.weights

    cv_result = None
    if lambda1 is None or lambda2 is None:
        search = grid.restrict(lambda1, lambda2)
        plan = make_spatial_folds(dataset.locations, config.folds, seed=config.seed)
        if cv_solver_config is None:
            cv_solver_config = solver_config if isinstance(solver_config, SpgConfig) else CV_ADMM_CONFIG
        cv_result = cross_validate(dataset, plan, search, tau, cv_solver_config, weights,
                                   k=config.k, sigma=config.sigma, n_jobs=n_jobs, graph=graph)
        lambda1, lambda2 = cv_result.best_lambda1, cv_result.best_lambda2

    penalty = PenaltyConfig(tau=tau, lambda1=float(lambda1), lambda2=float(lambda2),
                            weights=[float(w) for w in weights], a=stage.a, gamma=config.gamma)
    final = _fit(dataset, graph, penalty, solver_config, initial=stage.pilot.state)
    return TwoStageResult(fit=final, pilot=stage.pilot, weights=weights, grid=grid,
                          lambda1=float(lambda1), lambda2=float(lambda2), cv=cv_result)
