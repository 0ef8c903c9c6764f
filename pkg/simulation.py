"""
simulation.py
Synthetic spatial quantile-regression data on the unit square, the six error
laws, metric families (global parameter error, deviation MSE, local/global
classification, held-out check loss) and a seeded Monte Carlo runner that
compares the two-stage sparse-smooth fit with a purely global QR baseline.

Usage
-----
from simulation import DgpConfig, generate_dataset, run_monte_carlo
sim = generate_dataset(DgpConfig(n=500, error_law="t3", seed=3))
mc = run_monte_carlo(DgpConfig(n=500), R=20, n_jobs=4)
mc.summary.to_csv("summary.csv", index=False)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from admm_solver import AdmmConfig, fit_global_qr
from errors import ParameterError
from model_core import (
    FitResult,
    ParameterState,
    SpatialDataset,
    deviation_term,
    mean_check_loss,
)
from multi_thread_workers import map_capture_errors
from performance_monitor import log_fit_metrics, monitor_function
from quantile_loss import check_tau
from spatial_graph import DEFAULT_K, SpatialGraph, build_graph, component_means
from tuning import SolverConfig, TuningConfig, fit_two_stage, predict_at

logger = logging.getLogger(__name__)

ErrorLaw = Literal["normal", "ald", "t3", "contaminated", "cauchy", "hetero_t3"]
ERROR_LAWS: Tuple[str, ...] = ("normal", "ald", "t3", "contaminated", "cauchy", "hetero_t3")
DEFAULT_KAPPA = 0.1
OUTLIER_SIGMAS = 2.5
METRIC_COLUMNS = ["PE", "MSE_X1", "MSE_X2", "MSE_X3", "MSE_X4", "Sens", "Spec", "CL"]

_ALD_TAU = 0.5
_CONTAMINATION = 0.1
_CONTAMINATION_SCALE = 5.0


class DgpConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int = Field(500, ge=50, description="Number of training sites")
    n_test: Optional[int] = Field(None, ge=1, description="Held-out sites; None means n // 4")
    tau: float = Field(0.5, gt=0, lt=1)
    alpha0: Tuple[float, float, float] = (3.0, -1.0, 1.5)
    betaG0: Tuple[float, float, float, float] = (5.0, 0.0, 2.5, 0.0)
    A1: float = Field(2.0, ge=0, description="Amplitude of the wave field on X1")
    c1: float = Field(1.0, description="Linear trend weight inside the X1 field")
    A3: float = Field(4.0, ge=0, description="Amplitude of the bowl field on X3")
    error_law: ErrorLaw = "normal"
    sigma: float = Field(1.0, gt=0, description="Base noise scale (ignored by hetero_t3)")
    seed: int = Field(0, ge=0)
    k: int = Field(DEFAULT_K, gt=0, description="Neighbours of the shared k-NN graph")

    @property
    def test_size(self) -> int:
        return self.n_test if self.n_test is not None else max(self.n // 4, 1)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def raw_deviation_fields(locations: np.ndarray, config: DgpConfig) -> np.ndarray:
    """Uncentered (4, n) fields: wave on X1, bowl on X3, zero on X2 and X4."""
    u1, u2 = locations[:, 0], locations[:, 1]
    fields = np.zeros((4, locations.shape[0]))
    fields[0] = config.A1 * (np.sin(2 * np.pi * u1) * np.cos(2 * np.pi * u2) + config.c1 * (u1 - 0.5))
    fields[2] = config.A3 * ((u1 - 0.5) ** 2 + (u2 - 0.5) ** 2)
    return fields


def _contaminated_cdf(x: float, sigma: float) -> float:
    return ((1 - _CONTAMINATION) * stats.norm.cdf(x / sigma)
            + _CONTAMINATION * stats.norm.cdf(x / (_CONTAMINATION_SCALE * sigma)))


def error_quantile(law: str, sigma: float, u1, tau: float):
    """tau-quantile of the raw error draw; subtracting it makes the tau-quantile of eps zero."""
    check_tau(tau)
    if tau == 0.5:
        return np.zeros_like(np.asarray(u1, dtype=float))
    u1 = np.asarray(u1, dtype=float)
    if law == "normal":
        q = sigma * stats.norm.ppf(tau)
    elif law == "ald":
        q = stats.laplace.ppf(tau, scale=sigma / _ALD_TAU)
    elif law == "t3":
        q = sigma * stats.t.ppf(tau, df=3)
    elif law == "cauchy":
        q = sigma * stats.cauchy.ppf(tau)
    elif law == "contaminated":
        bound = 10 * _CONTAMINATION_SCALE * sigma
        q = brentq(lambda x: _contaminated_cdf(x, sigma) - tau, -bound, bound)
    elif law == "hetero_t3":
        return (0.5 + 0.5 * u1) * stats.t.ppf(tau, df=3)
    else:
        raise ValueError(f"unknown error law {law!r}; expected one of {ERROR_LAWS}")
    return np.full(u1.shape, float(q))


def sample_errors(law: str, sigma: float, locations: np.ndarray, tau: float,
                  rng: np.random.Generator) -> np.ndarray:
    """One draw per location, shifted so the tau-quantile of every draw is zero."""
    m = locations.shape[0]
    if law == "normal":
        draw = sigma * rng.standard_normal(m)
    elif law == "ald":
        # scale parameter tau = 1/2: sigma * (E1 / tau - E2 / (1 - tau))
        draw = sigma * (rng.standard_exponential(m) / _ALD_TAU - rng.standard_exponential(m) / (1 - _ALD_TAU))
    elif law == "t3":
        draw = sigma * rng.standard_normal(m) / np.sqrt(rng.chisquare(3, m) / 3.0)
    elif law == "contaminated":
        wide = rng.uniform(size=m) < _CONTAMINATION
        draw = sigma * rng.standard_normal(m) * np.where(wide, _CONTAMINATION_SCALE, 1.0)
    elif law == "cauchy":
        draw = sigma * np.tan(np.pi * (rng.uniform(size=m) - 0.5))
    elif law == "hetero_t3":
        scale = 0.5 + 0.5 * locations[:, 0]
        draw = scale * rng.standard_normal(m) / np.sqrt(rng.chisquare(3, m) / 3.0)
    else:
        raise ValueError(f"unknown error law {law!r}; expected one of {ERROR_LAWS}")
    return draw - error_quantile(law, sigma, locations[:, 0], tau)


def sample_error(law: str, sigma: float, u, tau: float, rng: np.random.Generator) -> float:
    return float(sample_errors(law, sigma, np.asarray(u, dtype=float).reshape(1, 2), tau, rng)[0])


@dataclass
class SimulatedData:
    config: DgpConfig
    dataset: SpatialDataset
    graph: SpatialGraph
    true_state: ParameterState
    errors: np.ndarray
    test: SpatialDataset
    test_errors: np.ndarray


def _design(rng: np.random.Generator, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    locations = rng.uniform(size=(m, 2))
    Z = np.column_stack([np.ones(m), rng.standard_normal((m, 2))])
    X = rng.standard_normal((m, 4))
    return locations, Z, X


def generate_dataset(config: DgpConfig) -> SimulatedData:
    """Training and test draws of one replicate; the graph is built once and shared with the fitter."""
    rng = make_rng(config.seed)
    locations, Z, X = _design(rng, config.n)
    graph = build_graph(locations, k=config.k)

    raw = raw_deviation_fields(locations, config)
    offsets = np.vstack([component_means(graph, row) for row in raw])
    delta = raw - offsets[:, graph.components]
    true_state = ParameterState(np.asarray(config.alpha0), np.asarray(config.betaG0), delta)

    errors = sample_errors(config.error_law, config.sigma, locations, config.tau, rng)
    y = Z @ true_state.alpha + X @ true_state.beta_G + deviation_term(X, delta) + errors
    dataset = SpatialDataset(y, Z, X, locations)

    test_locations, Z_test, X_test = _design(rng, config.test_size)
    _, nearest = cKDTree(locations).query(test_locations, k=1)
    test_delta = raw_deviation_fields(test_locations, config) - offsets[:, graph.components[nearest]]
    test_errors = sample_errors(config.error_law, config.sigma, test_locations, config.tau, rng)
    y_test = (Z_test @ true_state.alpha + X_test @ true_state.beta_G
              + deviation_term(X_test, test_delta) + test_errors)
    return SimulatedData(
        config=config,
        dataset=dataset,
        graph=graph,
        true_state=true_state,
        errors=errors,
        test=SpatialDataset(y_test, Z_test, X_test, test_locations),
        test_errors=test_errors,
    )


def classify_local(state: ParameterState, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    """X_j is local when the RMS of its deviation field exceeds kappa (strictly)."""
    if state.delta.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return np.sqrt(np.mean(state.delta ** 2, axis=1)) > kappa


@dataclass
class McMetrics:
    pe_theta: float
    mse_delta: np.ndarray
    sensitivity: float
    specificity: float
    cl_test: float

    def as_row(self) -> dict:
        row = {"PE": self.pe_theta}
        row.update({f"MSE_X{j + 1}": float(v) for j, v in enumerate(self.mse_delta)})
        row.update({"Sens": self.sensitivity, "Spec": self.specificity, "CL": self.cl_test})
        return row


def compute_metrics(fit: FitResult | ParameterState, true_state: ParameterState, test_data: SpatialDataset,
                    train_locations: np.ndarray, tau: float, kappa: float = DEFAULT_KAPPA) -> McMetrics:
    """Replicate metrics; the held-out check loss is scored at ``tau``, which must match the fit."""
    tau = check_tau(tau)
    if isinstance(fit, FitResult):
        if fit.penalty.tau != tau:
            raise ParameterError(f"fit was made at tau={fit.penalty.tau} but metrics were requested at tau={tau}")
        state = fit.state
    else:
        state = fit
    pe = (float(np.linalg.norm(state.alpha - true_state.alpha))
          + float(np.linalg.norm(state.beta_G - true_state.beta_G)))
    mse = np.mean((state.delta - true_state.delta) ** 2, axis=1)

    truly_local = np.any(true_state.delta != 0, axis=1)
    declared = classify_local(state, kappa)
    positives = int(np.sum(truly_local))
    negatives = int(np.sum(~truly_local))
    # no truly local (or global) covariate means nothing can be missed
    sensitivity = float(np.sum(declared & truly_local)) / positives if positives else 1.0
    specificity = float(np.sum(~declared & ~truly_local)) / negatives if negatives else 1.0

    prediction = predict_at(state, train_locations, test_data.Z, test_data.X, test_data.locations)
    return McMetrics(
        pe_theta=pe,
        mse_delta=mse,
        sensitivity=sensitivity,
        specificity=specificity,
        cl_test=mean_check_loss(test_data.y - prediction, tau),
    )


def fit_global_qr_baseline(dataset: SpatialDataset, tau: float, graph: Optional[SpatialGraph] = None,
                           config: Optional[AdmmConfig] = None) -> FitResult:
    """Global QR with every deviation field held at zero."""
    return fit_global_qr(dataset, graph, tau, config)


def deviation_correlations(fit_state: ParameterState, true_state: ParameterState) -> np.ndarray:
    """Pearson correlation of estimated and true fields per covariate; NaN when either is constant."""
    out = np.full(true_state.delta.shape[0], np.nan)
    for j in range(out.size):
        est, truth = fit_state.delta[j], true_state.delta[j]
        if np.ptp(est) > 0 and np.ptp(truth) > 0:
            out[j] = float(np.corrcoef(est, truth)[0, 1])
    return out


def scenario_table(sim: SimulatedData, fit: FitResult) -> pd.DataFrame:
    """Per-site true and estimated deviations, their error and the total effect, with an outlier flag."""
    locations = sim.dataset.locations
    frame = pd.DataFrame({"u1": locations[:, 0], "u2": locations[:, 1]})
    state = fit.state
    for j in range(state.delta.shape[0]):
        name = f"X{j + 1}"
        frame[f"true_delta_{name}"] = sim.true_state.delta[j]
        frame[f"est_delta_{name}"] = state.delta[j]
        frame[f"error_{name}"] = state.delta[j] - sim.true_state.delta[j]
        frame[f"total_effect_{name}"] = state.beta_G[j] + state.delta[j]
    frame["outlier"] = np.abs(sim.errors) > OUTLIER_SIGMAS * sim.config.sigma
    return frame


def dataset_frame(dataset: SpatialDataset) -> pd.DataFrame:
    """Flat table (y, z1.., x1.., u1, u2) of a simulated dataset; the intercept column of Z is implied."""
    frame = pd.DataFrame({"y": dataset.y})
    for j in range(1, dataset.q):
        frame[f"z{j}"] = dataset.Z[:, j]
    for j in range(dataset.p):
        frame[f"x{j + 1}"] = dataset.X[:, j]
    frame["u1"] = dataset.locations[:, 0]
    frame["u2"] = dataset.locations[:, 1]
    return frame


@dataclass
class MonteCarloResult:
    replicates: pd.DataFrame
    summary: pd.DataFrame
    failures: int
    failure_messages: List[str]


def summarize_replicates(replicates: pd.DataFrame, error_law: str, failures: int = 0) -> pd.DataFrame:
    """Mean and standard deviation of every metric per method (sd is NaN for a single replicate)."""
    rows = []
    for method, group in replicates.groupby("method", sort=False):
        row = {"error_law": error_law, "method": method, "replicates": len(group), "failures": failures}
        for column in METRIC_COLUMNS:
            row[column] = float(group[column].mean())
            row[f"{column}_sd"] = float(group[column].std(ddof=1)) if len(group) > 1 else np.nan
        rows.append(row)
    columns = ["error_law", "method"] + [c for name in METRIC_COLUMNS for c in (name, f"{name}_sd")]
    return pd.DataFrame(rows, columns=columns + ["replicates", "failures"])


@monitor_function
def run_monte_carlo(config: DgpConfig, R: int, tuning: Optional[TuningConfig] = None,
                    solver_config: Optional[SolverConfig] = None, kappa: float = DEFAULT_KAPPA,
                    include_baseline: bool = True, n_jobs: int = 1) -> MonteCarloResult:
    """R seeded replicates (seed = config.seed + r) of generate -> two-stage fit -> metrics."""
    if R < 1:
        raise ValueError(f"need at least one replicate, got R={R}")
    tuning = tuning or TuningConfig(k=config.k)

    def replicate(r: int) -> List[dict]:
        sim = generate_dataset(config.model_copy(update={"seed": config.seed + r}))
        two_stage = fit_two_stage(sim.dataset, sim.graph, config.tau, config=tuning, solver_config=solver_config)
        log_fit_metrics(two_stage.fit, label=f"replicate-{r}")
        metrics = compute_metrics(two_stage.fit, sim.true_state, sim.test, sim.dataset.locations,
                                  config.tau, kappa)
        rows = [{"replicate": r, "method": "ssvcqr", "lambda1": two_stage.lambda1,
                 "lambda2": two_stage.lambda2, "converged": two_stage.fit.converged, **metrics.as_row()}]
        if include_baseline:
            baseline = fit_global_qr_baseline(sim.dataset, config.tau, sim.graph)
            base_metrics = compute_metrics(baseline, sim.true_state, sim.test, sim.dataset.locations,
                                           config.tau, kappa)
            rows.append({"replicate": r, "method": "qr", "lambda1": np.nan, "lambda2": np.nan,
                         "converged": baseline.converged, **base_metrics.as_row()})
        return rows

    outcomes = map_capture_errors(replicate, list(range(R)), n_jobs)
    rows, messages = [], []
    for r, (ok, value) in enumerate(outcomes):
        if ok:
            rows.extend(value)
        else:
            logger.warning(f"Replicate {r} failed:\n{value}")
            messages.append(value)
    replicates = pd.DataFrame(rows)
    if replicates.empty:
        summary = pd.DataFrame(columns=["error_law", "method"] + METRIC_COLUMNS)
    else:
        summary = summarize_replicates(replicates, config.error_law, failures=len(messages))
    logger.info(f"Monte Carlo finished: {R - len(messages)}/{R} replicates succeeded")
    return MonteCarloResult(replicates=replicates, summary=summary, failures=len(messages),
                            failure_messages=messages)
