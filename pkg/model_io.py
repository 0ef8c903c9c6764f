"""
model_io.py
CSV ingestion into a SpatialDataset, the standardization record of the varying
columns, and the versioned JSON model artifact written by ``fit`` and read by
``predict``.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import DataError, SchemaVersionError
from model_core import FitResult, ParameterState, SpatialDataset
from spatial_graph import CoordinateTransform, rescale_locations

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
INTERCEPT_COLUMN = "intercept"


class RunConfig(BaseModel):
    """Column roles and modelling options shared by the data-driven subcommands."""
    model_config = ConfigDict(frozen=True)

    subcommand: str
    input_path: Path
    response: str
    global_cols: List[str] = Field(default_factory=list)
    varying_cols: List[str]
    coords: Tuple[str, str] = ("u1", "u2")
    intercept: bool = True
    standardize: bool = True
    tau: float = Field(0.5, gt=0, lt=1)
    k: int = Field(8, gt=0)
    sigma: float | Literal["auto"] = "auto"
    solver: Literal["admm", "spg"] = "admm"
    lambda1: Optional[float] = Field(None, ge=0)
    lambda2: Optional[float] = Field(None, ge=0)
    cv: bool = False
    folds: int = Field(5, ge=2)
    grid_points: int = Field(9, ge=1)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    out: Path = Path("out")

    @model_validator(mode="after")
    def _roles_disjoint(self):
        roles = [self.response, *self.global_cols, *self.varying_cols, *self.coords]
        duplicated = sorted({name for name in roles if roles.count(name) > 1})
        if duplicated:
            raise ValueError(f"column(s) {duplicated} are assigned more than one role")
        if not self.varying_cols:
            raise ValueError("at least one varying column is required")
        if self.intercept and INTERCEPT_COLUMN in self.global_cols:
            raise ValueError(f"'{INTERCEPT_COLUMN}' is added automatically; drop it from --global-cols")
        return self


class Standardization(BaseModel):
    columns: List[str]
    means: List[float]
    scales: List[float]

    @classmethod
    def fit(cls, X: np.ndarray, columns: List[str], enabled: bool = True) -> "Standardization":
        if not enabled:
            return cls(columns=columns, means=[0.0] * len(columns), scales=[1.0] * len(columns))
        means = X.mean(axis=0)
        scales = X.std(axis=0)
        constant = [name for name, scale in zip(columns, scales) if scale == 0]
        if constant:
            raise DataError(f"varying column(s) {constant} are constant and cannot be standardized")
        return cls(columns=columns, means=means.tolist(), scales=scales.tolist())

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - np.asarray(self.means)) / np.asarray(self.scales)


def load_table(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file {path} does not exist")
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path} as CSV: {exc}")
    if frame.empty:
        raise DataError(f"{path} has no data rows")
    return frame


def numeric_columns(frame: pd.DataFrame, columns: List[str]) -> np.ndarray:
    missing = [name for name in columns if name not in frame.columns]
    if missing:
        raise DataError(f"missing column(s) {missing}; available: {list(frame.columns)}")
    out = np.empty((len(frame), len(columns)))
    for idx, name in enumerate(columns):
        values = pd.to_numeric(frame[name], errors="coerce")
        if values.isna().any():
            row = int(np.flatnonzero(values.isna().to_numpy())[0])
            raise DataError(f"column '{name}' has a missing or non-numeric cell at data row {row + 1}")
        out[:, idx] = values.to_numpy(dtype=float)
    return out


def global_design(frame: pd.DataFrame, global_cols: List[str], intercept: bool) -> np.ndarray:
    Z = numeric_columns(frame, global_cols) if global_cols else np.empty((len(frame), 0))
    if intercept:
        Z = np.column_stack([np.ones(len(frame)), Z])
    return Z


def build_dataset(frame: pd.DataFrame, config: RunConfig) -> Tuple[SpatialDataset, Standardization, CoordinateTransform]:
    """Dataset with standardized varying columns and locations rescaled into the unit square."""
    y = numeric_columns(frame, [config.response])[:, 0]
    Z = global_design(frame, config.global_cols, config.intercept)
    X_raw = numeric_columns(frame, config.varying_cols)
    coords = numeric_columns(frame, list(config.coords))
    if len(frame) < 2 * config.k:
        raise DataError(f"n={len(frame)} rows is below 2k={2 * config.k}; lower --k or supply more data")
    standardization = Standardization.fit(X_raw, list(config.varying_cols), config.standardize)
    locations, transform = rescale_locations(coords)
    dataset = SpatialDataset(y, Z, standardization.apply(X_raw), locations)
    return dataset, standardization, transform


class ModelArtifact(BaseModel):
    schema_version: int = SCHEMA_VERSION
    tau: float
    solver: str
    response: str
    global_cols: List[str]
    varying_cols: List[str]
    coords: Tuple[str, str]
    intercept: bool
    standardization: Standardization
    transform_offset: Tuple[float, float]
    transform_scale: float
    train_locations: List[Tuple[float, float]]
    alpha: List[float]
    beta_G: List[float]
    delta: List[List[float]]
    selected_local: List[bool]
    lambda1: float
    lambda2: float
    weights: Optional[List[float]] = None
    objective: float
    kkt_residual: float
    converged: bool
    iterations: int
    inference: Dict[str, Any] = Field(default_factory=dict)

    def state(self) -> ParameterState:
        return ParameterState(np.asarray(self.alpha), np.asarray(self.beta_G),
                              np.asarray(self.delta, dtype=float).reshape(len(self.beta_G), -1))

    def transform(self) -> CoordinateTransform:
        return CoordinateTransform(offset=self.transform_offset, scale=self.transform_scale)

    @classmethod
    def from_fit(cls, fit: FitResult, dataset: SpatialDataset, config: RunConfig,
                 standardization: Standardization, transform: CoordinateTransform,
                 inference: Optional[Dict[str, Any]] = None) -> "ModelArtifact":
        state = fit.state
        return cls(
            tau=fit.penalty.tau,
            solver=fit.solver,
            response=config.response,
            global_cols=list(config.global_cols),
            varying_cols=list(config.varying_cols),
            coords=config.coords,
            intercept=config.intercept,
            standardization=standardization,
            transform_offset=transform.offset,
            transform_scale=transform.scale,
            train_locations=[(float(a), float(b)) for a, b in dataset.locations],
            alpha=state.alpha.tolist(),
            beta_G=state.beta_G.tolist(),
            delta=state.delta.tolist(),
            selected_local=[bool(flag) for flag in fit.selected_local],
            lambda1=fit.penalty.lambda1,
            lambda2=fit.penalty.lambda2,
            weights=fit.penalty.weights,
            objective=float(fit.objective),
            kkt_residual=float(fit.kkt_residual),
            converged=bool(fit.converged),
            iterations=int(fit.iterations),
            inference=inference or {},
        )


def write_artifact(artifact: ModelArtifact, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(artifact.model_dump_json(indent=2), encoding="utf-8")


def read_artifact(path: str | Path) -> ModelArtifact:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file {path} does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}")
    version = raw.get("schema_version") if isinstance(raw, dict) else None
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"model file {path} has schema_version={version!r}, expected {SCHEMA_VERSION}")
    try:
        return ModelArtifact.model_validate(raw)
    except ValidationError as exc:
        raise DataError(f"model file {path} does not match the artifact schema: {exc}")


def new_site_design(frame: pd.DataFrame, global_cols: List[str], intercept: bool, varying_cols: List[str],
                    coords: Tuple[str, str], standardization: Standardization,
                    transform: CoordinateTransform) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Z, standardized X, rescaled locations) of new rows, using the training transforms."""
    Z = global_design(frame, global_cols, intercept)
    X = standardization.apply(numeric_columns(frame, varying_cols))
    locations = transform.apply(numeric_columns(frame, list(coords)))
    return Z, X, locations


def prediction_design(frame: pd.DataFrame, artifact: ModelArtifact) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return new_site_design(frame, artifact.global_cols, artifact.intercept, artifact.varying_cols,
                           artifact.coords, artifact.standardization, artifact.transform())


def site_table(dataset: SpatialDataset, fit: FitResult, transform: CoordinateTransform,
               config: RunConfig, residual: np.ndarray) -> pd.DataFrame:
    """Per-site deviations, total effects and residuals on the original coordinate scale."""
    original = dataset.locations * transform.scale + np.asarray(transform.offset)
    frame = pd.DataFrame({config.coords[0]: original[:, 0], config.coords[1]: original[:, 1]})
    for j, name in enumerate(config.varying_cols):
        frame[f"delta_{name}"] = fit.state.delta[j]
        frame[f"total_{name}"] = fit.state.beta_G[j] + fit.state.delta[j]
    frame["residual"] = residual
    return frame


def write_frame(frame: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8")
