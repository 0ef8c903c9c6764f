"""
Tests for CSV ingestion, run configuration and the JSON model artifact.
"""

import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from errors import DataError, SchemaVersionError
from model_core import FitResult, ParameterState, PenaltyConfig
from model_io import (
    ModelArtifact,
    RunConfig,
    Standardization,
    build_dataset,
    load_table,
    numeric_columns,
    read_artifact,
    write_artifact,
)


def _config(**overrides):
    values = dict(subcommand="fit", input_path="data.csv", response="y",
                  global_cols=["z1"], varying_cols=["x1", "x2"], k=4)
    values.update(overrides)
    return RunConfig(**values)


def _frame(n=20, seed=0):
    rng = np.random.Generator(np.random.Philox(seed))
    return pd.DataFrame({
        "y": rng.standard_normal(n),
        "z1": rng.standard_normal(n),
        "x1": rng.standard_normal(n),
        "x2": rng.uniform(size=n),
        "u1": rng.uniform(0, 10, size=n),
        "u2": rng.uniform(0, 5, size=n),
    })


class TestRunConfig:
    def test_duplicate_roles_rejected(self):
        with pytest.raises(ValidationError):
            _config(varying_cols=["x1", "z1"])

    def test_intercept_name_reserved(self):
        with pytest.raises(ValidationError):
            _config(global_cols=["intercept"])
        assert _config(global_cols=["intercept"], intercept=False).global_cols == ["intercept"]

    @pytest.mark.parametrize("tau", [0.0, 1.0, 1.5])
    def test_tau_range(self, tau):
        with pytest.raises(ValidationError):
            _config(tau=tau)

    def test_varying_required(self):
        with pytest.raises(ValidationError):
            _config(varying_cols=[])


class TestTables:
    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_table(tmp_path / "absent.csv")

    def test_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("y,x1,u1,u2\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_table(path)

    def test_non_numeric_cell_reports_row(self):
        frame = pd.DataFrame({"a": ["1.0", "2.5", "oops"]})
        with pytest.raises(DataError, match="row 3"):
            numeric_columns(frame, ["a"])

    def test_missing_column(self):
        with pytest.raises(DataError, match="missing"):
            numeric_columns(pd.DataFrame({"a": [1.0]}), ["b"])


class TestStandardization:
    def test_zero_mean_unit_scale(self):
        X = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 60.0]])
        record = Standardization.fit(X, ["a", "b"])
        scaled = record.apply(X)
        assert_allclose(scaled.mean(axis=0), 0.0, atol=1e-12)
        assert_allclose(scaled.std(axis=0), 1.0)

    def test_constant_column(self):
        with pytest.raises(DataError, match="constant"):
            Standardization.fit(np.array([[1.0, 2.0], [1.0, 3.0]]), ["a", "b"])

    def test_disabled_is_identity(self):
        X = np.array([[1.0], [1.0]])
        assert_allclose(Standardization.fit(X, ["a"], enabled=False).apply(X), X)


class TestBuildDataset:
    def test_design_and_locations(self):
        frame = _frame()
        dataset, standardization, transform = build_dataset(frame, _config())
        assert dataset.Z.shape == (20, 2)
        assert_allclose(dataset.Z[:, 0], 1.0)
        assert_allclose(dataset.X.mean(axis=0), 0.0, atol=1e-12)
        assert dataset.locations.min() >= 0 and dataset.locations.max() <= 1 + 1e-12
        restored = dataset.locations * transform.scale + np.asarray(transform.offset)
        assert_allclose(restored, frame[["u1", "u2"]].to_numpy())
        assert standardization.columns == ["x1", "x2"]

    def test_too_few_rows_for_k(self):
        with pytest.raises(DataError, match="2k"):
            build_dataset(_frame(n=7), _config())


class TestArtifact:
    def _artifact(self):
        dataset, standardization, transform = build_dataset(_frame(), _config())
        state = ParameterState.zeros(dataset.q, dataset.p, dataset.n)
        state.delta[0, :2] = [0.5, -0.5]
        fit = FitResult(state=state, converged=True, iterations=3, objective=1.25, kkt_residual=1e-5,
                        selected_local=np.array([True, False]), solver="admm",
                        penalty=PenaltyConfig(tau=0.5, lambda1=0.1, lambda2=0.2, weights=[1.0, 2.0]))
        return ModelArtifact.from_fit(fit, dataset, _config(), standardization, transform)

    def test_round_trip(self, tmp_path):
        artifact = self._artifact()
        path = tmp_path / "nested" / "model.json"
        write_artifact(artifact, path)
        loaded = read_artifact(path)
        assert loaded.model_dump() == artifact.model_dump()
        assert_allclose(loaded.state().delta, artifact.state().delta)
        assert loaded.transform() == artifact.transform()

    def test_schema_version_mismatch(self, tmp_path):
        path = tmp_path / "model.json"
        raw = json.loads(self._artifact().model_dump_json())
        raw["schema_version"] = 99
        path.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(SchemaVersionError):
            read_artifact(path)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(DataError):
            read_artifact(path)
