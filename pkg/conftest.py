"""
conftest.py
Small shared instances: seeded locations, their graphs, hand-built graphs and
a simulated spatial dataset.
"""

import numpy as np
import pytest

from model_core import SpatialDataset
from spatial_graph import build_graph, graph_from_adjacency


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def path_adjacency(n: int) -> np.ndarray:
    A = np.zeros((n, n))
    idx = np.arange(n - 1)
    A[idx, idx + 1] = 1.0
    A[idx + 1, idx] = 1.0
    return A


def make_dataset(n: int = 80, p: int = 2, seed: int = 0, local: bool = True) -> SpatialDataset:
    """y = 1 + 0.5 z + X (1, -1) + X_1 * field(u) + noise on random unit-square sites."""
    rng = philox(seed)
    locations = rng.uniform(size=(n, 2))
    Z = np.column_stack([np.ones(n), rng.standard_normal(n)])
    X = rng.standard_normal((n, p))
    beta = np.resize([1.0, -1.0], p)
    field = np.sin(np.pi * locations[:, 0]) if local else np.zeros(n)
    field = field - field.mean()
    y = Z @ np.array([1.0, 0.5]) + X @ beta + (X[:, 0] * field if p else 0.0) + 0.3 * rng.standard_normal(n)
    return SpatialDataset(y, Z, X, locations)


@pytest.fixture
def rng():
    return philox(12345)


@pytest.fixture
def locations():
    return philox(7).uniform(size=(60, 2))


@pytest.fixture
def graph(locations):
    return build_graph(locations, k=6)


@pytest.fixture
def path_graph():
    return graph_from_adjacency(path_adjacency(5))


@pytest.fixture
def two_component_graph():
    A = np.zeros((6, 6))
    A[:3, :3] = path_adjacency(3)
    A[3:, 3:] = path_adjacency(3) * 2.0
    return graph_from_adjacency(A)


@pytest.fixture
def dataset():
    return make_dataset()


@pytest.fixture
def dataset_graph(dataset):
    return build_graph(dataset.locations, k=6)
