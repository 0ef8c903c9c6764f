"""
spatial_graph.py
Mutual k-NN Gaussian-kernel graph over sampling locations, its symmetric
normalized Laplacian, connected components, the degree-weighted centering
projector and spectral summaries used to anchor the smoothing penalty.

Usage
-----
from spatial_graph import build_graph, project_centered
graph = build_graph(coords, k=8)              # coords: (n, 2) array
delta = project_centered(graph, delta)         # 1_C^T D delta = 0 on every component
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sparse
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree

from errors import DataError, DegenerateGraphError, ParameterError
from performance_monitor import monitor_function

logger = logging.getLogger(__name__)

DEFAULT_K = 8
DENSE_SPECTRUM_MAX_N = 2000
_ZERO_EIGENVALUE_TOL = 1e-8


class Location(NamedTuple):
    u1: float
    u2: float


@dataclass(frozen=True)
class CoordinateTransform:
    """Aspect-preserving affine map into the unit square."""
    offset: tuple[float, float]
    scale: float

    def apply(self, coords) -> np.ndarray:
        return (as_coordinates(coords) - np.asarray(self.offset)) / self.scale


@dataclass(frozen=True)
class SpatialGraph:
    n: int
    adjacency: sparse.csr_matrix
    degrees: np.ndarray
    laplacian: sparse.csr_matrix
    components: np.ndarray
    k: int
    sigma: float
    n_components: int = field(init=False)
    component_volumes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_components = int(self.components.max()) + 1 if self.n else 0
        object.__setattr__(self, "n_components", n_components)
        volumes = np.bincount(self.components, weights=self.degrees, minlength=n_components)
        object.__setattr__(self, "component_volumes", volumes)

    @property
    def n_edges(self) -> int:
        return int(sparse.triu(self.adjacency, k=1).nnz)


def as_coordinates(locations: Sequence[Location] | np.ndarray) -> np.ndarray:
    coords = np.asarray(locations, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError(f"locations must have shape (n, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise DataError("locations contain non-finite coordinates")
    return coords


def rescale_locations(locations) -> tuple[np.ndarray, CoordinateTransform]:
    """Map coordinates into [0,1]^2 with one common scale so distances keep their ratios."""
    coords = as_coordinates(locations)
    offset = coords.min(axis=0)
    scale = float((coords.max(axis=0) - offset).max())
    if scale <= 0:
        raise DegenerateGraphError("all locations coincide; cannot rescale")
    transform = CoordinateTransform(offset=(float(offset[0]), float(offset[1])), scale=scale)
    return transform.apply(coords), transform


def _normalized_laplacian(adjacency: sparse.csr_matrix, degrees: np.ndarray) -> sparse.csr_matrix:
    if np.any(degrees <= 0):
        isolated = np.flatnonzero(degrees <= 0)
        raise DegenerateGraphError(
            f"{isolated.size} node(s) have zero degree (first: {int(isolated[0])}); "
            "increase k or sigma"
        )
    inv_sqrt = sparse.diags(1.0 / np.sqrt(degrees))
    lap = sparse.identity(adjacency.shape[0], format="csr") - inv_sqrt @ adjacency @ inv_sqrt
    lap = sparse.csr_matrix(lap)
    lap.sum_duplicates()
    lap.sort_indices()
    return lap


def _assemble(adjacency, k: int, sigma: float) -> SpatialGraph:
    adjacency = sparse.csr_matrix(adjacency, dtype=float)
    adjacency.eliminate_zeros()
    adjacency.sort_indices()
    degrees = np.asarray(adjacency.sum(axis=1)).ravel()
    laplacian = _normalized_laplacian(adjacency, degrees)
    _, labels = connected_components(adjacency, directed=False)
    return SpatialGraph(
        n=adjacency.shape[0],
        adjacency=adjacency,
        degrees=degrees,
        laplacian=laplacian,
        components=labels.astype(np.int64),
        k=k,
        sigma=sigma,
    )


def graph_from_adjacency(adjacency, k: int = 0, sigma: float = float("nan")) -> SpatialGraph:
    """Wrap an explicit symmetric nonnegative adjacency matrix as a SpatialGraph."""
    adjacency = sparse.csr_matrix(adjacency, dtype=float)
    if adjacency.shape[0] != adjacency.shape[1]:
        raise DataError(f"adjacency must be square, got {adjacency.shape}")
    if adjacency.shape[0] < 2:
        raise DegenerateGraphError("a graph needs at least 2 nodes")
    if (adjacency.data < 0).any():
        raise DataError("adjacency weights must be nonnegative")
    if abs(adjacency - adjacency.T).max() > 0:
        raise DataError("adjacency must be symmetric")
    if np.any(adjacency.diagonal() != 0):
        raise DataError("adjacency must have a zero diagonal")
    return _assemble(adjacency, k, sigma)


def _coincident_pairs(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, inverse, counts = np.unique(coords, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    rows, cols = [], []
    for group in np.flatnonzero(counts > 1):
        members = np.flatnonzero(inverse == group)
        ii, jj = np.meshgrid(members, members, indexing="ij")
        off = ii != jj
        rows.append(ii[off])
        cols.append(jj[off])
    if not rows:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(rows), np.concatenate(cols)


def nearest_neighbors(coords: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbours of every point (self excluded), ties broken by node index."""
    n = coords.shape[0]
    n_query = min(n, 2 * k + 2)
    dist, idx = cKDTree(coords).query(coords, k=n_query)
    dist = np.where(idx == np.arange(n)[:, None], np.inf, dist)
    order = np.lexsort((idx, dist), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)[:, :k]
    dist = np.take_along_axis(dist, order, axis=1)[:, :k]
    return idx, dist


@monitor_function
def build_graph(locations, k: int = DEFAULT_K, sigma: float | str = "auto") -> SpatialGraph:
    """Mutual k-NN graph with Gaussian weights exp(-||u_i - u_l||^2 / sigma^2).

    An edge (i, l) is present when l is among the k nearest neighbours of i or
    i among those of l. Coincident locations are always joined by a weight-1
    edge. ``sigma="auto"`` uses the median k-NN distance.
    """
    coords = as_coordinates(locations)
    n = coords.shape[0]
    if n < 2:
        raise DegenerateGraphError(f"need at least 2 locations, got {n}")
    if int(k) != k or k <= 0:
        raise ParameterError(f"k must be a positive integer, got {k}")
    k = int(k)
    if k >= n:
        raise ParameterError(f"k must be smaller than the number of locations ({n}), got {k}")
    if np.unique(coords, axis=0).shape[0] < 2:
        raise DegenerateGraphError("fewer than 2 distinct locations")

    nbr, nbr_dist = nearest_neighbors(coords, k)
    if isinstance(sigma, str):
        if sigma != "auto":
            raise ParameterError(f"sigma must be a positive number or 'auto', got {sigma!r}")
        positive = nbr_dist[nbr_dist > 0]
        if positive.size:
            sigma = float(np.median(nbr_dist)) or float(np.median(positive))
        else:
            sigma = float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))
            logger.warning(f"All k-NN distances are zero; falling back to sigma={sigma:.4g}")
    sigma = float(sigma)
    if not (sigma > 0 and np.isfinite(sigma)):
        raise ParameterError(f"sigma must be positive and finite, got {sigma}")

    rows = np.repeat(np.arange(n), k)
    weights = np.exp(-(nbr_dist.ravel() ** 2) / sigma ** 2)
    directed = sparse.csr_matrix((weights, (rows, nbr.ravel())), shape=(n, n))
    adjacency = directed.maximum(directed.T)

    same_rows, same_cols = _coincident_pairs(coords)
    if same_rows.size:
        coincident = sparse.csr_matrix((np.ones(same_rows.size), (same_rows, same_cols)), shape=(n, n))
        adjacency = adjacency.maximum(coincident)
        logger.info(f"Joined {same_rows.size // 2} coincident location pair(s) with weight-1 edges")

    graph = _assemble(adjacency, k, sigma)
    logger.debug(
        f"Built graph: n={n}, k={k}, sigma={sigma:.4g}, edges={graph.n_edges}, "
        f"components={graph.n_components}"
    )
    return graph


def normalized_laplacian(graph: SpatialGraph) -> sparse.csr_matrix:
    """L_sym = I - D^{-1/2} A D^{-1/2}, in CSR with sorted column indices."""
    return graph.laplacian


def roughness(graph: SpatialGraph, delta: np.ndarray) -> float:
    delta = np.asarray(delta, dtype=float)
    return float(delta @ (graph.laplacian @ delta))


def project_centered(graph: SpatialGraph, v: np.ndarray) -> np.ndarray:
    """Remove the degree-weighted mean of ``v`` on every connected component."""
    v = np.asarray(v, dtype=float)
    if v.shape != (graph.n,):
        raise DataError(f"vector of shape {v.shape} does not match graph with {graph.n} nodes")
    weighted = np.bincount(graph.components, weights=graph.degrees * v, minlength=graph.n_components)
    means = weighted / graph.component_volumes
    return v - means[graph.components]


def component_means(graph: SpatialGraph, v: np.ndarray) -> np.ndarray:
    """Degree-weighted mean of ``v`` on each component (the part project_centered removes)."""
    weighted = np.bincount(graph.components, weights=graph.degrees * np.asarray(v, dtype=float),
                           minlength=graph.n_components)
    return weighted / graph.component_volumes


def orthogonal_center(graph: SpatialGraph, v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the same subspace project_centered maps into.

    Subtracts the component of ``v`` along D 1_C for every component C, so the
    result satisfies 1_C^T D v = 0 and the map is self-adjoint.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (graph.n,):
        raise DataError(f"vector of shape {v.shape} does not match graph with {graph.n} nodes")
    along = np.bincount(graph.components, weights=graph.degrees * v, minlength=graph.n_components)
    norms = np.bincount(graph.components, weights=graph.degrees ** 2, minlength=graph.n_components)
    return v - graph.degrees * (along / norms)[graph.components]


def _lanczos_nodes(laplacian: sparse.csr_matrix, steps: int, rng: np.random.Generator):
    """Ritz values and quadrature weights of one Lanczos run from a random start."""
    n = laplacian.shape[0]
    basis = np.zeros((steps + 1, n))
    alphas, betas = [], []
    q = rng.standard_normal(n)
    basis[0] = q / np.linalg.norm(q)
    for j in range(steps):
        w = laplacian @ basis[j]
        alpha = float(basis[j] @ w)
        w -= alpha * basis[j]
        if j > 0:
            w -= betas[-1] * basis[j - 1]
        # full reorthogonalization keeps the Ritz values free of ghost copies
        w -= basis[:j + 1].T @ (basis[:j + 1] @ w)
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))
        if beta < 1e-12 or j == steps - 1:
            break
        betas.append(beta)
        basis[j + 1] = w / beta
    theta, vectors = eigh_tridiagonal(np.array(alphas), np.array(betas[:len(alphas) - 1]))
    return theta, vectors[0] ** 2


def spectral_summary(graph: SpatialGraph, m: int = 50, seed: int = 0) -> dict:
    """Largest eigenvalue and median nonzero eigenvalue of L_sym.

    Exact from the dense spectrum when n <= 2000. Larger graphs take the top
    eigenvalue from ARPACK and estimate the median from Lanczos Ritz values
    with quadrature weights over ``m`` steps and a few random probes.
    """
    if graph.n <= DENSE_SPECTRUM_MAX_N:
        eigenvalues = np.linalg.eigvalsh(graph.laplacian.toarray())
        nonzero = eigenvalues[eigenvalues > _ZERO_EIGENVALUE_TOL]
        return {
            "max_eigenvalue_estimate": float(eigenvalues[-1]),
            "median_nonzero_eigenvalue_estimate": float(np.median(nonzero)) if nonzero.size else 0.0,
        }

    rng = np.random.Generator(np.random.Philox(seed))
    top = eigsh(graph.laplacian, k=1, which="LA", v0=rng.uniform(0.5, 1.5, graph.n),
                return_eigenvectors=False)
    steps = max(2, min(int(m), graph.n - 1))
    nodes, weights = [], []
    for _ in range(4):
        theta, w = _lanczos_nodes(graph.laplacian, steps, rng)
        nodes.append(theta)
        weights.append(w / 4.0)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    order = np.argsort(nodes)
    nodes, cdf = nodes[order], np.cumsum(weights[order])
    zero_mass = graph.n_components / graph.n
    level = zero_mass + (1.0 - zero_mass) / 2.0
    median = float(nodes[min(np.searchsorted(cdf, level), nodes.size - 1)])
    return {"max_eigenvalue_estimate": float(top[0]), "median_nonzero_eigenvalue_estimate": median}


def write_edge_list(graph: SpatialGraph, path: str | Path) -> None:
    upper = sparse.triu(graph.adjacency, k=1).tocoo()
    frame = pd.DataFrame({"i": upper.row, "j": upper.col, "weight": upper.data})
    frame.sort_values(["i", "j"]).to_csv(path, index=False)
