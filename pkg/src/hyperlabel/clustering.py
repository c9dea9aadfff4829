"""Density clustering and exact nearest-neighbor search.

DBSCAN here is fully deterministic: clusters grow from the smallest-index
unvisited core point and border points always join their smallest-index
core neighbor, so repeated runs and the brute-force reference agree
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import Dataset, LabelMatrix
from .errors import ConfigError

NOISE = -1


@dataclass
class DbscanParams:
    eps: float = 0.6
    min_samples: int = 4

    def __post_init__(self) -> None:
        if not 0.0 < self.eps:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.min_samples < 1:
            raise ConfigError(f"min_samples must be >= 1, got {self.min_samples}")


def _eps_neighborhoods(distance: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mask = distance <= eps
    np.fill_diagonal(mask, False)
    rows, cols = np.nonzero(mask)
    counts = np.bincount(rows, minlength=distance.shape[0])
    indptr = np.zeros(distance.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, cols.astype(np.int64)


def dbscan(distance: np.ndarray, params: DbscanParams) -> LabelMatrix:
    """Cluster a square distance matrix with standard DBSCAN semantics.

    Core points have at least ``min_samples`` neighbors within ``eps``
    (counting themselves); clusters are density-connected core components
    plus adjacent border points; everything else is NOISE.
    """
    distance = np.asarray(distance)
    if distance.ndim != 2 or distance.shape[0] != distance.shape[1]:
        raise ConfigError("distance must be a square matrix")
    if distance.shape[0] and np.abs(np.diagonal(distance)).max() > 1e-9:
        raise ConfigError("distance matrix must have a zero diagonal")

    indptr, indices = _eps_neighborhoods(distance, params.eps)
    core = (np.diff(indptr) + 1 >= params.min_samples).astype(np.uint8)
    labels = _kernels.dbscan_labels(indptr, indices, core)
    n_clusters = int(labels.max()) + 1 if labels.size else 0
    return LabelMatrix(labels, n_clusters)


@dataclass
class CameraClustering:
    """DBSCAN result for one camera's records (camera-local cluster ids)."""

    camera: int
    indices: np.ndarray  # global record indices of this camera
    labels: LabelMatrix


def dbscan_per_camera(
    distance: np.ndarray, dataset: Dataset, params: DbscanParams
) -> list[CameraClustering]:
    """Run DBSCAN restricted to each camera's records."""
    out = []
    for camera in range(dataset.n_cameras):
        idx = np.flatnonzero(dataset.cameras == camera)
        sub = distance[np.ix_(idx, idx)]
        out.append(CameraClustering(camera=camera, indices=idx, labels=dbscan(sub, params)))
    return out


@dataclass
class KnnIndex:
    """Per-vertex neighbor lists sorted by descending similarity.

    Ties break toward the smaller index; the vertex itself is excluded.
    """

    neighbors: np.ndarray  # (n, k_max) int64

    @property
    def n_vertices(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k_max(self) -> int:
        return self.neighbors.shape[1]


def build_knn_index(s_v: np.ndarray, k_max: int) -> KnnIndex:
    n = s_v.shape[0]
    if not 1 <= k_max < n:
        raise ConfigError(f"k_max must lie in [1, {n}), got {k_max}")
    masked = np.array(s_v, dtype=np.float64)
    np.fill_diagonal(masked, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")
    return KnnIndex(neighbors=order[:, :k_max].astype(np.int64))


def knn(source: KnnIndex | np.ndarray, vertex: int, k: int) -> np.ndarray:
    """The k most similar neighbors of ``vertex`` (self excluded)."""
    if isinstance(source, KnnIndex):
        if k > source.k_max:
            raise ConfigError(f"index holds {source.k_max} neighbors, requested {k}")
        if k >= source.n_vertices:
            raise ConfigError(f"k={k} must be smaller than n={source.n_vertices}")
        return source.neighbors[vertex, :k].copy()
    n = source.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"k must lie in [1, {n}), got {k}")
    return build_knn_index(source, k).neighbors[vertex].copy()
