"""Hyperedge construction and hypergraph algebra.

Hyperedges come from three complementary strategies (global clusters,
camera-local clusters, multi-scale KNN neighborhoods).  Merged edges are
weighted by their internal similarity, encoded into a seed-similarity
incidence matrix and collapsed into the vertex adjacency
A = H W D_e^-1 H^T used by label propagation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .clustering import CameraClustering, KnnIndex
from .data import Dataset, LabelMatrix
from .errors import ConfigError
from .similarity import offdiag_median, row_values, submatrix

logger = logging.getLogger(__name__)

_SELF_LOOP = "self_loop"
_EXP_CLIP = 700.0  # keeps exp() finite; ratios, not scale, drive the adjacency


@dataclass(eq=False)
class Hyperedge:
    """A group of vertices with a designated seed (KNN center or medoid)."""

    members: np.ndarray
    seed: int
    strategy: str

    def __post_init__(self) -> None:
        self.members = np.unique(np.asarray(self.members, dtype=np.int64))
        if self.members.size == 0:
            raise ConfigError("hyperedge must have at least one member")
        if self.seed not in self.members:
            raise ConfigError(f"seed {self.seed} is not a member of its hyperedge")

    def __len__(self) -> int:
        return len(self.members)


def _medoid(members: np.ndarray, J) -> int:
    """Member with the largest summed similarity to the others (ties: lowest index)."""
    block = submatrix(J, members)
    np.fill_diagonal(block, 0.0)
    return int(members[np.argmax(block.sum(axis=1))])


def edges_from_global_clustering(labels: LabelMatrix, J) -> list[Hyperedge]:
    """One hyperedge per global cluster with two or more members."""
    edges = []
    for cluster in range(labels.n_clusters):
        members = labels.cluster_members(cluster)
        if len(members) < 2:
            continue
        edges.append(
            Hyperedge(members=members, seed=_medoid(members, J), strategy="global_cluster")
        )
    return edges


def edges_from_intra_camera_clustering(
    per_camera: list[CameraClustering], dataset: Dataset, J
) -> list[Hyperedge]:
    """Hyperedges from camera-local clusters, mapped back to global indices."""
    edges = []
    for cc in per_camera:
        for cluster in range(cc.labels.n_clusters):
            members = cc.indices[cc.labels.cluster_members(cluster)]
            if len(members) < 2:
                continue
            edges.append(
                Hyperedge(
                    members=members,
                    seed=_medoid(members, J),
                    strategy=f"camera_cluster:{cc.camera}",
                )
            )
    return edges


def edges_from_global_knn(index: KnnIndex, k_list: list[int]) -> list[Hyperedge]:
    """For every vertex and every K, the hyperedge {v} | KNN(v, K) seeded at v."""
    n = index.n_vertices
    edges = []
    for k in k_list:
        if k >= n:
            logger.warning("skipping KNN hyperedges with K=%d >= n=%d", k, n)
            continue
        if k > index.k_max:
            raise ConfigError(f"KNN index holds {index.k_max} neighbors, requested K={k}")
        for v in range(n):
            members = np.append(index.neighbors[v, :k], v)
            edges.append(Hyperedge(members=members, seed=v, strategy=f"knn:{k}"))
    return edges


def median_pair_similarity(J) -> float:
    """The sigma of the hyperedge weight kernel: median similarity over pairs."""
    sigma = offdiag_median(J)
    if sigma <= 0.0:
        logger.warning("median pair similarity is %g; falling back to sigma=1", sigma)
        sigma = 1.0
    return sigma


def weigh_hyperedges(edges: list[Hyperedge], J, sigma: float | None = None) -> np.ndarray:
    """w(e) = sum over unordered member pairs of exp((J(i,j)/sigma)^2)."""
    if sigma is None:
        sigma = median_pair_similarity(J)
    weights = np.zeros(len(edges), dtype=np.float64)
    inv_sq = 1.0 / (sigma * sigma)
    for t, edge in enumerate(edges):
        if len(edge) < 2:
            weights[t] = 1.0
            continue
        block = submatrix(J, edge.members)
        iu, ju = np.triu_indices(len(edge), k=1)
        weights[t] = np.exp(np.minimum(block[iu, ju] ** 2 * inv_sq, _EXP_CLIP)).sum()
    return weights


@dataclass
class Hypergraph:
    """Immutable incidence/degree/adjacency bundle over ``n_vertices``."""

    n_vertices: int
    edges: list[Hyperedge]
    weights: np.ndarray  # (|E|,) positive
    incidence: sp.csr_matrix  # (n, |E|)
    edge_degrees: np.ndarray  # delta(e) = column sums of incidence
    vertex_degrees: np.ndarray  # d(v) = sum_e w(e) H(v, e)
    adjacency: sp.csr_matrix = field(repr=False)  # (n, n) symmetric nonnegative

    def degree_normalized_adjacency(self, symmetric: bool) -> sp.csr_matrix:
        """D^-1/2 A D^-1/2 (symmetric) or the row-stochastic D^-1 A."""
        d = self.vertex_degrees
        if np.any(d <= 0):
            raise ConfigError("vertex degrees must be positive; build with self loops")
        if symmetric:
            inv_sqrt = 1.0 / np.sqrt(d)
            return self.adjacency.multiply(inv_sqrt[:, None]).multiply(inv_sqrt[None, :]).tocsr()
        return self.adjacency.multiply((1.0 / d)[:, None]).tocsr()


def build_incidence(edges: list[Hyperedge], weights: np.ndarray, J) -> Hypergraph:
    """Materialize incidence, degrees and adjacency from weighted hyperedges.

    H(v, e) is the joint similarity between the edge's seed and v.  Vertices
    covered by no edge receive a unit-weight self loop so every degree is
    positive and the degree-normalized operators exist.
    """
    n = J.shape[0]
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(edges):
        raise ConfigError("one weight per hyperedge required")
    if np.any(weights <= 0):
        raise ConfigError("hyperedge weights must be positive")

    edges = list(edges)
    weights = list(weights)
    covered = np.zeros(n, dtype=bool)
    for edge in edges:
        covered[edge.members] = True
    for v in np.flatnonzero(~covered):
        edges.append(Hyperedge(members=np.array([v]), seed=int(v), strategy=_SELF_LOOP))
        weights.append(1.0)
    weights = np.asarray(weights, dtype=np.float64)

    rows, cols, vals = [], [], []
    for t, edge in enumerate(edges):
        rows.append(edge.members)
        cols.append(np.full(len(edge), t, dtype=np.int64))
        if edge.strategy == _SELF_LOOP:
            vals.append(np.ones(len(edge)))
        else:
            vals.append(row_values(J, edge.seed, edge.members))
    h = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, len(edges)),
    )

    edge_degrees = np.asarray(h.sum(axis=0)).ravel()
    if np.any(edge_degrees <= 0):
        raise ConfigError("every hyperedge must have positive incidence mass")
    vertex_degrees = h @ weights

    scaled = h.multiply((weights / edge_degrees)[None, :]).tocsr()
    adjacency = (scaled @ h.T).tocsr()
    adjacency = ((adjacency + adjacency.T) * 0.5).tocsr()

    return Hypergraph(
        n_vertices=n,
        edges=edges,
        weights=weights,
        incidence=h,
        edge_degrees=edge_degrees,
        vertex_degrees=vertex_degrees,
        adjacency=adjacency,
    )


def merge(edge_lists: list[list[Hyperedge]], J, sigma: float | None = None) -> Hypergraph:
    """Concatenate edge lists (tags preserved), weigh them and build the graph.

    Single-member edges are dropped: their pair sum is empty, so their
    weight is undefined.  Vertices left uncovered get self loops downstream.
    """
    edges = [edge for lst in edge_lists for edge in lst if len(edge) >= 2]
    weights = weigh_hyperedges(edges, J, sigma=sigma)
    return build_incidence(edges, weights, J)


def edges_to_json(hg: Hypergraph) -> list[dict]:
    """Debug dump of the edge list (seed, members, weight, strategy)."""
    return [
        {
            "seed": int(edge.seed),
            "members": [int(v) for v in edge.members],
            "weight": float(w),
            "strategy": edge.strategy,
        }
        for edge, w in zip(hg.edges, hg.weights)
    ]
