"""Pseudo-label refinement on the hypergraph.

The most central members of each cluster are pinned as reliable anchors.
Residual error diffuses over the symmetrically normalized adjacency with
the reliable rows held fixed; the corrected labels are then smoothed by a
damped row-stochastic diffusion whose fixed point blends every row with
its hypergraph neighborhood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import NOISE, LabelMatrix
from .errors import ConfigError, NumericError
from .hypergraph import Hypergraph
from .similarity import submatrix

logger = logging.getLogger(__name__)


@dataclass
class PropagationParams:
    alpha1: float = 0.99  # residual diffusion strength
    alpha2: float = 0.9  # smoothing strength
    scale: float = 1.0  # correction scale applied to the converged residual
    reliable_per_cluster: int = 4
    max_iters: int = 50
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha1 < 1.0:
            raise ConfigError(f"alpha1 must lie in (0, 1), got {self.alpha1}")
        if not 0.0 < self.alpha2 < 1.0:
            raise ConfigError(f"alpha2 must lie in (0, 1), got {self.alpha2}")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if self.reliable_per_cluster < 1:
            raise ConfigError("reliable_per_cluster must be >= 1")


def select_reliable(
    labels: LabelMatrix, J, per_cluster: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Pick each cluster's most central members as reliable anchors.

    Centrality is the summed similarity to co-cluster members; the top
    ``per_cluster`` rows (all, for smaller clusters) become one-hot rows of
    Y_r.  Noise records are never reliable.
    """
    if per_cluster < 1:
        raise ConfigError("per_cluster must be >= 1")
    n = len(labels)
    mask = np.zeros(n, dtype=bool)
    y_r = np.zeros((n, labels.n_clusters), dtype=np.float64)
    for cluster in range(labels.n_clusters):
        members = labels.cluster_members(cluster)
        block = submatrix(J, members)
        np.fill_diagonal(block, 0.0)
        centrality = block.sum(axis=1)
        # descending centrality, ties toward the lower record index
        order = np.lexsort((members, -centrality))
        chosen = members[order[:per_cluster]]
        mask[chosen] = True
        y_r[chosen, cluster] = 1.0
    return mask, y_r


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} produced non-finite values")


def propagate_residual(
    hg: Hypergraph,
    y: np.ndarray,
    y_r: np.ndarray,
    reliable_mask: np.ndarray,
    params: PropagationParams,
) -> np.ndarray:
    """Diffuse the label residual with reliable rows pinned to Y - Y_r.

    Iterates E_u <- alpha1 * [D^-1/2 A D^-1/2 E]_u until the largest entry
    change drops below ``tol`` or ``max_iters`` is hit, and returns the
    final error matrix (reliable rows bit-identical to their pinned value).
    """
    y = np.asarray(y, dtype=np.float64)
    y_r = np.asarray(y_r, dtype=np.float64)
    if y.shape != y_r.shape:
        raise ConfigError("Y and Y_r must have the same shape")
    s_norm = hg.degree_normalized_adjacency(symmetric=True)

    pinned = (y - y_r)[reliable_mask]
    e = np.zeros_like(y)
    e[reliable_mask] = pinned
    unreliable = ~reliable_mask
    for _ in range(params.max_iters):
        e_next = params.alpha1 * (s_norm @ e)
        e_next[reliable_mask] = pinned
        _check_finite(e_next, "residual propagation")
        delta = np.abs(e_next[unreliable] - e[unreliable]).max() if unreliable.any() else 0.0
        e = e_next
        if delta < params.tol:
            break
    return e


def correct_labels(y_r: np.ndarray, e_hat: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Corrected prediction Y_r + scale * E_hat."""
    if y_r.shape != e_hat.shape:
        raise ConfigError("Y_r and E_hat must have the same shape")
    return y_r + scale * e_hat


def smooth_labels(
    hg: Hypergraph,
    y_corrected: np.ndarray,
    params: PropagationParams,
    y_start: np.ndarray | None = None,
) -> tuple[np.ndarray, LabelMatrix]:
    """Damped diffusion toward the corrected labels; returns soft and hard form.

    Iterates Y <- (1 - alpha2) * Y_corrected + alpha2 * D^-1 A Y from
    Y_corrected.  The hard labels are the row argmax (ties to the lowest
    class id); rows with no positive mass become NOISE, and clusters left
    empty are compacted away.
    """
    y_c = np.asarray(y_corrected, dtype=np.float64)
    p = hg.degree_normalized_adjacency(symmetric=False)
    y = y_c.copy() if y_start is None else np.asarray(y_start, dtype=np.float64).copy()
    base = (1.0 - params.alpha2) * y_c
    for _ in range(params.max_iters):
        y_next = base + params.alpha2 * (p @ y)
        _check_finite(y_next, "label smoothing")
        delta = np.abs(y_next - y).max()
        y = y_next
        if delta < params.tol:
            break

    hard = np.argmax(y, axis=1).astype(np.int64)
    hard[y.max(axis=1) <= 0.0] = NOISE
    return y, LabelMatrix.from_assignments(hard)


def refine_labels(
    hg: Hypergraph,
    labels: LabelMatrix,
    J,
    params: PropagationParams,
) -> tuple[LabelMatrix, np.ndarray]:
    """Full anchor-correct-smooth pass over noisy cluster labels.

    Returns the refined hard labels and the converged soft matrix (columns
    follow the input cluster ids, pre-compaction).
    """
    y = labels.dense()
    mask, y_r = select_reliable(labels, J, params.reliable_per_cluster)
    e_hat = propagate_residual(hg, y, y_r, mask, params)
    y_corrected = correct_labels(y_r, e_hat, params.scale)
    y_soft, refined = smooth_labels(hg, y_corrected, params)
    return refined, y_soft
