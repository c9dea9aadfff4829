"""Pure numpy implementations of the hot kernels.

These mirror ``_native.pyx`` exactly; the two backends must produce the
same results (bit-identical integer outputs, float outputs equal up to
summation order).
"""

from __future__ import annotations

from collections import deque

import numpy as np


def build_reciprocal_rows(
    dist: np.ndarray, rank: np.ndarray, k1: int, half: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expanded k-reciprocal neighbor rows with exp(-distance) weights.

    ``rank`` holds, per row, the indices of the ``k1 + 1`` smallest
    distances in ascending order (self included); ``half`` is the size of
    the secondary reciprocal lists used for expansion.  Returns a CSR
    triple (indptr, indices, data) whose rows are normalized to sum 1 and
    whose column indices are sorted.
    """
    n = dist.shape[0]

    fwd = rank[:, : k1 + 1]
    fwd_half = rank[:, : half + 1]

    indptr = np.zeros(n + 1, dtype=np.int64)
    all_indices: list[np.ndarray] = []
    all_data: list[np.ndarray] = []
    for i in range(n):
        forward = fwd[i]
        # mutual check: keep j whose own forward list contains i
        mutual = forward[np.any(fwd[forward] == i, axis=1)]
        expansion = mutual
        for cand in mutual:
            cand_forward = fwd_half[cand]
            cand_mutual = cand_forward[np.any(fwd_half[cand_forward] == cand, axis=1)]
            overlap = np.intersect1d(cand_mutual, mutual, assume_unique=False)
            if len(overlap) * 3 > 2 * len(cand_mutual):
                expansion = np.append(expansion, cand_mutual)
        cols = np.unique(expansion)
        weights = np.exp(-dist[i, cols])
        weights /= weights.sum()
        all_indices.append(cols.astype(np.int64))
        all_data.append(weights)
        indptr[i + 1] = indptr[i] + len(cols)

    return indptr, np.concatenate(all_indices), np.concatenate(all_data)


def jaccard_from_rows(
    indptr: np.ndarray, indices: np.ndarray, data: np.ndarray, n: int
) -> np.ndarray:
    """Jaccard distance between sparse rows that each sum to 1.

    dist(i, j) = 1 - m / (2 - m) with m = sum_k min(row_i[k], row_j[k]);
    the denominator uses sum_k max = 2 - m because rows are normalized.
    """
    # inverted index: for each column, the rows holding it and their values
    order = np.argsort(indices, kind="stable")
    col_sorted = indices[order]
    row_of = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))[order]
    val_sorted = data[order]
    col_ptr = np.searchsorted(col_sorted, np.arange(n + 1))

    out = np.empty((n, n), dtype=np.float64)
    min_sum = np.zeros(n, dtype=np.float64)
    for i in range(n):
        min_sum[:] = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            col = indices[p]
            v = data[p]
            lo, hi = col_ptr[col], col_ptr[col + 1]
            rows = row_of[lo:hi]
            vals = val_sorted[lo:hi]
            np.add.at(min_sum, rows, np.minimum(v, vals))
        out[i] = 1.0 - min_sum / (2.0 - min_sum)
    return out


def dbscan_labels(indptr: np.ndarray, indices: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Deterministic DBSCAN expansion over precomputed eps-neighborhoods.

    ``indices`` rows list each point's neighbors (self excluded) in
    ascending order.  Clusters grow from the smallest-index unvisited core
    point; border points join the cluster of their smallest-index core
    neighbor; the rest stay at -1.
    """
    n = len(indptr) - 1
    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for start in range(n):
        if not core[start] or labels[start] != -1:
            continue
        labels[start] = next_label
        queue = deque([start])
        while queue:
            p = queue.popleft()
            for q in indices[indptr[p] : indptr[p + 1]]:
                if core[q] and labels[q] == -1:
                    labels[q] = next_label
                    queue.append(q)
        next_label += 1

    for i in range(n):
        if core[i]:
            continue
        for q in indices[indptr[i] : indptr[i + 1]]:
            if core[q]:
                labels[i] = labels[q]
                break
    return labels
