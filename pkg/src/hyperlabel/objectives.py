"""Memory banks and the training loss stack.

Two memories back the losses: a per-record instance memory scored by a
listwise smoothed-average-precision loss, and camera-aware prototypes (one
unit vector per cluster/camera cell) scored by a soft-label-weighted
intra-camera cross entropy plus an inter-camera contrastive term.  Memory
rows are constants for gradient purposes; every loss returns its analytic
gradient with respect to the in-batch query features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import NOISE, Dataset, LabelMatrix
from .errors import ConfigError
from .similarity import row_values

logger = logging.getLogger(__name__)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ConfigError("cannot normalize a zero vector")
    return v / n


@dataclass
class InstanceMemory:
    """One unit-norm feature row per record, overwritten on update."""

    features: np.ndarray  # (n, d)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64).copy()

    def __len__(self) -> int:
        return self.features.shape[0]

    def update(self, index: int, feature: np.ndarray) -> None:
        self.features[index] = _unit(np.asarray(feature, dtype=np.float64))


class CameraPrototypeMemory:
    """Unit prototypes per (cluster, camera) cell with momentum updates."""

    def __init__(self, momentum: float = 0.2, temperature: float = 0.07):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0, 1), got {momentum}")
        if temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        self.momentum = momentum
        self.temperature = temperature
        self.matrix = np.zeros((0, 0), dtype=np.float64)
        self.cluster_ids = np.zeros(0, dtype=np.int64)
        self.camera_ids = np.zeros(0, dtype=np.int64)
        self._row_of: dict[tuple[int, int], int] = {}
        self._camera_rows: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def _freeze_lookup(self) -> None:
        self._camera_rows = {
            int(c): np.flatnonzero(self.camera_ids == c) for c in np.unique(self.camera_ids)
        }

    @classmethod
    def from_cells(
        cls,
        cells: dict[tuple[int, int], np.ndarray],
        momentum: float,
        temperature: float,
    ) -> "CameraPrototypeMemory":
        mem = cls(momentum=momentum, temperature=temperature)
        keys = sorted(cells)
        mem.matrix = np.stack([cells[k] for k in keys]) if keys else np.zeros((0, 0))
        mem.cluster_ids = np.array([k[0] for k in keys], dtype=np.int64)
        mem.camera_ids = np.array([k[1] for k in keys], dtype=np.int64)
        mem._row_of = {k: i for i, k in enumerate(keys)}
        mem._freeze_lookup()
        return mem

    def has(self, cluster: int, camera: int) -> bool:
        return (cluster, camera) in self._row_of

    def get(self, cluster: int, camera: int) -> np.ndarray:
        return self.matrix[self._row_of[(cluster, camera)]]

    def camera_rows(self, camera: int) -> np.ndarray:
        """Prototype row indices belonging to one camera."""
        return self._camera_rows.get(camera, np.zeros(0, dtype=np.int64))

    def update(self, cluster: int, camera: int, feature: np.ndarray) -> None:
        """p <- normalize((1 - m) * p + m * f)."""
        row = self._row_of.get((cluster, camera))
        if row is None:
            logger.debug("no prototype for cell (%d, %d); update skipped", cluster, camera)
            return
        blended = (1.0 - self.momentum) * self.matrix[row] + self.momentum * np.asarray(
            feature, dtype=np.float64
        )
        self.matrix[row] = _unit(blended)


def init_memories(
    features: np.ndarray,
    labels: LabelMatrix,
    dataset: Dataset,
    momentum: float = 0.2,
    temperature: float = 0.07,
) -> tuple[InstanceMemory, CameraPrototypeMemory]:
    """Fresh memories: feature copies plus normalized per-cell mean prototypes.

    Cells whose member mean is the zero vector cannot be normalized and are
    dropped with a warning.
    """
    features = np.asarray(features, dtype=np.float64)
    cells: dict[tuple[int, int], np.ndarray] = {}
    for cluster in range(labels.n_clusters):
        members = labels.cluster_members(cluster)
        for camera in np.unique(dataset.cameras[members]):
            rows = members[dataset.cameras[members] == camera]
            mean = features[rows].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                logger.warning(
                    "prototype cell (cluster=%d, camera=%d) has zero mean; dropped",
                    cluster,
                    camera,
                )
                continue
            cells[(cluster, int(camera))] = mean / norm
    return (
        InstanceMemory(features=features),
        CameraPrototypeMemory.from_cells(cells, momentum=momentum, temperature=temperature),
    )


# ---------------------------------------------------------------------------
# listwise smoothed average precision


@dataclass
class LossWeights:
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0
    lambda_instance: float = 10.0

    def __post_init__(self) -> None:
        if min(self.lambda_intra, self.lambda_inter, self.lambda_instance) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_intra == self.lambda_inter == self.lambda_instance == 0:
            raise ConfigError("at least one loss weight must be positive")


def smooth_ap(
    query_feature: np.ndarray,
    query_index: int,
    mem: InstanceMemory,
    labels: LabelMatrix,
    pool_size: int = 1000,
    variant: str = "paper",
    ap_temperature: float = 0.01,
) -> tuple[float, np.ndarray] | None:
    """Smoothed average precision of one query against the instance memory.

    The pool holds the ``pool_size`` memory rows most similar to the query
    (its own row excluded), split into positives and negatives by label
    agreement.  Returns (AP, dAP/dquery) or None when the query has no
    positives in the pool (the caller skips it).

    ``variant='paper'`` scores each candidate independently through a
    sigmoid of its raw memory similarity, so the inner sums do not depend
    on the anchored positive.  ``variant='difference'`` uses the classical
    sigmoid of pairwise score differences at temperature ``ap_temperature``.
    """
    if pool_size < 1:
        raise ConfigError("pool_size must be >= 1")
    if variant not in ("paper", "difference"):
        raise ConfigError(f"unknown smooth-AP variant '{variant}'")
    f = np.asarray(query_feature, dtype=np.float64)
    m = mem.features
    n = len(mem)

    scores = m @ f
    order = np.argsort(-scores, kind="stable")
    order = order[order != query_index][: min(pool_size, n - 1)]

    q_label = int(labels.assignments[query_index])
    if q_label == NOISE:
        return None
    pos_mask = labels.assignments[order] == q_label
    pos = order[pos_mask]
    neg = order[~pos_mask]
    if len(pos) == 0:
        return None

    if variant == "paper":
        g = 1.0 / (1.0 + np.exp(-scores[order]))
        gp = g[pos_mask]
        gn = g[~pos_mask]
        p_sum = gp.sum()
        n_sum = gn.sum()
        denom = 1.0 + p_sum + n_sum
        ap = (1.0 + p_sum) / denom
        # dAP/dG_j: positives raise the ratio, negatives dilute it
        dg = g * (1.0 - g)
        coeff = np.where(pos_mask, n_sum / denom**2, -(1.0 + p_sum) / denom**2)
        grad = (coeff * dg) @ m[order]
        return float(ap), grad

    # classical ranking variant: sigmoid of score differences
    tau = ap_temperature
    s_pool = scores[order]
    s_pos = s_pool[pos_mask]
    diff_pos = (s_pos[None, :] - s_pos[:, None]) / tau  # (P, P), row = anchor i
    diff_neg = (s_pool[~pos_mask][None, :] - s_pos[:, None]) / tau  # (P, N)
    sig_pos = 1.0 / (1.0 + np.exp(-diff_pos))
    np.fill_diagonal(sig_pos, 0.0)
    sig_neg = 1.0 / (1.0 + np.exp(-diff_neg))

    rank_pos = 1.0 + sig_pos.sum(axis=1)
    rank_all = rank_pos + sig_neg.sum(axis=1)
    ap = float(np.mean(rank_pos / rank_all))

    # d sig(s_j - s_i) / df = sig' * (M_j - M_i) / tau
    dpos = sig_pos * (1.0 - sig_pos)
    np.fill_diagonal(dpos, 0.0)
    dneg = sig_neg * (1.0 - sig_neg)
    inv = 1.0 / len(pos)
    c_pp = inv * (rank_all - rank_pos) / rank_all**2  # pos-pos sigmoids hit both ranks
    c_pn = inv * (-rank_pos) / rank_all**2  # pos-neg sigmoids hit rank_all only
    m_pos = mem.features[pos]
    m_neg = mem.features[neg]
    w_pp = c_pp[:, None] * dpos / tau
    grad = w_pp.sum(axis=0) @ m_pos - w_pp.sum(axis=1) @ m_pos
    w_pn = c_pn[:, None] * dneg / tau
    grad += w_pn.sum(axis=0) @ m_neg - w_pn.sum(axis=1) @ m_pos
    return ap, grad


def loss_instance(
    batch_features: np.ndarray,
    batch_indices: np.ndarray,
    mem: InstanceMemory,
    labels: LabelMatrix,
    pool_size: int = 1000,
    variant: str = "paper",
    ap_temperature: float = 0.01,
) -> tuple[float, np.ndarray]:
    """Mean (1 - AP) over batch queries with at least one pooled positive."""
    batch_features = np.asarray(batch_features, dtype=np.float64)
    grads = np.zeros_like(batch_features)
    total = 0.0
    hits = 0
    per_query = []
    for row, idx in enumerate(batch_indices):
        res = smooth_ap(
            batch_features[row],
            int(idx),
            mem,
            labels,
            pool_size=pool_size,
            variant=variant,
            ap_temperature=ap_temperature,
        )
        per_query.append(res)
        if res is not None:
            total += 1.0 - res[0]
            hits += 1
    if hits == 0:
        return 0.0, grads
    for row, res in enumerate(per_query):
        if res is not None:
            grads[row] = -res[1] / hits
    return total / hits, grads


# ---------------------------------------------------------------------------
# soft labels and camera-aware contrastive losses


def soft_labels(J, labels: LabelMatrix) -> np.ndarray:
    """Row-normalized mean similarity from each record to every cluster."""
    n = len(labels)
    out = np.zeros((n, labels.n_clusters), dtype=np.float64)
    for cluster in range(labels.n_clusters):
        members = labels.cluster_members(cluster)
        if isinstance(J, np.ndarray):
            out[:, cluster] = J[:, members].mean(axis=1)
        else:
            col = np.asarray(J.tocsc()[:, members].mean(axis=1)).ravel()
            out[:, cluster] = col
    totals = out.sum(axis=1, keepdims=True)
    np.divide(out, totals, out=out, where=totals > 0)
    return out


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def loss_intra(
    batch_features: np.ndarray,
    batch_indices: np.ndarray,
    batch_cameras: np.ndarray,
    prototypes: CameraPrototypeMemory,
    soft: np.ndarray,
    temperature: float | None = None,
) -> tuple[float, np.ndarray]:
    """Soft-label-weighted cross entropy over each sample's own-camera prototypes.

    The target distribution is the sample's soft label restricted to the
    clusters present under its camera, renormalized there.  Cameras with a
    single prototype contribute nothing (one-class softmax).
    """
    tau = prototypes.temperature if temperature is None else temperature
    batch_features = np.asarray(batch_features, dtype=np.float64)
    grads = np.zeros_like(batch_features)
    total = 0.0
    b = len(batch_indices)
    for row in range(b):
        cam = int(batch_cameras[row])
        rows = prototypes.camera_rows(cam)
        if len(rows) <= 1:
            continue
        p = prototypes.matrix[rows]
        target = soft[int(batch_indices[row]), prototypes.cluster_ids[rows]]
        t_sum = target.sum()
        if t_sum <= 0.0:
            continue
        target = target / t_sum
        logits = p @ batch_features[row] / tau
        shift = logits.max()
        log_probs = logits - shift - np.log(np.exp(logits - shift).sum())
        total += -(target * log_probs).sum()
        grads[row] = (np.exp(log_probs) - target) @ p / tau
    return total / b, grads / b


def loss_inter(
    batch_features: np.ndarray,
    batch_indices: np.ndarray,
    batch_cameras: np.ndarray,
    labels: LabelMatrix,
    prototypes: CameraPrototypeMemory,
    temperature: float | None = None,
    hard_negatives: int = 50,
) -> tuple[float, np.ndarray]:
    """Contrast each sample against its own cluster's other-camera prototypes.

    Positives are the sample's cluster prototypes under other cameras;
    negatives are the ``hard_negatives`` best-scoring prototypes of other
    clusters.  Samples whose cluster lives under a single camera are
    skipped.
    """
    tau = prototypes.temperature if temperature is None else temperature
    batch_features = np.asarray(batch_features, dtype=np.float64)
    grads = np.zeros_like(batch_features)
    losses = []
    contributing = []
    for row, idx in enumerate(batch_indices):
        cluster = int(labels.assignments[int(idx)])
        if cluster == NOISE:
            continue
        cam = int(batch_cameras[row])
        pos_rows = np.flatnonzero(
            (prototypes.cluster_ids == cluster) & (prototypes.camera_ids != cam)
        )
        if len(pos_rows) == 0:
            continue
        neg_candidates = np.flatnonzero(prototypes.cluster_ids != cluster)
        f = batch_features[row]
        if len(neg_candidates):
            neg_scores = prototypes.matrix[neg_candidates] @ f
            take = min(hard_negatives, len(neg_candidates))
            top = np.argsort(-neg_scores, kind="stable")[:take]
            neg_rows = neg_candidates[top]
        else:
            neg_rows = neg_candidates
        rows = np.concatenate([pos_rows, neg_rows])
        p = prototypes.matrix[rows]
        logits = p @ f / tau
        shift = logits.max()
        log_denom = shift + np.log(np.exp(logits - shift).sum())
        n_pos = len(pos_rows)
        losses.append(-(logits[:n_pos] - log_denom).mean())
        probs = _stable_softmax(logits)
        g = probs @ p / tau - p[:n_pos].mean(axis=0) / tau
        grads[row] = g
        contributing.append(row)
    if not losses:
        return 0.0, np.zeros_like(batch_features)
    scale = 1.0 / len(losses)
    out_grads = np.zeros_like(batch_features)
    for row in contributing:
        out_grads[row] = grads[row] * scale
    return float(np.mean(losses)), out_grads


def total_loss(
    batch_features: np.ndarray,
    batch_indices: np.ndarray,
    batch_cameras: np.ndarray,
    mem: InstanceMemory,
    prototypes: CameraPrototypeMemory,
    labels: LabelMatrix,
    soft: np.ndarray,
    weights: LossWeights | None = None,
    pool_size: int = 1000,
    temperature: float | None = None,
    hard_negatives: int = 50,
    variant: str = "paper",
    ap_temperature: float = 0.01,
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Weighted sum of the three losses with summed gradients."""
    weights = weights or LossWeights()
    parts: dict[str, float] = {}
    grads = np.zeros_like(np.asarray(batch_features, dtype=np.float64))
    total = 0.0

    l_intra, g_intra = (0.0, None)
    if weights.lambda_intra > 0:
        l_intra, g_intra = loss_intra(
            batch_features, batch_indices, batch_cameras, prototypes, soft, temperature
        )
        total += weights.lambda_intra * l_intra
        grads += weights.lambda_intra * g_intra
    parts["intra"] = l_intra

    l_inter = 0.0
    if weights.lambda_inter > 0:
        l_inter, g_inter = loss_inter(
            batch_features,
            batch_indices,
            batch_cameras,
            labels,
            prototypes,
            temperature,
            hard_negatives,
        )
        total += weights.lambda_inter * l_inter
        grads += weights.lambda_inter * g_inter
    parts["inter"] = l_inter

    l_inst = 0.0
    if weights.lambda_instance > 0:
        l_inst, g_inst = loss_instance(
            batch_features,
            batch_indices,
            mem,
            labels,
            pool_size=pool_size,
            variant=variant,
            ap_temperature=ap_temperature,
        )
        total += weights.lambda_instance * l_inst
        grads += weights.lambda_instance * g_inst
    parts["instance"] = l_inst

    return total, grads, parts
