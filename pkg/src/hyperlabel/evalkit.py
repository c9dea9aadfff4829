"""Retrieval and clustering metrics.

Exact (non-smoothed) average precision and CMC over a query/gallery
protocol with the standard cross-camera filter, the joint-similarity
query-time rescoring, and pairwise precision/recall/F1 of pseudo labels
against ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import NOISE, Dataset, LabelMatrix
from .errors import ConfigError
from .similarity import JointSimilarityParams, STHistogram, _fused_sigmoid

logger = logging.getLogger(__name__)


@dataclass
class RetrievalProtocol:
    """Disjoint query and gallery index sets plus the cross-camera filter flag.

    With ``cross_camera`` on, gallery entries sharing both camera and
    identity with the query are dropped from that query's ranking, per the
    standard benchmark protocol.
    """

    query_indices: np.ndarray
    gallery_indices: np.ndarray
    cross_camera: bool = True

    def __post_init__(self) -> None:
        self.query_indices = np.asarray(self.query_indices, dtype=np.int64)
        self.gallery_indices = np.asarray(self.gallery_indices, dtype=np.int64)
        if np.intersect1d(self.query_indices, self.gallery_indices).size:
            raise ConfigError("query and gallery sets must be disjoint")


def make_default_protocol(dataset: Dataset, cross_camera: bool = True) -> RetrievalProtocol:
    """First sighting of every (identity, camera) cell queries the rest."""
    if dataset.ground_truth is None:
        raise ConfigError("a retrieval protocol needs ground-truth identities")
    seen: set[tuple[int, int]] = set()
    queries = []
    for i in range(len(dataset)):
        key = (int(dataset.ground_truth[i]), int(dataset.cameras[i]))
        if key not in seen:
            seen.add(key)
            queries.append(i)
    queries = np.asarray(queries, dtype=np.int64)
    gallery = np.setdiff1d(np.arange(len(dataset)), queries)
    return RetrievalProtocol(queries, gallery, cross_camera=cross_camera)


def _ranking_metrics(
    scores: np.ndarray,
    q_ids: np.ndarray,
    g_ids: np.ndarray,
    q_cams: np.ndarray,
    g_cams: np.ndarray,
    gallery_order_key: np.ndarray,
    cross_camera: bool,
    max_rank: int = 10,
) -> dict[str, float]:
    n_q = scores.shape[0]
    aps = []
    cmc_hits = np.zeros(max_rank, dtype=np.float64)
    for qi in range(n_q):
        keep = np.ones(scores.shape[1], dtype=bool)
        if cross_camera:
            keep &= ~((g_ids == q_ids[qi]) & (g_cams == q_cams[qi]))
        rel = (g_ids == q_ids[qi]) & keep
        if not rel.any():
            logger.warning("query %d has no valid positives; excluded", qi)
            continue
        cols = np.flatnonzero(keep)
        # descending score, ties toward the lower gallery index
        order = cols[np.lexsort((gallery_order_key[cols], -scores[qi, cols]))]
        hits = rel[order]
        ranks = np.flatnonzero(hits)
        precision_at = (np.arange(len(ranks)) + 1.0) / (ranks + 1.0)
        aps.append(precision_at.mean())
        first = ranks[0]
        if first < max_rank:
            cmc_hits[first:] += 1.0
    if not aps:
        raise ConfigError("no query had a valid positive in the gallery")
    n_valid = len(aps)
    cmc = cmc_hits / n_valid
    return {
        "mAP": float(np.mean(aps)),
        "R1": float(cmc[0]),
        "R5": float(cmc[4]) if max_rank >= 5 else float("nan"),
        "R10": float(cmc[9]) if max_rank >= 10 else float("nan"),
        "n_valid_queries": float(n_valid),
    }


def evaluate(
    features_or_scores: np.ndarray,
    protocol: RetrievalProtocol,
    identities: np.ndarray,
    cameras: np.ndarray,
) -> dict[str, float]:
    """mAP and CMC Rank-1/5/10 under the protocol.

    ``features_or_scores`` is either a full (n, d) feature matrix (scored
    by inner product) or a precomputed (n_query, n_gallery) score matrix.
    """
    q = protocol.query_indices
    g = protocol.gallery_indices
    if len(g) == 0:
        raise ConfigError("gallery is empty")
    x = np.asarray(features_or_scores, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == len(identities):
        scores = x[q] @ x[g].T
    elif x.shape == (len(q), len(g)):
        scores = x
    else:
        raise ConfigError(
            f"expected (n, d) features or ({len(q)}, {len(g)}) scores, got {x.shape}"
        )
    identities = np.asarray(identities)
    cameras = np.asarray(cameras)
    return _ranking_metrics(
        scores,
        identities[q],
        identities[g],
        cameras[q],
        cameras[g],
        gallery_order_key=g,
        cross_camera=protocol.cross_camera,
    )


def rescore_joint(
    s_v_query_gallery: np.ndarray,
    hist: STHistogram,
    query_cameras: np.ndarray,
    query_timestamps: np.ndarray,
    gallery_cameras: np.ndarray,
    gallery_timestamps: np.ndarray,
    params: JointSimilarityParams | None = None,
) -> np.ndarray:
    """Fuse query-gallery visual scores with the fitted transition histogram."""
    params = params or JointSimilarityParams()
    s_v = np.asarray(s_v_query_gallery, dtype=np.float64)
    if s_v.shape != (len(query_cameras), len(gallery_cameras)):
        raise ConfigError("visual score matrix shape does not match the metadata")
    s_st = hist.lookup(
        np.asarray(query_cameras)[:, None],
        np.asarray(query_timestamps)[:, None],
        np.asarray(gallery_cameras)[None, :],
        np.asarray(gallery_timestamps)[None, :],
    )
    joint = _fused_sigmoid(s_v, params.lambda_visual, params.gamma_visual)
    joint *= _fused_sigmoid(s_st, params.lambda_temporal, params.gamma_temporal)
    return joint


def pairwise_f1(
    predicted: LabelMatrix | np.ndarray, truth: np.ndarray
) -> dict[str, float]:
    """Pairwise precision/recall/F1 of a clustering against identity labels.

    A pair counts as predicted-same only when both records share a
    non-noise cluster id, so noise records act as singletons.
    """
    pred = (
        predicted.assignments if isinstance(predicted, LabelMatrix) else np.asarray(predicted)
    )
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ConfigError("prediction and truth must have the same length")
    if truth.size == 0:
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0, "n_clusters": 0.0, "n_noise": 0.0}

    def same_pairs(labels: np.ndarray, ignore_noise: bool) -> float:
        vals, counts = np.unique(labels, return_counts=True)
        if ignore_noise:
            counts = counts[vals != NOISE]
        return float((counts * (counts - 1) // 2).sum())

    pred_pairs = same_pairs(pred, ignore_noise=True)
    true_pairs = same_pairs(truth, ignore_noise=False)

    ok = pred != NOISE
    both = pred[ok].astype(np.int64) * (truth.max() + 1) + truth[ok]
    _, joint_counts = np.unique(both, return_counts=True)
    tp = float((joint_counts * (joint_counts - 1) // 2).sum())

    precision = tp / pred_pairs if pred_pairs else 0.0
    recall = tp / true_pairs if true_pairs else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    n_clusters = int(np.unique(pred[ok]).size)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "n_clusters": float(n_clusters),
        "n_noise": float((~ok).sum()),
    }
