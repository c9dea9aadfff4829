"""Pairwise similarity machinery.

Visual similarity is plain cosine over unit embeddings.  The k-reciprocal
Jaccard distance re-ranks it for density clustering.  Camera metadata
enters through a per-camera-pair histogram of time differences between
same-label sightings; the joint similarity fuses the visual and temporal
channels through a product of parameterized sigmoids.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .data import Dataset, LabelMatrix
from .errors import ConfigError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# helpers shared by every consumer of a similarity matrix (dense or sparse)


def _as_features(x: Dataset | np.ndarray) -> np.ndarray:
    return x.embeddings if isinstance(x, Dataset) else np.asarray(x, dtype=np.float64)


def pair_values(J, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Entries J[rows[k], cols[k]] for dense or CSR J (missing -> 0)."""
    if isinstance(J, np.ndarray):
        return J[rows, cols]
    J = J.tocsr()
    out = np.zeros(len(rows), dtype=np.float64)
    for k, (i, j) in enumerate(zip(np.asarray(rows), np.asarray(cols))):
        lo, hi = J.indptr[i], J.indptr[i + 1]
        pos = np.searchsorted(J.indices[lo:hi], j)
        if pos < hi - lo and J.indices[lo + pos] == j:
            out[k] = J.data[lo + pos]
    return out


def submatrix(J, members: np.ndarray) -> np.ndarray:
    """Dense J[members][:, members] for dense or CSR J."""
    if isinstance(J, np.ndarray):
        return J[np.ix_(members, members)]
    return np.asarray(J.tocsr()[members][:, members].todense(), dtype=np.float64)


def row_values(J, i: int, cols: np.ndarray) -> np.ndarray:
    if isinstance(J, np.ndarray):
        return J[i, cols]
    row = np.asarray(J.tocsr().getrow(i).todense()).ravel()
    return row[cols]


def offdiag_median(J) -> float:
    """Median similarity over vertex pairs materialized in J (diagonal excluded)."""
    if isinstance(J, np.ndarray):
        n = J.shape[0]
        if n < 2:
            return 0.0
        mask = ~np.eye(n, dtype=bool)
        return float(np.median(J[mask]))
    coo = J.tocoo()
    off = coo.data[coo.row != coo.col]
    return float(np.median(off)) if off.size else 0.0


# ---------------------------------------------------------------------------
# visual similarity and k-reciprocal re-ranking


def visual_similarity(data: Dataset | np.ndarray) -> np.ndarray:
    """Cosine similarity matrix of unit-norm embeddings (exactly symmetric)."""
    f = _as_features(data)
    s = f @ f.T
    s = (s + s.T) * 0.5
    np.fill_diagonal(s, 1.0)
    return s


def kreciprocal_jaccard_distance(
    data: Dataset | np.ndarray,
    k1: int = 30,
    k2: int = 6,
    lambda_rerank: float = 0.3,
) -> np.ndarray:
    """Re-ranked distance matrix in [0, 1] used as the clustering input.

    Each point's k-reciprocal neighborhood (mutual membership in the top
    ``k1`` lists, expanded through half-size reciprocal lists) is encoded
    as an exp-weighted sparse row; rows are softened by averaging over the
    ``k2`` nearest rows, compared with the Jaccard distance and blended
    with the original distance at weight ``lambda_rerank``.
    """
    f = _as_features(data)
    n = f.shape[0]
    if not (k1 > k2 >= 1):
        raise ConfigError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if k1 >= n:
        raise ConfigError(f"k1={k1} must be smaller than the number of records {n}")
    if not 0.0 <= lambda_rerank <= 1.0:
        raise ConfigError(f"lambda_rerank must lie in [0, 1], got {lambda_rerank}")

    original = 2.0 - 2.0 * visual_similarity(f)
    np.fill_diagonal(original, 0.0)
    peak = original.max()
    if peak > 0.0:
        original = original / peak

    rank = np.ascontiguousarray(np.argsort(original, axis=1, kind="stable")[:, : k1 + 1])
    half = int(np.around(k1 / 2.0))
    indptr, indices, data_ = _kernels.build_reciprocal_rows(original, rank, k1, half)
    v = sp.csr_matrix((data_, indices, indptr), shape=(n, n))

    if k2 > 1:
        # query expansion: average each row with its k2 nearest rows
        sel_rows = np.repeat(np.arange(n, dtype=np.int64), k2)
        sel_cols = rank[:, :k2].ravel()
        q = sp.csr_matrix(
            (np.full(n * k2, 1.0 / k2), (sel_rows, sel_cols)), shape=(n, n)
        )
        v = q @ v

    v.sort_indices()
    jaccard = _kernels.jaccard_from_rows(
        np.asarray(v.indptr, dtype=np.int64),
        np.asarray(v.indices, dtype=np.int64),
        np.asarray(v.data, dtype=np.float64),
        n,
    )
    final = (1.0 - lambda_rerank) * jaccard + lambda_rerank * original
    final = np.clip((final + final.T) * 0.5, 0.0, 1.0)
    np.fill_diagonal(final, 0.0)
    return final


# ---------------------------------------------------------------------------
# transition-time histogram


@dataclass
class STHistogram:
    """Per camera-pair distribution over binned same-label time differences.

    ``probs[c_i, c_j, b]`` is the probability that a same-label sighting
    pair between cameras ``c_i`` and ``c_j`` falls into time-difference bin
    ``b`` of width ``delta_t`` frames (last bin absorbs the overflow).
    """

    probs: np.ndarray  # (C, C, max_bins)
    delta_t: int
    max_bins: int = field(default=0)

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[0] != self.probs.shape[1]:
            raise ConfigError("histogram table must have shape (C, C, bins)")
        self.max_bins = self.probs.shape[2]

    @property
    def n_cameras(self) -> int:
        return self.probs.shape[0]

    def bin_of(self, dt: np.ndarray | int) -> np.ndarray | int:
        b = np.abs(dt) // self.delta_t
        return np.minimum(b, self.max_bins - 1)

    def lookup(self, cam_i, t_i, cam_j, t_j) -> np.ndarray:
        """Vectorized probability lookup for sighting pairs."""
        b = self.bin_of(np.asarray(t_i, dtype=np.int64) - np.asarray(t_j, dtype=np.int64))
        return self.probs[cam_i, cam_j, b]

    def to_json(self) -> str:
        pairs = {
            f"{i}-{j}": [float(v) for v in self.probs[i, j]]
            for i in range(self.n_cameras)
            for j in range(self.n_cameras)
        }
        return json.dumps(
            {"delta_t": int(self.delta_t), "max_bins": int(self.max_bins), "pairs": pairs},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "STHistogram":
        obj = json.loads(text)
        keys = obj["pairs"].keys()
        c = max(int(k.split("-")[0]) for k in keys) + 1
        probs = np.zeros((c, c, int(obj["max_bins"])), dtype=np.float64)
        for key, row in obj["pairs"].items():
            i, j = (int(part) for part in key.split("-"))
            probs[i, j] = row
        return cls(probs=probs, delta_t=int(obj["delta_t"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "STHistogram":
        return cls.from_json(Path(path).read_text())


def fit_st_histogram(
    dataset: Dataset,
    labels: LabelMatrix,
    delta_t: int = 100,
    max_bins: int = 200,
    smoothing_eps: float = 1e-4,
) -> STHistogram:
    """Fit the same-label time-difference histogram for every camera pair.

    Pairs sharing a (non-noise) label are counted into bins of width
    ``delta_t`` (clamped to the last bin), every bin receives
    ``smoothing_eps`` and rows are normalized to sum 1.  Camera pairs that
    never co-observe a label fall back to the uniform distribution.
    """
    if delta_t < 1:
        raise ConfigError(f"delta_t must be >= 1 frame, got {delta_t}")
    if max_bins < 1:
        raise ConfigError(f"max_bins must be >= 1, got {max_bins}")
    if len(labels) != len(dataset):
        raise ConfigError("labels and dataset disagree on the number of records")

    c = dataset.n_cameras
    counts = np.zeros((c, c, max_bins), dtype=np.float64)
    cams = dataset.cameras
    ts = dataset.timestamps
    for cluster in range(labels.n_clusters):
        members = labels.cluster_members(cluster)
        if len(members) < 2:
            continue
        mc = cams[members]
        mt = ts[members]
        iu, ju = np.triu_indices(len(members), k=1)
        bins = np.minimum(np.abs(mt[iu] - mt[ju]) // delta_t, max_bins - 1)
        np.add.at(counts, (mc[iu], mc[ju], bins), 1.0)
        np.add.at(counts, (mc[ju], mc[iu], bins), 1.0)

    totals = counts.sum(axis=2, keepdims=True)
    probs = np.empty_like(counts)
    smoothed = counts + smoothing_eps
    denom = totals + max_bins * smoothing_eps
    nonempty = (totals > 0.0) | (smoothing_eps > 0.0)
    probs = np.where(nonempty, smoothed / np.where(denom > 0, denom, 1.0), 1.0 / max_bins)
    return STHistogram(probs=probs, delta_t=int(delta_t))


def st_similarity(hist: STHistogram, record_i, record_j) -> float:
    """Spatio-temporal consistency of two sightings under a fitted histogram."""
    return float(
        hist.lookup(record_i.camera, record_i.timestamp, record_j.camera, record_j.timestamp)
    )


def st_similarity_matrix(
    hist: STHistogram, dataset: Dataset, block: int = 512
) -> np.ndarray:
    """N x N spatio-temporal similarity, computed in row blocks."""
    n = len(dataset)
    cams = dataset.cameras
    ts = dataset.timestamps
    out = np.empty((n, n), dtype=np.float64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        bins = np.minimum(
            np.abs(ts[lo:hi, None] - ts[None, :]) // hist.delta_t, hist.max_bins - 1
        )
        out[lo:hi] = hist.probs[cams[lo:hi, None], cams[None, :], bins]
    return out


# ---------------------------------------------------------------------------
# joint similarity


@dataclass
class JointSimilarityParams:
    """Shape parameters of the two fused sigmoids.

    The visual and temporal channels pass through x -> 1 / (1 + lam *
    exp(-gamma * x)) before being multiplied.  No published values exist
    for these; the defaults are centered sigmoids with moderate slope.
    """

    lambda_visual: float = 1.0
    gamma_visual: float = 5.0
    lambda_temporal: float = 2.0
    gamma_temporal: float = 5.0

    def __post_init__(self) -> None:
        if self.gamma_visual <= 0 or self.gamma_temporal <= 0:
            raise ConfigError("sigmoid slopes gamma must be positive")
        if self.lambda_visual < 0 or self.lambda_temporal < 0:
            raise ConfigError("sigmoid scales lambda must be non-negative")


def _fused_sigmoid(x: np.ndarray, lam: float, gamma: float) -> np.ndarray:
    return 1.0 / (1.0 + lam * np.exp(-gamma * x))


def joint_similarity(
    s_v: np.ndarray,
    s_st: np.ndarray,
    params: JointSimilarityParams | None = None,
    topk: int | None = None,
):
    """Fuse visual and spatio-temporal similarity into one matrix in (0, 1).

    With ``topk`` set, only the ``topk`` strongest visual neighbors per row
    (plus the diagonal) are materialized and the result is a symmetric CSR
    matrix; dense mode is exact and used everywhere at test scale.
    """
    params = params or JointSimilarityParams()
    s_v = np.asarray(s_v, dtype=np.float64)
    s_st = np.asarray(s_st, dtype=np.float64)
    if s_v.shape != s_st.shape:
        raise ConfigError(f"shape mismatch: {s_v.shape} vs {s_st.shape}")

    if topk is None:
        j = _fused_sigmoid(s_v, params.lambda_visual, params.gamma_visual)
        j *= _fused_sigmoid(s_st, params.lambda_temporal, params.gamma_temporal)
        return (j + j.T) * 0.5

    n = s_v.shape[0]
    k = min(topk, n - 1)
    if k < 1:
        rows = cols = np.arange(n)
    else:
        masked = s_v.copy()
        np.fill_diagonal(masked, -np.inf)
        cols = np.argpartition(-masked, k - 1, axis=1)[:, :k].ravel()
        rows = np.repeat(np.arange(n), k)
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
    vals = _fused_sigmoid(s_v[rows, cols], params.lambda_visual, params.gamma_visual)
    vals *= _fused_sigmoid(s_st[rows, cols], params.lambda_temporal, params.gamma_temporal)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return m.maximum(m.T)
