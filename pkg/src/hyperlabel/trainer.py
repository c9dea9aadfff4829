"""The outer training loop over precomputed embeddings.

Each epoch regenerates pseudo labels (re-ranked clustering, transition
histogram, joint similarity, merged hypergraph, anchor-correct-smooth
refinement), rebuilds both memories, and runs an inner loop of
class-balanced mini-batches minimizing the weighted loss stack with a
moment-based adaptive optimizer.  The trainable model is a linear adapter
with unit-norm outputs, initialized near the identity so epoch 0 scores
the raw embeddings.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clustering, evalkit, hypergraph, objectives, propagation, similarity
from .config import RunConfig
from .data import Dataset, LabelMatrix
from .errors import ConfigError, HyperlabelError, MalformedHeader, NumericError
from .similarity import STHistogram

logger = logging.getLogger(__name__)


class DegenerateClustering(HyperlabelError):
    """Clustering found no clusters; the epoch falls back to previous labels."""

ADAPTER_MAGIC = b"HLAD"
_ADAPTER_HEADER = struct.Struct("<4sIII")


@dataclass
class Adapter:
    """Linear map with L2-normalized outputs: f(x) = unit(x @ W + b)."""

    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)

    @classmethod
    def near_identity(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Adapter":
        w = np.eye(d_in, d_out) + 1e-3 * rng.standard_normal((d_in, d_out))
        return cls(weight=w, bias=np.zeros(d_out))

    def transform(self, x: np.ndarray) -> np.ndarray:
        u = x @ self.weight + self.bias
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise NumericError("adapter produced a zero vector")
        return u / norms

    def backward(self, x: np.ndarray, grad_output: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of a scalar loss w.r.t. weight and bias.

        ``grad_output`` is the loss gradient at the unit-norm outputs; the
        normalization backward projects it onto the sphere's tangent space.
        """
        u = x @ self.weight + self.bias
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        y = u / norms
        g_u = (grad_output - (grad_output * y).sum(axis=1, keepdims=True) * y) / norms
        return x.T @ g_u, g_u.sum(axis=0)

    def save(self, path: str | Path) -> None:
        w = np.ascontiguousarray(self.weight, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32)
        with open(path, "wb") as fh:
            fh.write(_ADAPTER_HEADER.pack(ADAPTER_MAGIC, w.shape[0], w.shape[1], 0))
            fh.write(w.tobytes(order="C"))
            fh.write(b.tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "Adapter":
        with open(path, "rb") as fh:
            header = fh.read(_ADAPTER_HEADER.size)
            if len(header) < _ADAPTER_HEADER.size:
                raise MalformedHeader(f"{path}: truncated header")
            magic, d_in, d_out, _ = _ADAPTER_HEADER.unpack(header)
            if magic != ADAPTER_MAGIC:
                raise MalformedHeader(f"{path}: bad magic {magic!r}")
            payload = fh.read()
        expected = (d_in * d_out + d_out) * 4
        if len(payload) != expected:
            raise MalformedHeader(f"{path}: expected {expected} payload bytes")
        w = np.frombuffer(payload[: d_in * d_out * 4], dtype="<f4").reshape(d_in, d_out)
        b = np.frombuffer(payload[d_in * d_out * 4 :], dtype="<f4")
        return cls(weight=w.astype(np.float64), bias=b.astype(np.float64))


class AdamW:
    """Adaptive moment optimizer with decoupled weight decay."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)


# ---------------------------------------------------------------------------
# per-epoch label generation


@dataclass
class LabelGenResult:
    raw_labels: LabelMatrix
    refined_labels: LabelMatrix
    soft_assignment: np.ndarray  # per-record soft scores over refined clusters
    histogram: STHistogram
    joint: np.ndarray | object = field(repr=False)


def generate_labels(
    dataset: Dataset, features: np.ndarray, cfg: RunConfig
) -> LabelGenResult:
    """Noisy clustering plus hypergraph refinement for the current features."""
    sim = cfg.similarity
    s_v = similarity.visual_similarity(features)
    dist = similarity.kreciprocal_jaccard_distance(
        features, k1=sim.k1, k2=sim.k2, lambda_rerank=sim.lambda_rerank
    )
    params = clustering.DbscanParams(eps=cfg.dbscan.eps, min_samples=cfg.dbscan.min_samples)
    raw = clustering.dbscan(dist, params)
    if raw.n_clusters == 0:
        raise DegenerateClustering("clustering produced no clusters")

    hist = similarity.fit_st_histogram(
        dataset,
        raw,
        delta_t=sim.delta_t,
        max_bins=sim.max_bins,
        smoothing_eps=sim.smoothing_eps,
    )
    s_st = similarity.st_similarity_matrix(hist, dataset)
    joint = similarity.joint_similarity(s_v, s_st, sim.joint_params(), topk=sim.sparse_topk)

    per_camera = clustering.dbscan_per_camera(dist, dataset, params)
    k_list = [k for k in cfg.knn.k_list if k < len(dataset)]
    index = clustering.build_knn_index(s_v, max(k_list)) if k_list else None
    edge_lists = [
        hypergraph.edges_from_global_clustering(raw, joint),
        hypergraph.edges_from_intra_camera_clustering(per_camera, dataset, joint),
    ]
    if index is not None:
        edge_lists.append(hypergraph.edges_from_global_knn(index, k_list))
    hg = hypergraph.merge(edge_lists, joint)

    refined, _ = propagation.refine_labels(hg, raw, joint, cfg.propagation.params())
    soft = objectives.soft_labels(joint, refined) if refined.n_clusters else np.zeros((len(dataset), 0))
    return LabelGenResult(
        raw_labels=raw,
        refined_labels=refined,
        soft_assignment=soft,
        histogram=hist,
        joint=joint,
    )


# ---------------------------------------------------------------------------
# batch sampling


def sample_batch(
    labels: LabelMatrix,
    batch_size: int,
    identities_per_batch: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Class-balanced indices: P pseudo-identities x K instances.

    Identities with fewer than K members are sampled with replacement;
    noise records never appear.  When fewer than P identities exist, the
    chosen identities repeat so the batch size stays fixed.
    """
    if batch_size % identities_per_batch:
        raise ConfigError("batch_size must be a multiple of identities_per_batch")
    k = batch_size // identities_per_batch
    n_ids = labels.n_clusters
    if n_ids == 0:
        raise ConfigError("cannot sample a batch without clusters")
    if n_ids >= identities_per_batch:
        chosen = rng.choice(n_ids, size=identities_per_batch, replace=False)
    else:
        chosen = np.concatenate(
            [
                np.tile(rng.permutation(n_ids), identities_per_batch // n_ids),
                rng.choice(n_ids, size=identities_per_batch % n_ids, replace=False),
            ]
        )
    out = []
    for cluster in chosen:
        members = labels.cluster_members(int(cluster))
        replace = len(members) < k
        out.append(rng.choice(members, size=k, replace=replace))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# the outer loop


@dataclass
class EpochMetrics:
    epoch: int
    n_clusters: int
    n_noise: int
    mean_intra: float
    mean_inter: float
    mean_instance: float
    mean_total: float
    pairwise_f1: float | None = None
    retrieval_map: float | None = None


@dataclass
class TrainResult:
    adapter: Adapter
    epochs: list[EpochMetrics]
    loss_rows: list[tuple[int, int, float, float, float, float]]
    initial_map: float | None
    final_labels: LabelMatrix | None
    final_histogram: STHistogram | None
    per_epoch_labels: list[LabelMatrix]


def _retrieval_map(
    features: np.ndarray, dataset: Dataset, protocol: evalkit.RetrievalProtocol | None
) -> float | None:
    if protocol is None:
        return None
    metrics = evalkit.evaluate(features, protocol, dataset.ground_truth, dataset.cameras)
    return metrics["mAP"]


def run(dataset: Dataset, cfg: RunConfig) -> TrainResult:
    """Train the adapter with per-epoch label regeneration.

    All randomness flows from ``cfg.seed``; identical configs produce
    identical traces and artifacts.
    """
    cfg.validate()
    t = cfg.train
    rng = np.random.default_rng(cfg.seed)
    d = dataset.dim
    adapter = Adapter.near_identity(d, d, rng)
    optimizer = AdamW(
        shapes=[adapter.weight.shape, adapter.bias.shape],
        lr=t.lr,
        beta1=t.beta1,
        beta2=t.beta2,
        eps=t.adam_eps,
        weight_decay=t.weight_decay,
    )

    protocol = None
    if dataset.ground_truth is not None:
        protocol = evalkit.make_default_protocol(dataset, cfg.protocol.cross_camera)

    initial_map = _retrieval_map(adapter.transform(dataset.embeddings), dataset, protocol)

    epochs: list[EpochMetrics] = []
    loss_rows: list[tuple[int, int, float, float, float, float]] = []
    per_epoch_labels: list[LabelMatrix] = []
    labelgen: LabelGenResult | None = None

    for epoch in range(t.epochs):
        optimizer.lr = t.lr / (t.lr_decay_factor ** (epoch // t.lr_decay_every))
        features = adapter.transform(dataset.embeddings)

        try:
            labelgen = generate_labels(dataset, features, cfg)
        except DegenerateClustering as exc:
            if labelgen is None:
                logger.warning("epoch %d: %s; no previous labels, skipping epoch", epoch, exc)
                per_epoch_labels.append(
                    LabelMatrix(np.full(len(dataset), -1, dtype=np.int64), 0)
                )
                epochs.append(
                    EpochMetrics(epoch, 0, len(dataset), 0.0, 0.0, 0.0, 0.0, None, None)
                )
                continue
            logger.warning("epoch %d: %s; falling back to previous labels", epoch, exc)

        labels = labelgen.refined_labels
        per_epoch_labels.append(labels)
        if labels.n_clusters == 0:
            logger.warning("epoch %d: refinement left no clusters; skipping updates", epoch)
            epochs.append(
                EpochMetrics(epoch, 0, len(dataset), 0.0, 0.0, 0.0, 0.0, None, None)
            )
            continue

        mem, prototypes = objectives.init_memories(
            features,
            labels,
            dataset,
            momentum=cfg.loss.momentum,
            temperature=cfg.loss.temperature,
        )

        warmup = epoch < t.warmup_epochs
        lambdas = (
            cfg.loss.lambda_intra,
            0.0 if warmup else cfg.loss.lambda_inter,
            0.0 if warmup else cfg.loss.lambda_instance,
        )
        # at tiny dataset scale, cap the inner loop at a few passes over the data
        usable = int((~labels.noise_mask).sum())
        iters = min(t.iters_per_epoch, max(1, -(-usable // t.batch_size) * 4))
        if max(lambdas) == 0.0:
            iters = 0
        weights = objectives.LossWeights(*lambdas) if max(lambdas) > 0 else None

        sums = np.zeros(4)
        pool_size = min(cfg.loss.pool_size, len(dataset) - 1)
        for it in range(iters):
            batch = sample_batch(labels, t.batch_size, t.identities_per_batch, rng)
            x = dataset.embeddings[batch]
            feats = adapter.transform(x)
            total, grads, parts = objectives.total_loss(
                feats,
                batch,
                dataset.cameras[batch],
                mem,
                prototypes,
                labels,
                labelgen.soft_assignment,
                weights=weights,
                pool_size=pool_size,
                temperature=cfg.loss.temperature,
                hard_negatives=cfg.loss.hard_negatives,
                variant=cfg.loss.ap_variant,
                ap_temperature=cfg.loss.ap_temperature,
            )
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss at epoch {epoch} iter {it}")
            g_w, g_b = adapter.backward(x, grads)
            optimizer.step([adapter.weight, adapter.bias], [g_w, g_b])

            for row, idx in enumerate(batch):
                mem.update(int(idx), feats[row])
                cluster = int(labels.assignments[int(idx)])
                if cluster >= 0:
                    prototypes.update(cluster, int(dataset.cameras[int(idx)]), feats[row])

            loss_rows.append(
                (epoch, it, parts["intra"], parts["inter"], parts["instance"], total)
            )
            sums += (parts["intra"], parts["inter"], parts["instance"], total)

        denom = max(iters, 1)
        f1 = None
        if dataset.ground_truth is not None:
            f1 = evalkit.pairwise_f1(labels, dataset.ground_truth)["f1"]
        current_map = _retrieval_map(adapter.transform(dataset.embeddings), dataset, protocol)
        epochs.append(
            EpochMetrics(
                epoch=epoch,
                n_clusters=labels.n_clusters,
                n_noise=int(labels.noise_mask.sum()),
                mean_intra=sums[0] / denom,
                mean_inter=sums[1] / denom,
                mean_instance=sums[2] / denom,
                mean_total=sums[3] / denom,
                pairwise_f1=f1,
                retrieval_map=current_map,
            )
        )
        logger.info(
            "epoch %d: clusters=%d noise=%d loss=%.4f map=%s",
            epoch,
            labels.n_clusters,
            int(labels.noise_mask.sum()),
            sums[3] / denom,
            "n/a" if current_map is None else f"{current_map:.4f}",
        )

    return TrainResult(
        adapter=adapter,
        epochs=epochs,
        loss_rows=loss_rows,
        initial_map=initial_map,
        final_labels=labelgen.refined_labels if labelgen else None,
        final_histogram=labelgen.histogram if labelgen else None,
        per_epoch_labels=per_epoch_labels,
    )
