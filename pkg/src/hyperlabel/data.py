"""Core domain types and on-disk formats.

A dataset is a list of records, each carrying an L2-normalized embedding,
a camera index and an integer frame timestamp.  Embeddings travel in a
small binary ``.emb`` container (magic ``HLEM``, u32 count, u32 dim, u32
reserved, then float32 rows), metadata in JSON Lines and label assignments
in ``.labels.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DimensionMismatch,
    DuplicateIndex,
    InvalidTimestamp,
    MalformedHeader,
    ValidationError,
    ZeroVector,
)

NOISE = -1

EMB_MAGIC = b"HLEM"
_HEADER = struct.Struct("<4sIII")  # magic, n_records, dim, reserved


@dataclass(frozen=True)
class ImageRecord:
    """One sighting: embedding row index, camera and frame timestamp."""

    index: int
    camera: int
    timestamp: int
    identity: int | None = None


@dataclass
class Dataset:
    """Immutable embedding matrix plus per-record metadata.

    ``embeddings`` rows are unit length; ``ground_truth`` is present only
    for synthetic or evaluation data.
    """

    embeddings: np.ndarray  # (n, d) float64, rows unit norm
    cameras: np.ndarray  # (n,) int64
    timestamps: np.ndarray  # (n,) int64
    ground_truth: np.ndarray | None = None  # (n,) int64 identity ids
    frame_rate_hint: float | None = None

    def __post_init__(self) -> None:
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise DataError("embeddings must be a 2-d array")
        n = self.embeddings.shape[0]
        if self.cameras.shape != (n,) or self.timestamps.shape != (n,):
            raise DataError("metadata arrays must match the number of embedding rows")
        if np.any(self.timestamps < 0):
            raise InvalidTimestamp("timestamps must be non-negative")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_cameras(self) -> int:
        return int(self.cameras.max()) + 1 if len(self) else 0

    def records(self) -> list[ImageRecord]:
        ids = self.ground_truth
        return [
            ImageRecord(
                index=i,
                camera=int(self.cameras[i]),
                timestamp=int(self.timestamps[i]),
                identity=None if ids is None else int(ids[i]),
            )
            for i in range(len(self))
        ]


@dataclass
class LabelMatrix:
    """Cluster assignment per record: ids in [0, n_clusters) or NOISE (-1).

    The dense form is one-hot per non-noise row and all-zero on noise rows.
    """

    assignments: np.ndarray
    n_clusters: int
    soft: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.assignments.ndim != 1:
            raise ValidationError("assignments must be a 1-d array")
        self.validate()

    def validate(self) -> None:
        a = self.assignments
        if self.n_clusters < 0:
            raise ValidationError("n_clusters must be non-negative")
        if a.size and (a.min() < NOISE or a.max() >= self.n_clusters):
            raise ValidationError(
                f"cluster ids must lie in [-1, {self.n_clusters}), got range "
                f"[{a.min()}, {a.max()}]"
            )
        present = np.unique(a[a >= 0])
        if present.size != self.n_clusters:
            missing = sorted(set(range(self.n_clusters)) - set(present.tolist()))
            raise ValidationError(f"clusters without members: {missing}")

    def __len__(self) -> int:
        return self.assignments.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return self.n_clusters == other.n_clusters and np.array_equal(
            self.assignments, other.assignments
        )

    @property
    def noise_mask(self) -> np.ndarray:
        return self.assignments == NOISE

    def cluster_members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster)

    def dense(self) -> np.ndarray:
        y = np.zeros((len(self), self.n_clusters), dtype=np.float64)
        ok = self.assignments >= 0
        y[np.flatnonzero(ok), self.assignments[ok]] = 1.0
        return y

    @classmethod
    def from_assignments(cls, assignments: np.ndarray) -> "LabelMatrix":
        """Build a compact label matrix, renumbering ids by first appearance."""
        a = np.asarray(assignments, dtype=np.int64)
        out = np.full(a.shape, NOISE, dtype=np.int64)
        mapping: dict[int, int] = {}
        for i, v in enumerate(a.tolist()):
            if v < 0:
                continue
            if v not in mapping:
                mapping[v] = len(mapping)
            out[i] = mapping[v]
        return cls(out, len(mapping))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows, leaving rows already within 1e-6 of unit norm alone.

    Skipping near-unit rows keeps save/load round trips bit-identical.
    """
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ZeroVector(f"embedding row {bad} is all zeros and cannot be normalized")
    out = x.copy()
    stale = np.abs(norms - 1.0) > 1e-6
    if np.any(stale):
        out[stale] = x[stale] / norms[stale, None]
    return out


def save_embeddings(embeddings: np.ndarray, path: str | Path) -> None:
    """Write a float32 ``.emb`` container (little-endian, row-major)."""
    e = np.ascontiguousarray(embeddings, dtype=np.float32)
    if e.ndim != 2:
        raise DataError("embeddings must be a 2-d array")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, e.shape[0], e.shape[1], 0))
        fh.write(e.tobytes(order="C"))


def load_embeddings(path: str | Path) -> np.ndarray:
    """Read a ``.emb`` container, returning float32 rows (not yet normalized)."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise MalformedHeader(f"{path}: truncated header")
        magic, n, d, _ = _HEADER.unpack(header)
        if magic != EMB_MAGIC:
            raise MalformedHeader(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    expected = n * d * 4
    if len(payload) != expected:
        raise MalformedHeader(
            f"{path}: expected {expected} payload bytes for {n}x{d}, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, d)


def _parse_metadata_line(lineno: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"metadata line {lineno}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise DataError(f"metadata line {lineno}: expected an object")
    for key in ("index", "camera", "timestamp"):
        if key not in obj:
            raise DataError(f"metadata line {lineno}: missing key '{key}'")
    ts = obj["timestamp"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise InvalidTimestamp(f"metadata line {lineno}: timestamp must be an integer")
    if ts < 0:
        raise InvalidTimestamp(f"metadata line {lineno}: timestamp must be >= 0")
    for key in ("index", "camera"):
        v = obj[key]
        if isinstance(v, bool) or not isinstance(v, int):
            raise DataError(f"metadata line {lineno}: '{key}' must be an integer")
    return obj


def load_dataset(embeddings_path: str | Path, metadata_path: str | Path) -> Dataset:
    """Load and join the embedding and metadata files into a Dataset.

    Embeddings come out L2-normalized; the original norms are discarded.
    """
    raw = load_embeddings(embeddings_path)
    n, _ = raw.shape

    lines = [
        (i + 1, ln)
        for i, ln in enumerate(Path(metadata_path).read_text().splitlines())
        if ln.strip()
    ]
    if len(lines) != n:
        raise DimensionMismatch(
            f"embeddings carry {n} rows but metadata has {len(lines)} records"
        )

    cameras = np.zeros(n, dtype=np.int64)
    timestamps = np.zeros(n, dtype=np.int64)
    identities = np.full(n, -1, dtype=np.int64)
    has_identity = False
    seen = np.zeros(n, dtype=bool)
    for lineno, line in lines:
        obj = _parse_metadata_line(lineno, line)
        idx = obj["index"]
        if not 0 <= idx < n:
            raise DataError(f"metadata line {lineno}: index {idx} outside [0, {n})")
        if seen[idx]:
            raise DuplicateIndex(f"metadata line {lineno}: duplicate index {idx}")
        seen[idx] = True
        cameras[idx] = obj["camera"]
        timestamps[idx] = obj["timestamp"]
        if "identity" in obj and obj["identity"] is not None:
            identities[idx] = int(obj["identity"])
            has_identity = True

    normalized = _normalize_rows(raw.astype(np.float64))
    return Dataset(
        embeddings=normalized,
        cameras=cameras,
        timestamps=timestamps,
        ground_truth=identities if has_identity else None,
    )


def save_dataset(dataset: Dataset, embeddings_path: str | Path, metadata_path: str | Path) -> None:
    save_embeddings(dataset.embeddings, embeddings_path)
    with open(metadata_path, "w") as fh:
        for rec in dataset.records():
            obj = {"index": rec.index, "camera": rec.camera, "timestamp": rec.timestamp}
            if rec.identity is not None:
                obj["identity"] = rec.identity
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def save_labels(labels: LabelMatrix, path: str | Path) -> None:
    payload = {
        "n_clusters": int(labels.n_clusters),
        "assignments": [int(v) for v in labels.assignments],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_labels(path: str | Path) -> LabelMatrix:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict) or set(payload) != {"n_clusters", "assignments"}:
        raise ValidationError(f"{path}: expected keys n_clusters and assignments")
    try:
        return LabelMatrix(
            np.asarray(payload["assignments"], dtype=np.int64),
            int(payload["n_clusters"]),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc
