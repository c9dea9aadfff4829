"""Ground-truthed synthetic camera-network datasets.

Each identity owns a unit prototype and random-walks through the camera
network; dwell and transition times are per camera-pair truncated
Gaussians, and every sighting emits a normalized embedding of prototype +
fixed camera shift + isotropic noise.  The fixed per-camera shift models
the intra- vs inter-camera appearance gap that camera-aware prototypes
exist to absorb.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError


@dataclass
class CameraTopology:
    """Per camera-pair transition-time statistics in frames."""

    mean: np.ndarray  # (C, C)
    std: np.ndarray  # (C, C)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 2:
            raise ConfigError("topology mean/std must be matching square matrices")
        if np.any(self.mean < 1) or np.any(self.std < 0):
            raise ConfigError("transition means must be >= 1 frame, stddevs >= 0")

    @classmethod
    def uniform(cls, cameras: int, mean: float, std: float) -> "CameraTopology":
        return cls(
            mean=np.full((cameras, cameras), float(mean)),
            std=np.full((cameras, cameras), float(std)),
        )


@dataclass
class SynthConfig:
    n_identities: int = 50
    cameras: int = 4
    images_per_identity: int = 10
    embed_dim: int = 32
    intra_class_noise: float = 0.3
    inter_camera_shift: float = 0.3
    transition_mean: float = 600.0
    transition_std: float = 60.0
    topology: CameraTopology | None = field(default=None)
    frame_horizon: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_identities < 2:
            raise ConfigError("need at least 2 identities")
        if self.cameras < 2:
            raise ConfigError("need at least 2 cameras")
        if self.images_per_identity < 1:
            raise ConfigError("images_per_identity must be >= 1")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be >= 2")
        if self.intra_class_noise < 0:
            raise ConfigError("intra_class_noise must be >= 0")
        if self.inter_camera_shift < 0:
            raise ConfigError("inter_camera_shift must be >= 0")

    def resolved_topology(self) -> CameraTopology:
        topo = self.topology or CameraTopology.uniform(
            self.cameras, self.transition_mean, self.transition_std
        )
        if topo.mean.shape[0] != self.cameras:
            raise ConfigError("topology size does not match the camera count")
        return topo


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate(config: SynthConfig) -> Dataset:
    """Sample a dataset with ground-truth identities.

    Deterministic under the config seed; per-identity trajectories use
    split seeds, so records of one identity are contiguous and the output
    is independent of identity iteration order.
    """
    topo = config.resolved_topology()
    span_cap = (config.images_per_identity - 1) * float(
        np.max(topo.mean) + 6.0 * np.max(topo.std)
    )
    horizon = config.frame_horizon
    if horizon is None:
        horizon = int(span_cap + np.max(topo.mean) + 1)
    if horizon < config.images_per_identity:
        raise ConfigError(
            f"frame_horizon={horizon} cannot fit {config.images_per_identity} sightings"
        )

    master = np.random.default_rng(config.seed)
    prototypes = _unit_rows(master, config.n_identities, config.embed_dim)
    shifts = _unit_rows(master, config.cameras, config.embed_dim) * config.inter_camera_shift
    identity_seeds = np.random.SeedSequence(config.seed).spawn(config.n_identities)

    start_slack = max(0, horizon - int(span_cap))
    noise_scale = config.intra_class_noise / np.sqrt(config.embed_dim)

    embeddings = []
    cameras = []
    timestamps = []
    identities = []
    for pid in range(config.n_identities):
        rng = np.random.default_rng(identity_seeds[pid])
        camera = int(rng.integers(config.cameras))
        t = int(rng.integers(start_slack + 1))
        for _ in range(config.images_per_identity):
            noise = rng.normal(size=config.embed_dim) * noise_scale
            vec = prototypes[pid] + shifts[camera] + noise
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                raise ConfigError("degenerate zero embedding sampled; adjust noise levels")
            embeddings.append(vec / norm)
            cameras.append(camera)
            timestamps.append(t)
            identities.append(pid)
            nxt = int(rng.integers(config.cameras))
            dt = rng.normal(topo.mean[camera, nxt], topo.std[camera, nxt])
            t += max(1, int(np.rint(dt)))
            camera = nxt

    ts = np.asarray(timestamps, dtype=np.int64)
    if config.frame_horizon is not None and ts.max() > config.frame_horizon:
        raise ConfigError(
            f"trajectories exceed frame_horizon={config.frame_horizon}; "
            "increase it or reduce images_per_identity"
        )
    return Dataset(
        embeddings=np.asarray(embeddings, dtype=np.float64),
        cameras=np.asarray(cameras, dtype=np.int64),
        timestamps=ts,
        ground_truth=np.asarray(identities, dtype=np.int64),
    )
