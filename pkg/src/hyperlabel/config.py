"""Run configuration: one nested JSON schema for every pipeline stage.

Every field is optional with a documented default; unknown keys are
rejected and cross-field constraints are validated before any work starts.
The effective (defaults-filled) config is echoed into each run directory,
and re-running from that echo reproduces the artifacts byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .objectives import LossWeights
from .propagation import PropagationParams
from .similarity import JointSimilarityParams
from .synthgen import SynthConfig


@dataclass
class SimilarityConfig:
    # joint-similarity sigmoid shapes (implementation defaults; see README)
    lambda_visual: float = 1.0
    gamma_visual: float = 5.0
    lambda_temporal: float = 2.0
    gamma_temporal: float = 5.0
    # k-reciprocal re-ranking (published defaults of the re-ranking method)
    k1: int = 30
    k2: int = 6
    lambda_rerank: float = 0.3
    # transition-time histogram
    delta_t: int = 100
    max_bins: int = 200
    smoothing_eps: float = 1e-4
    sparse_topk: int | None = None  # None = dense joint similarity

    def joint_params(self) -> JointSimilarityParams:
        return JointSimilarityParams(
            lambda_visual=self.lambda_visual,
            gamma_visual=self.gamma_visual,
            lambda_temporal=self.lambda_temporal,
            gamma_temporal=self.gamma_temporal,
        )

    def validate(self) -> None:
        self.joint_params()
        if not self.k1 > self.k2 >= 1:
            raise ConfigError("need k1 > k2 >= 1")
        if not 0.0 <= self.lambda_rerank <= 1.0:
            raise ConfigError("lambda_rerank must lie in [0, 1]")
        if self.delta_t < 1 or self.max_bins < 1:
            raise ConfigError("delta_t and max_bins must be >= 1")
        if self.smoothing_eps < 0:
            raise ConfigError("smoothing_eps must be >= 0")


@dataclass
class DbscanConfig:
    eps: float = 0.6
    min_samples: int = 4

    def validate(self) -> None:
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.min_samples < 1:
            raise ConfigError("min_samples must be >= 1")


@dataclass
class KnnConfig:
    k_list: list[int] = field(default_factory=lambda: [10, 20, 30, 40, 50])

    def validate(self) -> None:
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ConfigError("k_list must hold positive neighbor counts")


@dataclass
class PropagationConfig:
    alpha1: float = 0.99
    alpha2: float = 0.9
    scale: float = 1.0
    reliable_per_cluster: int = 4
    max_iters: int = 50
    tol: float = 1e-6

    def params(self) -> PropagationParams:
        return PropagationParams(
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            scale=self.scale,
            reliable_per_cluster=self.reliable_per_cluster,
            max_iters=self.max_iters,
            tol=self.tol,
        )

    def validate(self) -> None:
        self.params()


@dataclass
class LossConfig:
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0
    lambda_instance: float = 10.0
    temperature: float = 0.07
    momentum: float = 0.2
    pool_size: int = 1000
    hard_negatives: int = 50
    ap_variant: str = "paper"
    ap_temperature: float = 0.01

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_intra=self.lambda_intra,
            lambda_inter=self.lambda_inter,
            lambda_instance=self.lambda_instance,
        )

    def validate(self) -> None:
        self.weights()
        if self.temperature <= 0 or self.ap_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigError("momentum must lie in (0, 1)")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.hard_negatives < 0:
            raise ConfigError("hard_negatives must be >= 0")
        if self.ap_variant not in ("paper", "difference"):
            raise ConfigError("ap_variant must be 'paper' or 'difference'")


@dataclass
class TrainSettings:
    epochs: int = 50
    iters_per_epoch: int = 400
    batch_size: int = 32
    identities_per_batch: int = 8
    lr: float = 3.5e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    weight_decay: float = 3e-4
    warmup_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if min(self.epochs, self.iters_per_epoch, self.batch_size) < 0:
            raise ConfigError("epochs, iterations and batch size must be >= 0")
        if self.batch_size < 1 or self.iters_per_epoch < 1:
            raise ConfigError("batch_size and iters_per_epoch must be >= 1")
        if self.identities_per_batch < 1 or self.batch_size % self.identities_per_batch:
            raise ConfigError("batch_size must be a multiple of identities_per_batch")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must not exceed epochs")
        if self.lr <= 0 or self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigError("learning-rate settings must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid optimizer moment settings")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class ProtocolConfig:
    cross_camera: bool = True

    def validate(self) -> None:
        pass


@dataclass
class SynthSection:
    n_identities: int = 50
    cameras: int = 4
    images_per_identity: int = 10
    embed_dim: int = 32
    intra_class_noise: float = 0.3
    inter_camera_shift: float = 0.3
    transition_mean: float = 600.0
    transition_std: float = 60.0
    frame_horizon: int | None = None

    def to_synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            n_identities=self.n_identities,
            cameras=self.cameras,
            images_per_identity=self.images_per_identity,
            embed_dim=self.embed_dim,
            intra_class_noise=self.intra_class_noise,
            inter_camera_shift=self.inter_camera_shift,
            transition_mean=self.transition_mean,
            transition_std=self.transition_std,
            frame_horizon=self.frame_horizon,
            seed=seed,
        )

    def validate(self) -> None:
        self.to_synth_config(seed=0)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    synth: SynthSection = field(default_factory=SynthSection)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def validate(self) -> "RunConfig":
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for section in (
            self.synth,
            self.similarity,
            self.dbscan,
            self.knn,
            self.propagation,
            self.loss,
            self.train,
            self.protocol,
        ):
            section.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


_SECTIONS = {
    "synth": SynthSection,
    "similarity": SimilarityConfig,
    "dbscan": DbscanConfig,
    "knn": KnnConfig,
    "propagation": PropagationConfig,
    "loss": LossConfig,
    "train": TrainSettings,
    "protocol": ProtocolConfig,
}


def _build_section(cls, payload: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"invalid {where} section: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    """Parse and validate a nested config dict, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    top_known = {"seed", "threads"} | set(_SECTIONS)
    unknown = set(payload) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs: dict = {}
    for key in ("seed", "threads"):
        if key in payload:
            kwargs[key] = payload[key]
    for key, cls in _SECTIONS.items():
        if key in payload:
            section = payload[key]
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            kwargs[key] = _build_section(cls, section, key)
    return RunConfig(**kwargs).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(payload)


def apply_thread_limit(threads: int | None) -> None:
    """Best-effort cap on BLAS worker threads (deterministic either way)."""
    if threads is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(threads)
    except ImportError:
        import os

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
