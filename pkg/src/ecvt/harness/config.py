"""Run configuration, loaded from JSON with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from ..encoder import EncoderConfig
from ..errors import ConfigError
from ..evaluation import THUMOS_THRESHOLDS
from ..head_losses import LossWeights


@dataclass(frozen=True)
class GuidanceToggles:
    gep: bool = True
    tsep: bool = True
    calibrate: bool = True
    advanced_fusion: bool = True
    fusion_layer: int = -1  # encoder layer after which the global prompt is fused; -1 = last
    gamma: float = 1.0
    calib_rounds: int = 1

    @property
    def any(self) -> bool:
        return self.gep or self.tsep or self.calibrate


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    warmup_steps: int = 50
    total_steps: int = 500
    eps: float = 1e-8
    max_grad_norm: float | None = 5.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.total_steps and self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps cannot exceed total_steps")


@dataclass(frozen=True)
class Seeds:
    model: int = 0
    data: int = 0
    shuffle: int = 0


@dataclass(frozen=True)
class DatasetSpec:
    num_videos: int = 20
    num_classes: int = 5
    duration_range: tuple[float, float] = (16.0, 28.0)
    token_len: float = 1.0
    d_in: int = 64
    events_per_video: tuple[int, int] = (1, 4)
    event_len_range: tuple[float, float] = (3.0, 8.0)
    min_gap: float = 1.0
    same_class_prob: float = 0.6
    signal: float = 1.0
    noise: float = 0.5
    val_fraction: float = 0.0
    d_p: int = 32
    clip_len: float = 4.0
    clip_stride: float = 2.0
    prompt_seed: int = 0
    max_tries: int = 200

    def __post_init__(self):
        for name in ("duration_range", "events_per_video", "event_len_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.num_classes < 1:
            raise ConfigError("need at least one action class besides background")
        if self.duration_range[0] <= 0 or self.duration_range[0] > self.duration_range[1]:
            raise ConfigError(f"bad duration range {self.duration_range}")
        if self.token_len <= 0 or self.noise < 0:
            raise ConfigError("token_len must be positive and noise non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class DecodeConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    score_mode: str = "centerness"


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    guidance: GuidanceToggles = field(default_factory=GuidanceToggles)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seeds: Seeds = field(default_factory=Seeds)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    thresholds: tuple[float, ...] = tuple(THUMOS_THRESHOLDS)
    batch_size: int = 4
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    log_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.encoder.d_v != self.dataset.d_in:
            raise ConfigError(f"encoder d_v={self.encoder.d_v} must equal dataset d_in={self.dataset.d_in}")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {
    "encoder": EncoderConfig,
    "guidance": GuidanceToggles,
    "loss_weights": LossWeights,
    "optimizer": OptimizerConfig,
    "seeds": Seeds,
    "dataset": DatasetSpec,
    "decode": DecodeConfig,
}


def _strict(cls, obj: Any, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return obj


def dataset_spec_from_json(obj: dict) -> DatasetSpec:
    return DatasetSpec(**_strict(DatasetSpec, obj, "dataset"))


def config_from_json(obj: dict) -> RunConfig:
    """Build a RunConfig; any key not named like a field is an error."""
    _strict(RunConfig, obj, "config")
    kwargs = {}
    for key, value in obj.items():
        sub = _NESTED.get(key)
        kwargs[key] = sub(**_strict(sub, value, key)) if sub else value
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    return config_from_json(json.loads(Path(path).read_text()))
