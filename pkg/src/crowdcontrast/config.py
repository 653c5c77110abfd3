"""Dataclass configs for data generation, model shape, losses and training.

Every config round-trips through plain dicts so a single JSON file can drive
the whole pipeline (``gen-data`` -> ``train-wrl`` -> ``train-crr`` -> ``eval``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

WEATHER_CLASSES = ("normal", "haze", "rain", "snow")
NORMAL_CLASS = 0

MEMORY_KINDS = ("multi-queue", "single-queue", "memory-bank")
POSITIVE_SELECTIONS = ("same-image", "same-weather")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class DatasetSpec:
    """Recipe for a synthetic weather-imbalanced crowd dataset.

    ``counts[c]`` is the number of train images of weather class ``c``
    (class 0 is always the normal-weather class). ``test_counts`` optionally
    adds a held-out split. Severity of each corruption is drawn uniformly per
    image from that class's range.
    """

    counts: tuple[int, ...] = (340, 20, 20, 20)
    test_counts: tuple[int, ...] | None = None
    image_size: int = 128
    count_range: tuple[int, int] = (5, 40)
    severity_range: tuple[float, float] = (0.4, 0.9)
    severity_overrides: dict[int, tuple[float, float]] = field(default_factory=dict)
    seed: int = 0
    classes: tuple[str, ...] = WEATHER_CLASSES

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ConfigError("need at least 2 weather classes")
        if len(self.counts) != len(self.classes):
            raise ConfigError(
                f"counts has {len(self.counts)} entries for {len(self.classes)} classes"
            )
        if any(c < 0 for c in self.counts):
            raise ConfigError("per-class counts must be >= 0")
        if self.counts[NORMAL_CLASS] < 1:
            raise ConfigError("at least one normal-weather image is required")
        if self.test_counts is not None and len(self.test_counts) != len(self.classes):
            raise ConfigError("test_counts length must match classes")
        if self.test_counts is not None and any(c < 0 for c in self.test_counts):
            raise ConfigError("test counts must be >= 0")
        if self.image_size < 64:
            raise ConfigError(f"image_size {self.image_size} < 64 is not supported")
        lo, hi = self.count_range
        if not (0 <= lo <= hi):
            raise ConfigError(f"bad count_range {self.count_range}")
        for rng in [self.severity_range, *self.severity_overrides.values()]:
            s_lo, s_hi = rng
            if not (0.0 <= s_lo <= s_hi <= 1.0):
                raise ConfigError(f"severity range {rng} outside [0, 1]")

    def severity_range_for(self, weather: int) -> tuple[float, float]:
        if weather == NORMAL_CLASS:
            return (0.0, 0.0)
        return self.severity_overrides.get(weather, self.severity_range)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class ModelConfig:
    """Shape parameters for the encoder, projection heads, refiner and head."""

    stride: int = 32                # total spatial downscale of the encoder
    repr_channels: int = 192        # channels of the encoder output
    embed_dim: int = 128            # dimension of projected embeddings
    proj_hidden: int = 2048         # hidden width of the projection MLP
    refiner_depth: int = 3          # residual blocks in the refiner
    momentum: float = 0.999         # EMA coefficient for the momentum branch
    head_upsample: int = 4          # upsampling factor of the counting head

    def validate(self) -> None:
        for name in ("stride", "repr_channels", "embed_dim", "proj_hidden",
                     "refiner_depth", "head_upsample"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.stride % self.head_upsample != 0:
            raise ConfigError("stride must be divisible by head_upsample")
        # stem is stride 4, each later stage halves; head stacks x2 deconvs
        if self.stride < 4 or (self.stride & (self.stride - 1)) != 0:
            raise ConfigError("stride must be a power of two >= 4")
        if self.head_upsample < 2 or (self.head_upsample & (self.head_upsample - 1)) != 0:
            raise ConfigError("head_upsample must be a power of two >= 2")
        if self.repr_channels % 8 != 0:
            raise ConfigError("repr_channels must be divisible by 8")
        if not (0.0 <= self.momentum <= 1.0):
            raise ConfigError("momentum must lie in [0, 1]")

    @property
    def density_stride(self) -> int:
        """Pixels per density-grid cell after the counting head."""
        return self.stride // self.head_upsample


@dataclass
class LossConfig:
    """Weights and scales of the training objectives."""

    temperature: float = 0.05       # divides cosine logits in both contrastive losses
    count_weight_wrl: float = 10.0  # weight of the count loss in the first stage
    count_weight_crr: float = 10.0  # weight of the count loss in the refinement stage
    count_sigma: float = 4.0        # Gaussian width of the count loss, in density-grid cells
    loss_reduction: str = "mean"    # "mean" keeps loss scale batch-size independent

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.count_sigma <= 0:
            raise ConfigError("count_sigma must be > 0")
        if self.count_weight_wrl < 0 or self.count_weight_crr < 0:
            raise ConfigError("count-loss weights must be >= 0")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown loss_reduction {self.loss_reduction!r}")


@dataclass
class TrainConfig:
    """Optimization schedule and strategy switches for both stages."""

    crop_size: int = 64
    flip_prob: float = 0.5
    batch_size: int = 16
    wrl_epochs: int = 30
    crr_epochs: int = 15
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    optimizer: str = "adamw"
    schedule: str = "cosine"
    queue_capacity: int = 256           # per-class FIFO length
    memory: str = "multi-queue"
    positive_selection: str = "same-image"
    train_head_in_crr: bool = True
    seed: int = 0

    def validate(self, model: ModelConfig | None = None) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.crop_size <= 0:
            raise ConfigError("crop_size must be positive")
        if model is not None and self.crop_size % model.stride != 0:
            raise ConfigError(
                f"crop_size {self.crop_size} not divisible by encoder stride {model.stride}"
            )
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.wrl_epochs < 1 or self.crr_epochs < 0:
            raise ConfigError("epoch counts out of range")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("bad optimizer hyperparameters")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.memory not in MEMORY_KINDS:
            raise ConfigError(f"memory must be one of {MEMORY_KINDS}")
        if self.positive_selection not in POSITIVE_SELECTIONS:
            raise ConfigError(f"positive_selection must be one of {POSITIVE_SELECTIONS}")


@dataclass
class PipelineConfig:
    """All four config sections, as read from one JSON file."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.dataset.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate(self.model)


def _tupled(obj: Any) -> Any:
    if isinstance(obj, list):
        return tuple(_tupled(x) for x in obj)
    return obj


def _dataset_spec_from_dict(d: dict) -> DatasetSpec:
    kwargs = {k: _tupled(v) for k, v in d.items()}
    if "severity_overrides" in kwargs:
        kwargs["severity_overrides"] = {
            int(k): _tupled(v) for k, v in d["severity_overrides"].items()
        }
    return DatasetSpec(**kwargs)


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, tuple):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    return obj


def to_dict(cfg: Any) -> dict:
    """Dataclass config -> JSON-ready dict."""
    return _plain(cfg)


def pipeline_config_from_dict(d: dict) -> PipelineConfig:
    cfg = PipelineConfig(
        dataset=_dataset_spec_from_dict(d.get("dataset", {})),
        model=ModelConfig(**{k: _tupled(v) for k, v in d.get("model", {}).items()}),
        loss=LossConfig(**d.get("loss", {})),
        train=TrainConfig(**d.get("train", {})),
    )
    cfg.validate()
    return cfg


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return pipeline_config_from_dict(json.load(fh))


def load_dataset_spec(path: str | Path) -> DatasetSpec:
    """Read a DatasetSpec from either a bare spec file or a pipeline config."""
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if "dataset" in d and isinstance(d["dataset"], dict):
        d = d["dataset"]
    spec = _dataset_spec_from_dict(d)
    spec.validate()
    return spec


def save_pipeline_config(cfg: PipelineConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
