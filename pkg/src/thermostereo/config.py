"""Dataclass configs for the model and training runs.

Configs are plain dataclasses that round-trip through JSON. ``config_hash``
is a SHA-256 over the canonical (sorted-key) JSON form, so two configs hash
equal iff every field is equal.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

VARIANTS = ("full", "no_se", "no_se_no_refine")


class ConfigError(ValueError):
    """Inconsistent or unknown configuration values."""


def normalize_variant(name: str) -> str:
    """Accept CLI spellings (``no-se``) as well as the canonical ones."""
    v = name.replace("-", "_")
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass
class ModelConfig:
    variant: str = "full"
    d_max: int = 192
    # encoder widths; the stem runs at 1/2 resolution
    stem_channels: int = 32
    feat4_channels: int = 48
    feat8_channels: int = 128
    feat16_channels: int = 256
    attn_dim: int = 128
    # aggregation volume widths at 1/4, 1/8, 1/16 image scale
    volume_channels: tuple[int, int, int] = (8, 32, 96)
    blocks_per_scale: int = 2
    expand_ratio: int = 4
    se_reduction: int = 4
    # refinement
    merge_channels: int = 64
    refine_channels: int = 160
    corr_radius: int = 4
    upsample_factor: int = 4

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        self.volume_channels = tuple(int(c) for c in self.volume_channels)
        self.validate()

    @property
    def d_levels(self) -> int:
        return self.d_max // 4

    @property
    def use_se(self) -> bool:
        return self.variant == "full"

    @property
    def use_refine(self) -> bool:
        return self.variant != "no_se_no_refine"

    def validate(self) -> None:
        if self.d_max < 4 or self.d_max % 4:
            raise ConfigError(f"d_max must be a positive multiple of 4, got {self.d_max}")
        widths = dict(
            stem_channels=self.stem_channels, feat4_channels=self.feat4_channels,
            feat8_channels=self.feat8_channels, feat16_channels=self.feat16_channels,
            attn_dim=self.attn_dim, merge_channels=self.merge_channels,
            refine_channels=self.refine_channels,
        )
        for name, w in widths.items():
            if w < 1:
                raise ConfigError(f"{name} must be positive, got {w}")
        if len(self.volume_channels) != 3 or min(self.volume_channels) < 1:
            raise ConfigError(f"volume_channels needs three positive widths, got {self.volume_channels}")
        if self.use_se and min(self.volume_channels) * self.expand_ratio < self.se_reduction:
            raise ConfigError("expanded volume channels smaller than the SE reduction ratio")
        if self.blocks_per_scale < 1 or self.expand_ratio < 1:
            raise ConfigError("blocks_per_scale and expand_ratio must be >= 1")
        if self.corr_radius < 0:
            raise ConfigError("corr_radius must be >= 0")
        if self.upsample_factor != 4:
            raise ConfigError("only the x4 upsampling factor is supported")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 4
    max_lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    total_steps: int = 200_000
    warmup_frac: float = 0.05
    lr_floor_div: float = 25.0
    gamma: float = 0.9
    seed: int = 0
    train_manifest: str | None = None
    val_manifest: str | None = None
    checkpoint_dir: str = "runs/default"
    checkpoint_every: int = 1000
    log_every: int = 50
    # distillation: also supervise with sparse gt where available
    mix_sparse_gt: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 < self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in (0, 1)")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["volume_channels"] = list(d["model"]["volume_channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            mknown = {f.name for f in dataclasses.fields(ModelConfig)}
            bad = set(d["model"]) - mknown
            if bad:
                raise ConfigError(f"unknown model config keys: {sorted(bad)}")
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def config_hash(cfg) -> str:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dataclasses.asdict(cfg)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
