"""Run configuration: network shape, loss weights, noise schedule, optimiser.

Configs round-trip through plain dicts so they can live in JSON/YAML run
files and inside checkpoints. Unknown or ill-typed entries raise
:class:`ConfigError` carrying the dotted field path.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

__all__ = [
    "BackboneConfig",
    "LossWeights",
    "ScheduleConfig",
    "TrainConfig",
    "full_scale_config",
    "load_config",
    "save_config",
]


@dataclass(frozen=True)
class BackboneConfig:
    spatial_dims: int = 2
    levels: int = 3
    base_channels: int = 8
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 32
    groupnorm_groups: int = 4
    # False builds the ablation without feature-wise guidance: the registration
    # decoder ignores diffusion features and a single head reads the finest level.
    use_fdg: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.spatial_dims not in (2, 3):
            raise ConfigError(f"must be 2 or 3, got {self.spatial_dims}", "backbone.spatial_dims")
        if self.levels < 2:
            raise ConfigError(f"need at least 2 levels, got {self.levels}", "backbone.levels")
        if len(self.channel_multipliers) != self.levels:
            raise ConfigError(
                f"{len(self.channel_multipliers)} multipliers for {self.levels} levels",
                "backbone.channel_multipliers",
            )
        for i, ch in enumerate(self.channels):
            if ch % self.groupnorm_groups:
                raise ConfigError(
                    f"level width {ch} not divisible by {self.groupnorm_groups} groups",
                    f"backbone.channel_multipliers[{i}]",
                )
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError(f"must be an even number >= 2, got {self.time_embed_dim}", "backbone.time_embed_dim")

    @property
    def channels(self) -> tuple[int, ...]:
        """Channel widths from the finest (input-resolution) level to the deepest."""
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    def check_extent(self, shape) -> None:
        shape = tuple(shape)
        if len(shape) != self.spatial_dims:
            raise ConfigError(f"expected {self.spatial_dims} spatial axes, got extent {shape}", "backbone.spatial_dims")
        factor = 2 ** (self.levels - 1)
        if any(n % factor for n in shape):
            raise ConfigError(f"extent {shape} not divisible by {factor}", "backbone.levels")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 20.0
    lambda_phi: float = 20.0
    gamma: float = 1.0
    ncc_window: int = 9

    def __post_init__(self):
        for name in ("lam", "lambda_phi", "gamma"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", f"loss.{_external(name)}")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ConfigError(f"must be odd and >= 3, got {self.ncc_window}", "loss.ncc_window")


@dataclass(frozen=True)
class ScheduleConfig:
    beta_start: float = 1e-6
    beta_end: float = 1e-2
    num_steps: int = 2000

    def __post_init__(self):
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({self.beta_start}, {self.beta_end})", "schedule")
        if self.num_steps < 1:
            raise ConfigError(f"must be >= 1, got {self.num_steps}", "schedule.num_steps")


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    learning_rate: float = 2e-4
    epochs: int = 300
    batch_size: int = 1
    seed: int = 0
    grad_clip: float = 1.0
    # 0 disables step-count limits; otherwise training stops after this many steps.
    max_steps: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"must be > 0, got {self.learning_rate}", "learning_rate")
        if self.epochs < 0:
            raise ConfigError(f"must be >= 0, got {self.epochs}", "epochs")
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", "batch_size")
        if self.max_steps < 0:
            raise ConfigError(f"must be >= 0, got {self.max_steps}", "max_steps")
        if not self.grad_clip > 0:
            raise ConfigError(f"must be > 0, got {self.grad_clip}", "grad_clip")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["backbone"]["channel_multipliers"] = list(self.backbone.channel_multipliers)
        out["loss"] = {_external(k): v for k, v in out["loss"].items()}
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        nested = {}
        for key, sub_cls in (("backbone", BackboneConfig), ("loss", LossWeights), ("schedule", ScheduleConfig)):
            sub = data.pop(key, {}) or {}
            if key == "loss":
                sub = {_internal(k): v for k, v in sub.items()}
            nested[key] = _build(sub_cls, sub, key)
        top = _build(cls, data, None, extra=nested)
        return top

    def replace(self, **changes) -> "TrainConfig":
        """Copy with overrides; dotted keys (``loss.gamma``) reach nested configs."""
        data = self.to_dict()
        for key, value in changes.items():
            parts = key.replace("__", ".").split(".")
            target = data
            for p in parts[:-1]:
                if p not in target or not isinstance(target[p], dict):
                    raise ConfigError("unknown config section", key)
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError("unknown config field", key)
            target[parts[-1]] = value
        return TrainConfig.from_dict(data)


def _external(name: str) -> str:
    return "lambda" if name == "lam" else name


def _internal(name: str) -> str:
    return "lam" if name == "lambda" else name


def _build(cls, data, prefix, extra=None):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(extra or {})
    for key, value in data.items():
        path = f"{prefix}.{_external(key)}" if prefix else key
        if key not in names:
            raise ConfigError("unknown config field", path)
        default = getattr(cls(), key) if key not in kwargs else None
        try:
            kwargs[key] = _coerce(value, default)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value {value!r} ({exc})", path) from None
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), prefix) from None


def _coerce(value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError("expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or float(value) != int(value):
            raise TypeError("expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise TypeError("expected a number")
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value)
    return value


def full_scale_config() -> TrainConfig:
    """The full-size 3D setting (128x128x32 volumes, 700 epochs). Not used in tests."""
    return TrainConfig(
        backbone=BackboneConfig(
            spatial_dims=3,
            levels=4,
            base_channels=32,
            channel_multipliers=(1, 2, 4, 8),
            time_embed_dim=128,
            groupnorm_groups=8,
        ),
        loss=LossWeights(ncc_window=9),
        epochs=700,
    )


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping", str(path))
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    path = Path(path)
    data = cfg.to_dict()
    if path.suffix in (".yaml", ".yml"):
        path.write_text(yaml.safe_dump(data, sort_keys=False))
    else:
        path.write_text(json.dumps(data, indent=2) + "\n")
