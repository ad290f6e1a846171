"""Run configuration: one JSON document holding every tunable.

Defaults reproduce the published training policy where it is stated
(Adam at 1e-4, decay 0.95 every 5 epochs, 50 epochs, batches of 64,
alpha 0.2, augmentation probability 0.8).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .backbone import BackboneConfig
from .frontend import FrontendConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Stage1Config:
    alpha: float = 0.2
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-4
    lr_gamma: float = 0.95
    lr_step_epochs: int = 5
    cos_eps: float = 1e-8
    sim_clamp: float = 1e-7
    grad_clip: float = 5.0
    micro_batch: int = 8
    val_augment: bool = False
    init_checkpoint: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.micro_batch < 1:
            raise ValueError("lr, batch_size, epochs and micro_batch must be positive")
        if self.cos_eps <= 0:
            raise ValueError("cos_eps must be positive")


@dataclass(frozen=True)
class Stage2Config:
    class_weights: tuple[float, float] = (0.9, 0.1)
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-4
    lr_gamma: float = 0.95
    lr_step_epochs: int = 5
    hidden: int = 128
    freeze_backbone: bool = True
    shuffle: bool = False
    micro_batch: int = 8
    val_augment: bool = False

    def __post_init__(self):
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be two positive numbers (bonafide, spoof)")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.micro_batch < 1:
            raise ValueError("lr, batch_size, epochs and micro_batch must be positive")


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    output_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def __post_init__(self):
        if self.backbone.n_mels != self.frontend.n_mels:
            raise ValueError("backbone.n_mels must equal frontend.n_mels")
        if self.backbone.n_frames != self.frontend.n_frames:
            raise ValueError("backbone.n_frames must equal frontend.n_frames")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.augment.time_mask_max > self.frontend.n_frames:
            raise ValueError("augment.time_mask_max exceeds frontend.n_frames")
        if self.augment.freq_mask_max > self.frontend.n_mels:
            raise ValueError("augment.freq_mask_max exceeds frontend.n_mels")

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            return _build(cls, raw, "")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(where + k for k in unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}{name}: expected a list")
            value = tuple(value)
            if current and all(isinstance(v, float) for v in current):
                value = tuple(float(v) for v in value)
            kwargs[name] = value
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}{name}: expected true/false")
            kwargs[name] = value
        elif isinstance(current, int) and not isinstance(value, bool) and isinstance(value, int):
            kwargs[name] = value
        elif (isinstance(current, float) and isinstance(value, (int, float))
              and not isinstance(value, bool)):
            kwargs[name] = float(value)
        elif current is None or isinstance(current, str):
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{where}{name}: expected a string or null")
            kwargs[name] = value
        else:
            raise ConfigError(f"{where}{name}: expected {type(current).__name__}, got {value!r}")
    return cls(**kwargs)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` strings; values parse as JSON, else as plain strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        node[parts[-1]] = value
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if overrides:
        raw = apply_overrides(raw, overrides)
    return RunConfig.from_dict(raw)
