"""Run configuration: nested dataclasses, file loading and dotted overrides.

Precedence is defaults < config file < ``key=value`` overrides. The resolved
config is what gets written next to every run's outputs.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class AugmentConfig:
    rotation_degrees: float = 10.0
    horizontal_flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    crop_scale: tuple = (0.8, 1.0)


@dataclass
class DataConfig:
    seq_len: int = 9
    stride: int = 2
    cir_frames_per_video: int = 2
    image_size: int = 224
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class EncoderSection:
    backbone: str = "resnet34"
    feature_dim: int = 512
    head_hidden: int = 256
    head_out: int = 128
    normalize_output: bool = True
    in_channels: int = 3
    width: int = 32


@dataclass
class TCLConfig:
    enabled: bool = True
    margin: float = 0.03
    weight_schedule: str = "inv_sqrt"
    seq_len: int = 9


@dataclass
class CIRConfig:
    enabled: bool = True
    memory_size: int = 65536
    dict_fraction: float = 0.5
    temperature: float = 0.07
    eq4_printed_variant: bool = False
    min_negatives: int = 256
    exclude_same_video: bool = False
    exclude_same_subject: bool = False


@dataclass
class TrainConfig:
    beta: float = 0.1
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    lr_schedule: str = "cosine"
    ema_momentum: float = 0.999
    batch_sequences: int = 16
    epochs: int = 200
    max_steps: int = 0
    seed: int = 0
    device_count: int = 1
    checkpoint_every: int = 1000


@dataclass
class ProbeConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    threshold: float = 0.5
    folds: int = 3
    update_norm_stats: bool = True
    tune_backbone_norm: bool = True
    max_pos_weight: float = 100.0


@dataclass
class CLPConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    tcl: TCLConfig = field(default_factory=TCLConfig)
    cir: CIRConfig = field(default_factory=CIRConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **overrides: Any) -> "CLPConfig":
        return apply_overrides(self, overrides)


def _coerce(value, template, key):
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(template, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(template):
            raise ConfigError(f"{key}: expected a {len(template)}-item list, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(template, str):
        return str(value)
    return value


def _merge(obj, values: dict, prefix=""):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, dotted + ".")
        else:
            setattr(obj, key, _coerce(value, current, dotted))


def merge_values(cfg: CLPConfig, values: dict) -> CLPConfig:
    """Copy of ``cfg`` with a nested mapping (as read from a config file) merged in."""
    out = from_dict(cfg.to_dict())
    _merge(out, values or {})
    return out


def from_dict(values: dict | None) -> CLPConfig:
    cfg = CLPConfig()
    if values:
        _merge(cfg, values)
    return cfg


def apply_overrides(cfg: CLPConfig, overrides) -> CLPConfig:
    """Return a copy of ``cfg`` with dotted overrides applied.

    ``overrides`` is a mapping ``{"tcl.margin": 0.05}`` or a list of
    ``"tcl.margin=0.05"`` strings; string values are parsed as YAML scalars.
    """
    cfg = from_dict(cfg.to_dict())
    if not isinstance(overrides, dict):
        parsed = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            parsed[key.strip()] = yaml.safe_load(raw)
        overrides = parsed
    for key, value in overrides.items():
        nested: Any = value
        for part in reversed(key.split(".")):
            nested = {part: nested}
        _merge(cfg, nested)
    return cfg


def load_config(path=None, overrides=()) -> CLPConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            values = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    return apply_overrides(from_dict(values), overrides)


def save_config(cfg: CLPConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def desk_config(**overrides) -> CLPConfig:
    """Defaults scaled down for the synthetic world on a single CPU."""
    cfg = CLPConfig()
    cfg.data.image_size = 32
    cfg.data.augment.rotation_degrees = 10.0
    cfg.encoder.backbone = "small_cnn"
    cfg.encoder.feature_dim = 64
    cfg.encoder.head_hidden = 64
    cfg.encoder.head_out = 32
    cfg.encoder.in_channels = 3
    cfg.cir.memory_size = 1024
    cfg.cir.min_negatives = 64
    cfg.train.batch_sequences = 16
    cfg.train.learning_rate = 0.05
    cfg.train.ema_momentum = 0.99
    cfg.train.epochs = 20
    cfg.train.checkpoint_every = 200
    cfg.probe.epochs = 100
    cfg.probe.learning_rate = 0.1
    return apply_overrides(cfg, overrides)
