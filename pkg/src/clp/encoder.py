"""Online encoder with TCL/CIR projection heads, its momentum twin, and
checkpoint I/O."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, DataError

CHECKPOINT_VERSION = 1
HEADS = ("tcl", "cir")
SOURCES = ("online", "target")
_NORM_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm, nn.LayerNorm)


@dataclass
class EncoderConfig:
    backbone: str = "resnet34"
    feature_dim: int = 512
    head_hidden: int = 256
    head_out: int = 128
    normalize_output: bool = True
    in_channels: int = 3
    width: int = 32

    def __post_init__(self):
        for name in ("feature_dim", "head_hidden", "head_out", "in_channels", "width"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")

    @classmethod
    def from_section(cls, section) -> "EncoderConfig":
        return cls(**asdict(section))


class SmallCNN(nn.Module):
    """Four conv-BN-ReLU stages with global average pooling; desk-scale stand-in
    for the residual backbone."""

    def __init__(self, in_channels=3, width=32, feature_dim=64):
        super().__init__()
        chans = [in_channels, width, width * 2, width * 2, feature_dim]
        layers = []
        for i in range(4):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=1 if i == 0 else 2, padding=1, bias=False),
                       nn.BatchNorm2d(chans[i + 1]), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)
        self.out_dim = feature_dim

    def forward(self, x):
        return self.features(x).mean(dim=(2, 3))


class MLPBackbone(nn.Module):
    def __init__(self, in_features, feature_dim=64, hidden=256):
        super().__init__()
        self.net = nn.Sequential(nn.Flatten(), nn.Linear(in_features, hidden, bias=False),
                                 nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, feature_dim, bias=False),
                                 nn.BatchNorm1d(feature_dim), nn.ReLU(inplace=True))
        self.out_dim = feature_dim

    def forward(self, x):
        return self.net(x)


def build_backbone(cfg: EncoderConfig, image_size: int = 224) -> nn.Module:
    name = cfg.backbone
    if name in ("resnet18", "resnet34"):
        import torchvision
        net = getattr(torchvision.models, name)(weights=None)
        if cfg.in_channels != 3:
            net.conv1 = nn.Conv2d(cfg.in_channels, 64, 7, 2, 3, bias=False)
        net.fc = nn.Identity() if cfg.feature_dim == 512 else nn.Linear(512, cfg.feature_dim)
        net.out_dim = cfg.feature_dim
        return net
    if name == "small_cnn":
        return SmallCNN(cfg.in_channels, cfg.width, cfg.feature_dim)
    if name == "mlp":
        return MLPBackbone(cfg.in_channels * image_size * image_size, cfg.feature_dim, cfg.width * 8)
    raise ContractError(f"unknown backbone {name!r}")


class ProjectionHead(nn.Sequential):
    def __init__(self, in_dim, hidden, out_dim):
        super().__init__(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


class OnlineEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, image_size: int = 224):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg, image_size)
        self.tcl_head = ProjectionHead(cfg.feature_dim, cfg.head_hidden, cfg.head_out)
        self.cir_head = ProjectionHead(cfg.feature_dim, cfg.head_hidden, cfg.head_out)

    def forward(self, x, head="cir"):
        h = self.backbone(x)
        z = self.tcl_head(h) if head == "tcl" else self.cir_head(h)
        return F.normalize(z, dim=1) if self.cfg.normalize_output else z


class MomentumEncoder(nn.Module):
    """Backbone + CIR head only; updated by EMA, never by gradients.

    Normalization running statistics are the target's own (it runs in train
    mode during pretraining), as with MoCo key encoders.
    """

    def __init__(self, online: OnlineEncoder):
        super().__init__()
        self.cfg = online.cfg
        self.backbone = copy.deepcopy(online.backbone)
        self.cir_head = copy.deepcopy(online.cir_head)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        z = self.cir_head(self.backbone(x))
        return F.normalize(z, dim=1) if self.cfg.normalize_output else z


@dataclass
class EmbeddingBatch:
    vectors: torch.Tensor
    head: str
    source: str
    normalized: bool

    def __len__(self):
        return self.vectors.shape[0]


class EncoderPair:
    """Online encoder ``w_q`` and its momentum copy ``w_k``."""

    def __init__(self, cfg: EncoderConfig, momentum: float = 0.999, image_size: int = 224,
                 online: Optional[OnlineEncoder] = None):
        if not 0.0 <= momentum <= 1.0:
            raise ContractError(f"momentum must lie in [0, 1], got {momentum}")
        self.cfg = cfg
        self.image_size = image_size
        self.online = online if online is not None else OnlineEncoder(cfg, image_size)
        self.target = MomentumEncoder(self.online)
        self.momentum = float(momentum)

    def shared_parameters(self):
        """(online, target) tensor pairs covered by the EMA: backbone + CIR head."""
        pairs = []
        for part in ("backbone", "cir_head"):
            on = dict(getattr(self.online, part).named_parameters())
            tg = dict(getattr(self.target, part).named_parameters())
            if on.keys() != tg.keys():
                raise ContractError(f"{part}: online and target parameter names differ")
            for name in on:
                if on[name].shape != tg[name].shape:
                    raise ContractError(f"{part}.{name}: shape {tuple(on[name].shape)} "
                                        f"vs {tuple(tg[name].shape)}")
                pairs.append((on[name], tg[name]))
        return pairs

    def train(self, mode=True):
        self.online.train(mode)
        self.target.train(mode)
        return self

    def eval(self):
        return self.train(False)


def encode(pair: EncoderPair, images: torch.Tensor, head: str = "cir", source: str = "online") -> EmbeddingBatch:
    if head not in HEADS or source not in SOURCES:
        raise ContractError(f"unknown head/source {head!r}/{source!r}")
    if head == "tcl" and source == "target":
        raise ContractError("the momentum encoder has no TCL head")
    if images.ndim != 4 or images.shape[1] != pair.cfg.in_channels:
        raise ContractError(f"expected N x {pair.cfg.in_channels} x H x W images, got {tuple(images.shape)}")
    if source == "online":
        z = pair.online(images, head)
    else:
        with torch.no_grad():
            z = pair.target(images)
    return EmbeddingBatch(z, head, source, pair.cfg.normalize_output)


@torch.no_grad()
def momentum_update(pair: EncoderPair) -> EncoderPair:
    """w_k <- rho * w_k + (1 - rho) * w_q for backbone and CIR head."""
    rho = pair.momentum
    for w_q, w_k in pair.shared_parameters():
        w_k.mul_(rho).add_(w_q.detach(), alpha=1.0 - rho)
    return pair


class FrozenEncoder(nn.Module):
    """Backbone with heads discarded; only normalization layers stay trainable."""

    def __init__(self, backbone: nn.Module, feature_dim: int, update_norm_stats: bool = True):
        super().__init__()
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.update_norm_stats = update_norm_stats
        for module in self.backbone.modules():
            is_norm = isinstance(module, _NORM_TYPES)
            for p in module.parameters(recurse=False):
                p.requires_grad_(is_norm)

    def norm_layers(self):
        return [m for m in self.backbone.modules() if isinstance(m, _NORM_TYPES)]

    def train(self, mode=True):
        super().train(mode)
        if mode and not self.update_norm_stats:
            for m in self.norm_layers():
                m.eval()
        return self

    def forward(self, x):
        return self.backbone(x)


def freeze_for_probe(online: OnlineEncoder, update_norm_stats: bool = True) -> FrozenEncoder:
    backbone = copy.deepcopy(online.backbone)
    return FrozenEncoder(backbone, online.cfg.feature_dim, update_norm_stats)


# checkpoints -------------------------------------------------------------------

def tensor_manifest(state_dict) -> dict:
    return {k: list(v.shape) for k, v in state_dict.items()}


def save_checkpoint(path, pair: EncoderPair, step: int, config: dict, extra: Optional[dict] = None) -> Path:
    """Write atomically: a crash mid-write never corrupts an existing file."""
    path = Path(path)
    online, target = pair.online.state_dict(), pair.target.state_dict()
    payload = {
        "format": "clp-checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "momentum": pair.momentum,
        "encoder": asdict(pair.cfg),
        "image_size": pair.image_size,
        "config": config,
        "online": online,
        "target": target,
        "manifest": {"online": tensor_manifest(online), "target": tensor_manifest(target)},
    }
    if extra:
        payload.update(extra)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != "clp-checkpoint":
        raise DataError(f"{path} is not a CLP checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    return payload


def load_checkpoint(path) -> tuple:
    """Returns (EncoderPair, payload)."""
    payload = read_checkpoint(path)
    cfg = EncoderConfig(**payload["encoder"])
    pair = EncoderPair(cfg, payload["momentum"], payload["image_size"])
    pair.online.load_state_dict(payload["online"])
    pair.target.load_state_dict(payload["target"])
    return pair, payload


def inspect_checkpoint(path) -> dict:
    payload = read_checkpoint(path)
    return {k: payload[k] for k in ("version", "step", "momentum", "encoder", "image_size", "manifest")}
