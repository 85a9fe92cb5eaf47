"""Video manifests, stride sampling of frame sequences, and augmentation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image

from .errors import ConfigError, ManifestFormatError, NotEnoughFramesError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class VideoManifest:
    """One video of one subject.

    ``gaps`` holds positions ``k`` into ``frame_paths`` where frame ``k`` does
    not follow frame ``k - 1`` in time (a dropped or undetected frame).
    ``images`` optionally holds the decoded frames (T x H x W x C) so that
    in-memory corpora skip disk reads.
    """

    video_id: str
    subject_id: str
    frame_paths: list
    fps: float = 25.0
    gaps: tuple = ()
    images: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.frame_paths) == 0:
            raise ValueError(f"video {self.video_id} has no frames")
        if self.images is not None and len(self.images) != len(self.frame_paths):
            raise ValueError("images and frame_paths disagree in length")
        self.gaps = tuple(sorted(set(int(g) for g in self.gaps if 0 < int(g) < len(self.frame_paths))))

    def __len__(self):
        return len(self.frame_paths)

    def load_frame(self, index: int, size: Optional[int] = None) -> np.ndarray:
        if self.images is not None:
            img = self.images[index]
            if size is not None and img.shape[0] != size:
                img = _resize(img, size)
            return img
        return read_image(self.frame_paths[index], size)

    def load_frames(self, indices, size: Optional[int] = None) -> np.ndarray:
        return np.stack([self.load_frame(int(i), size) for i in indices])

    def to_record(self, root=None) -> dict:
        frames = [str(p) for p in self.frame_paths]
        if root is not None:
            frames = [str(Path(p).relative_to(root)) if Path(p).is_absolute() else p for p in frames]
        return {"video_id": self.video_id, "subject_id": self.subject_id,
                "frames": frames, "gaps": list(self.gaps), "fps": self.fps}


@dataclass
class FrameSequence:
    video_id: str
    frame_indices: list
    stride: int
    frames: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.frame_indices)


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)
    t = TF.resize(t, [size, size], antialias=True)
    return t.permute(1, 2, 0).numpy()


@lru_cache(maxsize=65536)
def _read_cached(path: str, size: Optional[int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr.setflags(write=False)
    return arr


def read_image(path, size: Optional[int] = None) -> np.ndarray:
    """Decode an image file to float32 H x W x 3 in [0, 1]."""
    return _read_cached(str(path), size)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# manifests -------------------------------------------------------------------

def _manifest_file(root) -> Path:
    root = Path(root)
    return root / MANIFEST_NAME if root.is_dir() else root


def load_manifests(root, format: str = "jsonl", frame_root=None, check_files: bool = True) -> list:
    """Read line-delimited video records.

    ``root`` is either a manifest file or a directory holding ``manifest.jsonl``.
    Frame paths resolve against ``frame_root`` (default: the manifest's
    directory). Missing frame files are dropped and recorded as gaps; videos
    left with no frames are dropped and counted in a warning.
    """
    if format != "jsonl":
        raise ConfigError(f"unsupported manifest format {format!r}")
    path = _manifest_file(root)
    if not path.exists():
        raise FileNotFoundError(path)
    base = Path(frame_root) if frame_root is not None else path.parent
    manifests, dropped = [], 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestFormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestFormatError(path, lineno, "record is not an object")
            for key in ("video_id", "subject_id", "frames"):
                if key not in rec:
                    raise ManifestFormatError(path, lineno, f"missing field {key!r}")
            if not isinstance(rec["frames"], list):
                raise ManifestFormatError(path, lineno, "'frames' must be a list")
            declared = set(int(g) for g in rec.get("gaps", []))
            frames, gaps, pending_gap = [], [], False
            for i, rel in enumerate(rec["frames"]):
                full = base / rel
                if i in declared:
                    pending_gap = True
                if check_files and not full.exists():
                    pending_gap = True
                    continue
                if pending_gap and frames:
                    gaps.append(len(frames))
                pending_gap = False
                frames.append(str(full))
            if not frames:
                dropped += 1
                continue
            manifests.append(VideoManifest(str(rec["video_id"]), str(rec["subject_id"]), frames,
                                           fps=float(rec.get("fps", 25.0)), gaps=tuple(gaps)))
    if dropped:
        logger.warning("dropped %d video(s) with no decodable frames from %s", dropped, path)
    return manifests


def write_manifests(manifests: Sequence[VideoManifest], path, root=None) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for m in manifests:
            fh.write(json.dumps(m.to_record(root)) + "\n")
    return path


def load_au_labels(path) -> list:
    """Read per-image AU records ``{"image", "labels": {au: 0|1|null}}``.

    Unknown labels (``null``, ``"unknown"`` or absent) come back as ``None``.
    An optional ``subject_id`` field is kept for subject-independent folds.
    """
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestFormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if "image" not in rec or not isinstance(rec.get("labels"), dict):
                raise ManifestFormatError(path, lineno, "expected 'image' and a 'labels' object")
            labels = {}
            for name, value in rec["labels"].items():
                if value is None or value == "unknown":
                    labels[name] = None
                elif value in (0, 1):
                    labels[name] = int(value)
                else:
                    raise ManifestFormatError(path, lineno, f"label {name!r} must be 0, 1 or unknown")
            records.append({"image": rec["image"], "labels": labels,
                            "subject_id": rec.get("subject_id")})
    return records


def binarize_intensity(intensity, threshold: int = 2):
    """Intensity-coded AUs (0-5) to occurrence: active when intensity >= 2."""
    if intensity is None:
        return None
    return int(intensity >= threshold)


# sampling --------------------------------------------------------------------

def valid_starts(num_frames: int, length: int, stride: int, gaps=()) -> np.ndarray:
    span = (length - 1) * stride
    starts = np.arange(max(num_frames - span, 0))
    if len(starts) and gaps:
        # a start is valid iff no gap position lies in (start, start + span]
        g = np.asarray(sorted(gaps))
        first_after = np.searchsorted(g, starts, side="right")
        ok = (first_after >= len(g)) | (g[np.minimum(first_after, len(g) - 1)] > starts + span)
        starts = starts[ok]
    return starts


def sample_sequence(manifest: VideoManifest, length: int, stride: int, rng: np.random.Generator,
                    load: bool = True, image_size: Optional[int] = None) -> FrameSequence:
    if length < 1 or stride < 1:
        raise ConfigError("sequence length and stride must be positive")
    starts = valid_starts(len(manifest), length, stride, manifest.gaps)
    if len(starts) == 0:
        raise NotEnoughFramesError((length - 1) * stride + 1, len(manifest), "contiguous frames")
    start = int(starts[rng.integers(len(starts))])
    indices = list(range(start, start + (length - 1) * stride + 1, stride))
    frames = manifest.load_frames(indices, image_size) if load else None
    return FrameSequence(manifest.video_id, indices, stride, frames)


def sample_cir_frames(manifest: VideoManifest, count: int, rng: np.random.Generator) -> list:
    """Indices of ``count`` distinct frames drawn uniformly without replacement."""
    if count > len(manifest):
        raise NotEnoughFramesError(count, len(manifest))
    return [int(i) for i in rng.choice(len(manifest), size=count, replace=False)]


# augmentation ----------------------------------------------------------------

@dataclass
class AugmentationPolicy:
    rotation_degrees: float = 10.0
    horizontal_flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    crop_size: int = 224
    crop_scale: tuple = (0.8, 1.0)
    photometric_only: bool = False

    @classmethod
    def identity(cls, crop_size: int) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, crop_size, (1.0, 1.0), False)

    @classmethod
    def from_config(cls, data_cfg) -> "AugmentationPolicy":
        a = data_cfg.augment
        return cls(a.rotation_degrees, a.horizontal_flip_prob, a.brightness, a.contrast,
                   a.saturation, a.hue, data_cfg.image_size, tuple(a.crop_scale), False)

    def photometric(self) -> "AugmentationPolicy":
        return AugmentationPolicy(0.0, 0.0, self.brightness, self.contrast, self.saturation,
                                  self.hue, self.crop_size, (1.0, 1.0), True)


@dataclass
class AugmentParams:
    angle: float
    flip: bool
    crop: tuple  # top, left, height, width
    brightness: float
    contrast: float
    saturation: float
    hue: float
    order: tuple


def sample_augment_params(policy: AugmentationPolicy, height: int, width: int,
                          rng: np.random.Generator) -> AugmentParams:
    size = policy.crop_size
    if size > min(height, width):
        raise ConfigError(f"crop size {size} exceeds image size {height}x{width}")
    lo, hi = policy.crop_scale
    if not 0 < lo <= hi <= 1:
        raise ConfigError(f"invalid crop scale range {policy.crop_scale}")
    if policy.photometric_only:
        angle, flip, crop = 0.0, False, (0, 0, height, width)
    else:
        angle = float(rng.uniform(-policy.rotation_degrees, policy.rotation_degrees)) \
            if policy.rotation_degrees > 0 else 0.0
        flip = bool(rng.random() < policy.horizontal_flip_prob)
        scale = float(rng.uniform(lo, hi)) if hi > lo else lo
        side_h = max(1, int(round(height * math.sqrt(scale))))
        side_w = max(1, int(round(width * math.sqrt(scale))))
        top = int(rng.integers(0, height - side_h + 1))
        left = int(rng.integers(0, width - side_w + 1))
        crop = (top, left, side_h, side_w)

    def factor(r):
        return float(rng.uniform(max(0.0, 1 - r), 1 + r)) if r > 0 else 1.0

    brightness, contrast, saturation = factor(policy.brightness), factor(policy.contrast), factor(policy.saturation)
    hue = float(rng.uniform(-policy.hue, policy.hue)) if policy.hue > 0 else 0.0
    order = tuple(int(i) for i in rng.permutation(4))
    return AugmentParams(angle, flip, crop, brightness, contrast, saturation, hue, order)


def apply_augment(images, params: AugmentParams, size: int) -> torch.Tensor:
    """Apply one parameter draw to a C x H x W tensor or a stack of them."""
    x = images if isinstance(images, torch.Tensor) else to_tensor(images)
    x = x.float()
    if params.angle:
        x = TF.rotate(x, params.angle, interpolation=TF.InterpolationMode.BILINEAR)
    top, left, h, w = params.crop
    if (top, left, h, w) != (0, 0, x.shape[-2], x.shape[-1]) or h != size or w != size:
        x = TF.resized_crop(x, top, left, h, w, [size, size], antialias=True)
    if params.flip:
        x = TF.hflip(x)
    for op in params.order:
        if op == 0 and params.brightness != 1.0:
            x = TF.adjust_brightness(x, params.brightness)
        elif op == 1 and params.contrast != 1.0:
            x = TF.adjust_contrast(x, params.contrast)
        elif op == 2 and params.saturation != 1.0 and x.shape[-3] == 3:
            x = TF.adjust_saturation(x, params.saturation)
        elif op == 3 and params.hue != 0.0 and x.shape[-3] == 3:
            x = TF.adjust_hue(x, params.hue)
    return x.clamp_(0.0, 1.0)


def augment(image, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Augment one H x W x C image (or C x H x W tensor); returns C x H x W."""
    x = image if isinstance(image, torch.Tensor) else to_tensor(image)
    params = sample_augment_params(policy, x.shape[-2], x.shape[-1], rng)
    return apply_augment(x, params, policy.crop_size)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """H x W x C (or N x H x W x C) floats in [0, 1] to channels-first."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def split_rng(seed, *keys) -> np.random.Generator:
    """Independent stream for (seed, keys...), e.g. one per worker or step."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])
