"""Synthetic corpus: identities x smoothly evolving binary-with-intensity
latent states ("pseudo-AUs") rendered to small face-like images."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import VideoManifest, split_rng, write_image, write_manifests
from .errors import ConfigError
from .probe import LabelSet


@dataclass
class SynthConfig:
    num_identities: int = 24
    videos_per_identity: int = 2
    frames_per_video: int = 120
    latent_dim: int = 6
    identity_dim: int = 8
    image_size: int = 32
    noise_std: float = 0.03
    seed: int = 0
    # dynamics
    max_step: float = 0.08          # per-frame bound on |delta intensity|
    switch_prob: float = 0.04       # per-frame chance an AU changes its target level
    active_prob: float = 0.3        # chance a new target level is an activation
    active_threshold: float = 0.5
    # rendering
    au_amplitude: float = 0.35
    au_sigma: float = 2.2
    identity_strength: float = 1.0
    illumination_drift: float = 0.01

    def __post_init__(self):
        for name in ("num_identities", "videos_per_identity", "frames_per_video", "latent_dim",
                     "identity_dim", "image_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synth {name} must be positive")
        if self.noise_std < 0:
            raise ConfigError("synth noise_std must be non-negative")


@dataclass
class SynthCorpus:
    config: SynthConfig
    manifests: list
    latents: list          # per video: T x latent_dim intensities in [0, 1]
    identities: list       # per video identity index
    label_names: list

    @property
    def num_frames(self) -> int:
        return sum(len(m) for m in self.manifests)

    def labels(self, video: int) -> np.ndarray:
        return (self.latents[video] > self.config.active_threshold).astype(np.float32)

    def label_set(self, every: int = 1) -> LabelSet:
        """Frames (every ``every``-th per video) with their binary pseudo-AU labels."""
        imgs, tgts, subs = [], [], []
        for v, m in enumerate(self.manifests):
            idx = np.arange(0, len(m), every)
            imgs.append(m.images[idx])
            tgts.append(self.labels(v)[idx])
            subs += [m.subject_id] * len(idx)
        images = torch.from_numpy(np.concatenate(imgs).transpose(0, 3, 1, 2).copy())
        targets = torch.from_numpy(np.concatenate(tgts))
        return LabelSet(self.label_names, images, targets, torch.ones_like(targets, dtype=torch.bool),
                        np.asarray(subs))


# identity and AU layout ------------------------------------------------------

# AU centres in unit face coordinates (x right, y down), mirrored pairs share a label
_AU_LAYOUT = [
    [(-0.35, -0.45), (0.35, -0.45)],   # brow raiser
    [(-0.33, -0.2), (0.33, -0.2)],     # lid tightener
    [(-0.45, 0.15), (0.45, 0.15)],     # cheek raiser
    [(0.0, 0.05)],                     # nose wrinkler
    [(-0.3, 0.45), (0.3, 0.45)],       # lip corner
    [(0.0, 0.7)],                      # chin raiser
    [(-0.15, -0.5), (0.15, -0.5)],     # brow lowerer
    [(0.0, 0.45)],                     # lip press
]
_AU_SIGN = [1, -1, 1, -1, 1, -1, -1, 1]


def _smooth_field(rng, size, scale):
    """Low-frequency random texture via a few random cosines."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(6):
        fx, fy = rng.uniform(-scale, scale, 2)
        out += np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return out / 6


def _identity(cfg: SynthConfig, rng):
    s = cfg.identity_strength
    return {
        "tone": rng.uniform(0.35, 0.75, 3) * np.array([1.0, 0.85, 0.75]),
        "background": rng.uniform(0.1, 0.9, 3),
        "center": rng.uniform(-0.08, 0.08, 2) * s,
        "radius": rng.uniform(0.72, 0.88, 2),
        "texture": s * 0.12 * _smooth_field(rng, cfg.image_size, 3.0),
        "gain": rng.uniform(0.7, 1.3, cfg.latent_dim),
        "offsets": rng.uniform(-0.05, 0.05, (cfg.latent_dim, 2)) * s,
        "vec": rng.normal(size=cfg.identity_dim),
    }


def _trajectory(cfg: SynthConfig, T: int, rng) -> np.ndarray:
    K = cfg.latent_dim
    x = np.zeros((T, K))
    level = (rng.random(K) < cfg.active_prob) * rng.uniform(0.6, 1.0, K)
    cur = level * rng.random(K)
    for t in range(T):
        switch = rng.random(K) < cfg.switch_prob
        new = (rng.random(K) < cfg.active_prob) * rng.uniform(0.6, 1.0, K)
        level = np.where(switch, new, level)
        step = np.clip(level - cur, -cfg.max_step, cfg.max_step)
        jitter = rng.normal(0, cfg.max_step * 0.1, K)
        cur = np.clip(cur + np.clip(step + jitter, -cfg.max_step, cfg.max_step), 0.0, 1.0)
        x[t] = cur
    return x


def render_frames(cfg: SynthConfig, ident: dict, latents: np.ndarray, rng, illumination=None) -> np.ndarray:
    """Deterministic given (identity, latents, rng state). Returns T x S x S x 3."""
    S, T = cfg.image_size, latents.shape[0]
    yy, xx = (np.mgrid[0:S, 0:S] + 0.5) / S * 2 - 1
    cx, cy = ident["center"]
    rx, ry = ident["radius"]
    face = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) <= 1.0
    base = np.where(face[..., None], ident["tone"][None, None] + ident["texture"][..., None],
                    ident["background"][None, None])
    sig = cfg.au_sigma / S * 2
    blobs = np.zeros((cfg.latent_dim, S, S))
    for k in range(cfg.latent_dim):
        ox, oy = ident["offsets"][k]
        for px, py in _AU_LAYOUT[k % len(_AU_LAYOUT)]:
            bx, by = cx + px * rx + ox, cy + py * ry + oy
            blobs[k] += np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sig ** 2))
        blobs[k] *= _AU_SIGN[k % len(_AU_SIGN)] * ident["gain"][k] * cfg.au_amplitude
    au = np.einsum("tk,khw->thw", latents, blobs)
    frames = base[None] + au[..., None]
    if illumination is not None:
        frames = frames + illumination[:, None, None, None]
    if cfg.noise_std > 0:
        frames = frames + rng.normal(0, cfg.noise_std, frames.shape)
    return np.clip(frames, 0, 1).astype(np.float32)


def generate_corpus(cfg: SynthConfig, out_dir=None) -> SynthCorpus:
    """Render every video; with ``out_dir`` also write PNG frames, a manifest
    and a label file."""
    manifests, latents, idents = [], [], []
    for i in range(cfg.num_identities):
        ident = _identity(cfg, split_rng(cfg.seed, 0, i))
        for v in range(cfg.videos_per_identity):
            rng = split_rng(cfg.seed, 1, i, v)
            z = _trajectory(cfg, cfg.frames_per_video, rng)
            drift = np.cumsum(rng.normal(0, cfg.illumination_drift, cfg.frames_per_video))
            frames = render_frames(cfg, ident, z, rng, drift)
            vid = f"id{i:03d}_v{v:02d}"
            paths = [f"{vid}/{t:05d}.png" for t in range(cfg.frames_per_video)]
            manifests.append(VideoManifest(vid, f"id{i:03d}", paths, 25.0, (), frames))
            latents.append(z)
            idents.append(i)
    corpus = SynthCorpus(cfg, manifests, latents, idents, [f"AU{k + 1}" for k in range(cfg.latent_dim)])
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def write_corpus(corpus: SynthCorpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.jsonl", "w") as lab:
        for v, m in enumerate(corpus.manifests):
            (out / m.video_id).mkdir(exist_ok=True)
            y = corpus.labels(v)
            for t, rel in enumerate(m.frame_paths):
                write_image(out / rel, m.images[t])
                rec = {"image": rel, "subject_id": m.subject_id,
                       "labels": {n: int(y[t, k]) for k, n in enumerate(corpus.label_names)}}
                lab.write(json.dumps(rec) + "\n")
    write_manifests(corpus.manifests, out / "manifest.jsonl")
    (out / "synth_config.json").write_text(json.dumps(asdict(corpus.config), indent=2) + "\n")
    return out


def cross_identity_pairs(corpus: SynthCorpus, tolerance: float, max_pairs: Optional[int] = None,
                         every: int = 1, rng=None) -> list:
    """Frame pairs ((video, t), (video', t')) from different identities whose
    latent states differ by less than ``tolerance`` (max-abs difference)."""
    keys, states, ids = [], [], []
    for v, z in enumerate(corpus.latents):
        for t in range(0, len(z), every):
            keys.append((v, t))
            states.append(z[t])
            ids.append(corpus.identities[v])
    states, ids = np.asarray(states), np.asarray(ids)
    pairs = []
    for a in range(len(keys)):
        diff = np.abs(states[a + 1:] - states[a]).max(axis=1)
        hit = np.flatnonzero((diff < tolerance) & (ids[a + 1:] != ids[a])) + a + 1
        pairs += [(keys[a], keys[b]) for b in hit]
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = rng or np.random.default_rng(0)
        pairs = [pairs[i] for i in np.sort(rng.choice(len(pairs), max_pairs, replace=False))]
    return pairs


def cross_identity_similarity(encoder, corpus: SynthCorpus, tolerance: float = 0.1, every: int = 4,
                              max_pairs: Optional[int] = 3000) -> float:
    """Mean cosine between representations of same-state frames from different
    identities.

    Features come from ``encoder`` (the frozen backbone used for probing) and
    are centred on the mean over the sampled frames before the cosine, so a
    shared offset does not count as agreement.
    """
    from .probe import extract_features
    index, images = {}, []
    for v, m in enumerate(corpus.manifests):
        for t in range(0, len(m), every):
            index[(v, t)] = len(images)
            images.append(m.images[t])
    x = torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy())
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        h = extract_features(encoder, x).double()
    encoder.train(was_training)
    h = h - h.mean(0)
    h = h / h.norm(dim=1, keepdim=True).clamp_min(1e-12)
    pairs = cross_identity_pairs(corpus, tolerance, max_pairs, every)
    if not pairs:
        raise ConfigError(f"no cross-identity pairs within tolerance {tolerance}")
    a = torch.tensor([index[p] for p, _ in pairs])
    b = torch.tensor([index[q] for _, q in pairs])
    return float((h[a] * h[b]).sum(1).mean())
