"""Pretraining loop: TCL + beta * CIR, SGD on the online encoder, EMA on the
momentum encoder, checkpoints and a JSONL metrics log."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .cir import MemoryQueue, cir_step
from .config import CLPConfig, from_dict, save_config
from .data import (AugmentationPolicy, VideoManifest, apply_augment, sample_augment_params,
                   sample_cir_frames, sample_sequence, split_rng, to_tensor)
from .encoder import EncoderConfig, EncoderPair, momentum_update, read_checkpoint, save_checkpoint
from .errors import ConfigError, NumericalError
from .tcl import WeightSchedule, tcl_loss

logger = logging.getLogger(__name__)

# rng stream tags, so every random draw is a pure function of (seed, step, ...)
_ORDER, _VIDEO, _SPLIT = 0, 1, 2


def total_loss(l_tcl, l_cir, beta: float, batch_ids=()):
    """l_tcl + beta * l_cir; aborts on a non-finite term."""
    for name, value in (("l_tcl", l_tcl), ("l_cir", l_cir)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite {name} = {v}", batch_ids)
    return l_tcl + beta * l_cir


@dataclass
class Batch:
    sequences: Optional[torch.Tensor]   # B x J x C x H x W
    cir_q: Optional[torch.Tensor]       # N x C x H x W, full augmentation
    cir_k: Optional[torch.Tensor]       # N x C x H x W, photometric copy of the same frames
    cir_ids: list
    video_ids: list
    cir_subjects: list = field(default_factory=list)


def steps_per_epoch(num_videos: int, batch_sequences: int) -> int:
    return max(1, math.ceil(num_videos / batch_sequences))


def make_batch(manifests: Sequence[VideoManifest], cfg: CLPConfig, step: int) -> Batch:
    """Batch for ``step``: one sequence and L CIR frames per selected video.

    Videos are visited in a per-epoch permutation; each sequence shares one
    augmentation draw across its frames so temporal order is the only signal.
    """
    seed, B = cfg.train.seed, cfg.train.batch_sequences
    spe = steps_per_epoch(len(manifests), B)
    epoch, offset = divmod(step, spe)
    order = split_rng(seed, _ORDER, epoch).permutation(len(manifests))
    chosen = order[offset * B:(offset + 1) * B]
    size = cfg.data.image_size
    policy = AugmentationPolicy.from_config(cfg.data)
    photometric = policy.photometric()
    seqs, qs, ks, cir_ids, cir_subjects, vids = [], [], [], [], [], []
    for vi in chosen:
        m = manifests[int(vi)]
        rng = split_rng(seed, _VIDEO, step, int(vi))
        vids.append(m.video_id)
        if cfg.tcl.enabled:
            seq = sample_sequence(m, cfg.data.seq_len, cfg.data.stride, rng, image_size=None)
            x = to_tensor(seq.frames)
            params = sample_augment_params(policy, x.shape[-2], x.shape[-1], rng)
            seqs.append(apply_augment(x, params, size))
        if cfg.cir.enabled:
            idx = sample_cir_frames(m, cfg.data.cir_frames_per_video, rng)
            frames = to_tensor(m.load_frames(idx))
            for f in frames:
                qs.append(apply_augment(f, sample_augment_params(policy, f.shape[-2], f.shape[-1], rng), size))
                ks.append(apply_augment(f, sample_augment_params(photometric, f.shape[-2], f.shape[-1], rng), size))
                cir_ids.append(m.video_id)
                cir_subjects.append(m.subject_id)
    return Batch(torch.stack(seqs) if seqs else None, torch.stack(qs) if qs else None,
                 torch.stack(ks) if ks else None, cir_ids, vids, cir_subjects)


@dataclass
class TrainState:
    config: CLPConfig
    pair: EncoderPair
    queue: MemoryQueue
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    total_steps: int
    step: int = 0
    running: dict = field(default_factory=lambda: {"l_tcl": 0.0, "l_cir": 0.0, "l_tot": 0.0})

    def state_dict(self) -> dict:
        return {"step": self.step, "total_steps": self.total_steps, "running": dict(self.running),
                "optimizer": self.optimizer.state_dict(), "scheduler": self.scheduler.state_dict(),
                "queue": self.queue.state_dict(), "torch_rng": torch.get_rng_state()}


def _make_optimizer(cfg: CLPConfig, params):
    t = cfg.train
    if t.learning_rate <= 0:
        raise ConfigError("train.learning_rate must be positive")
    if t.optimizer == "sgd":
        return torch.optim.SGD(params, lr=t.learning_rate, momentum=t.momentum, weight_decay=t.weight_decay)
    if t.optimizer == "adam":
        return torch.optim.Adam(params, lr=t.learning_rate, weight_decay=t.weight_decay)
    raise ConfigError(f"unknown optimizer {t.optimizer!r}")


def _make_scheduler(cfg: CLPConfig, optimizer, total_steps: int):
    if cfg.train.lr_schedule == "cosine":
        fn = lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / max(total_steps, 1)))
    elif cfg.train.lr_schedule == "constant":
        fn = lambda s: 1.0
    else:
        raise ConfigError(f"unknown lr schedule {cfg.train.lr_schedule!r}")
    return torch.optim.lr_scheduler.LambdaLR(optimizer, fn)


def planned_steps(cfg: CLPConfig, num_videos: int) -> int:
    if cfg.train.max_steps > 0:
        return cfg.train.max_steps
    return cfg.train.epochs * steps_per_epoch(num_videos, cfg.train.batch_sequences)


def init_state(cfg: CLPConfig, num_videos: int, pair: Optional[EncoderPair] = None) -> TrainState:
    if cfg.train.beta < 0:
        raise ConfigError("train.beta must be non-negative")
    if not (cfg.tcl.enabled or cfg.cir.enabled):
        raise ConfigError("both TCL and CIR are disabled; nothing to train")
    if cfg.tcl.seq_len != cfg.data.seq_len:
        raise ConfigError(f"tcl.seq_len={cfg.tcl.seq_len} disagrees with data.seq_len={cfg.data.seq_len}")
    WeightSchedule(cfg.tcl.weight_schedule)
    torch.manual_seed(cfg.train.seed)
    if pair is None:
        pair = EncoderPair(EncoderConfig.from_section(cfg.encoder), cfg.train.ema_momentum, cfg.data.image_size)
    pair.train()
    queue = MemoryQueue(cfg.cir.memory_size, cfg.encoder.head_out)
    optimizer = _make_optimizer(cfg, [p for p in pair.online.parameters() if p.requires_grad])
    total = planned_steps(cfg, num_videos)
    return TrainState(cfg, pair, queue, optimizer, _make_scheduler(cfg, optimizer, total), total)


def train_step(state: TrainState, batch: Batch) -> dict:
    """One optimizer step plus one EMA update; returns the step's metrics row."""
    cfg, pair = state.config, state.pair
    dtype = next(pair.online.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    l_tcl, l_cir = zero, zero
    if cfg.tcl.enabled:
        B, J = batch.sequences.shape[:2]
        emb = pair.online(batch.sequences.flatten(0, 1).to(dtype), "tcl").view(B, J, -1)
        l_tcl = tcl_loss(emb, cfg.tcl.weight_schedule, cfg.tcl.margin)
    if cfg.cir.enabled:
        rng = split_rng(cfg.train.seed, _SPLIT, state.step)
        res = cir_step(batch.cir_q.to(dtype), batch.cir_k.to(dtype), pair, state.queue, cfg.cir, rng,
                       batch.cir_ids, subject_ids=batch.cir_subjects)
        l_cir = res.loss
    loss = total_loss(l_tcl, l_cir, cfg.train.beta, batch.video_ids)
    state.optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    state.optimizer.step()
    state.scheduler.step()
    momentum_update(pair)
    state.step += 1
    row = {"step": state.step, "l_tcl": float(l_tcl.detach()), "l_cir": float(l_cir.detach()),
           "l_tot": float(loss.detach()),
           "queue_fill": int(state.queue.filled)}
    for key in state.running:
        state.running[key] = 0.99 * state.running[key] + 0.01 * row[key] if state.step > 1 else row[key]
    return row


def save_state(state: TrainState, path) -> Path:
    return save_checkpoint(path, state.pair, state.step, state.config.to_dict(),
                           extra={"trainer": state.state_dict(), "code_version": __version__})


def restore_state(path, num_videos: int, config: Optional[CLPConfig] = None) -> TrainState:
    from .encoder import load_checkpoint
    pair, payload = load_checkpoint(path)
    cfg = config or from_dict(payload["config"])
    state = init_state(cfg, num_videos, pair=pair)
    trainer = payload["trainer"]
    state.optimizer.load_state_dict(trainer["optimizer"])
    state.scheduler.load_state_dict(trainer["scheduler"])
    state.queue = MemoryQueue.from_state_dict(trainer["queue"])
    state.step, state.total_steps = trainer["step"], trainer["total_steps"]
    state.running = dict(trainer["running"])
    torch.set_rng_state(trainer["torch_rng"])
    return state


def pretrain(cfg: CLPConfig, manifests: Sequence[VideoManifest], out_dir, resume=None,
             pair: Optional[EncoderPair] = None, progress: bool = False) -> Path:
    """Train for the configured steps; returns the final checkpoint path.

    Writes ``config.json``, ``metrics.jsonl`` (one row per step) and
    ``checkpoint.pt`` under ``out_dir``. An interrupt saves a checkpoint
    before propagating.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not manifests:
        raise ConfigError("no videos to train on")
    save_config(cfg, out / "config.json")
    (out / "run.json").write_text(json.dumps({"seed": cfg.train.seed, "code_version": __version__}) + "\n")
    if resume is not None:
        state = restore_state(resume, len(manifests), cfg)
    else:
        state = init_state(cfg, len(manifests), pair)
    metrics_path, ckpt = out / "metrics.jsonl", out / "checkpoint.pt"
    rows = []
    if resume is not None and metrics_path.exists():
        rows = [json.loads(l) for l in metrics_path.read_text().splitlines() if l.strip()]
        rows = [r for r in rows if r["step"] <= state.step]
    mode = "w"
    with open(metrics_path, mode) as log:
        for r in rows:
            log.write(json.dumps(r) + "\n")
        try:
            while state.step < state.total_steps:
                row = train_step(state, make_batch(manifests, cfg, state.step))
                log.write(json.dumps(row) + "\n")
                if progress and state.step % 50 == 0:
                    logger.info("step %d/%d l_tot=%.4f", state.step, state.total_steps, state.running["l_tot"])
                if cfg.train.checkpoint_every and state.step % cfg.train.checkpoint_every == 0:
                    log.flush()
                    save_state(state, ckpt)
        except KeyboardInterrupt:
            log.flush()
            save_state(state, ckpt)
            logger.warning("interrupted at step %d; checkpoint saved to %s", state.step, ckpt)
            raise
    return save_state(state, ckpt)
