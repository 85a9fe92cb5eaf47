"""Cross-identity reconstruction: memory queue, dictionary/negative split,
soft nearest-neighbour reconstruction and its contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import EmbeddingBatch, EncoderPair, encode
from .errors import ConfigError, ContractError, QueueWarmupError


class MemoryQueue:
    """Fixed-capacity ring buffer of target-encoder embeddings.

    Storage slots ``0..filled-1`` are always the live elements; once full the
    write cursor marks the oldest one.
    """

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity <= 0 or dim <= 0:
            raise ConfigError("queue capacity and dimension must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.vectors = torch.zeros(self.capacity, self.dim, dtype=dtype)
        self.source_ids = np.empty(self.capacity, dtype=object)
        self.subject_ids = np.empty(self.capacity, dtype=object)
        self.write_cursor = 0
        self.filled = 0

    def __len__(self):
        return self.filled

    @torch.no_grad()
    def enqueue(self, batch, source_ids=None, subject_ids=None) -> "MemoryQueue":
        vectors = batch.vectors if isinstance(batch, EmbeddingBatch) else batch
        vectors = vectors.detach().to(self.vectors.dtype)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ContractError(f"queue holds {self.dim}-d vectors, got shape {tuple(vectors.shape)}")
        n = vectors.shape[0]
        if n > self.capacity:
            raise ContractError(f"batch of {n} exceeds queue capacity {self.capacity}")
        norms = vectors.norm(dim=1)
        if n and torch.any((norms - 1).abs() > 1e-4):
            raise ContractError("queue elements must be L2-normalized")
        ids = np.empty(n, dtype=object)
        ids[:] = list(source_ids) if source_ids is not None else [None] * n
        subs = np.empty(n, dtype=object)
        subs[:] = list(subject_ids) if subject_ids is not None else [None] * n
        slots = (self.write_cursor + np.arange(n)) % self.capacity
        self.vectors[torch.from_numpy(slots)] = vectors
        self.source_ids[slots] = ids
        self.subject_ids[slots] = subs
        self.write_cursor = int((self.write_cursor + n) % self.capacity)
        self.filled = min(self.capacity, self.filled + n)
        return self

    def order(self) -> np.ndarray:
        """Storage slots of live elements, oldest first."""
        if self.filled < self.capacity:
            return np.arange(self.filled)
        return (self.write_cursor + np.arange(self.capacity)) % self.capacity

    def snapshot(self) -> tuple:
        idx = self.order()
        return self.vectors[torch.from_numpy(idx)].clone(), self.source_ids[idx].copy()

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "vectors": self.vectors.clone(),
                "source_ids": list(self.source_ids), "subject_ids": list(self.subject_ids),
                "write_cursor": self.write_cursor,
                "filled": self.filled}

    @classmethod
    def from_state_dict(cls, state) -> "MemoryQueue":
        q = cls(state["capacity"], state["dim"], state["vectors"].dtype)
        q.vectors.copy_(state["vectors"])
        q.source_ids[:] = state["source_ids"]
        q.subject_ids[:] = state.get("subject_ids", [None] * q.capacity)
        q.write_cursor, q.filled = int(state["write_cursor"]), int(state["filled"])
        return q


@dataclass
class QueueSplit:
    C: torch.Tensor
    C_bar: torch.Tensor
    C_ids: np.ndarray
    C_bar_ids: np.ndarray
    C_slots: np.ndarray
    C_bar_slots: np.ndarray
    C_subjects: np.ndarray


def split_queue(queue: MemoryQueue, dict_size: int, rng: np.random.Generator,
                min_negatives: int = 1) -> QueueSplit:
    """Uniform random partition of the live elements into dictionary and negatives."""
    if dict_size <= 0:
        raise ConfigError("dictionary size must be positive")
    required = dict_size + max(1, min_negatives)
    if queue.filled < required:
        raise QueueWarmupError(queue.filled, required)
    perm = rng.permutation(queue.filled)
    c_slots, cbar_slots = np.sort(perm[:dict_size]), np.sort(perm[dict_size:])
    return QueueSplit(queue.vectors[torch.from_numpy(c_slots)], queue.vectors[torch.from_numpy(cbar_slots)],
                      queue.source_ids[c_slots], queue.source_ids[cbar_slots], c_slots, cbar_slots,
                      queue.subject_ids[c_slots])


def reconstruct(q: torch.Tensor, C: torch.Tensor, temperature: float, mask: Optional[torch.Tensor] = None):
    """Softmax-of-cosine coefficients over the dictionary and the resulting
    convex combination. The dictionary is treated as a constant.

    ``mask`` (N x |C|, True = excluded) drops dictionary entries per query,
    e.g. those from the query's own video.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    C = C.detach()
    logits = F.normalize(q, dim=1) @ F.normalize(C, dim=1).T / temperature
    if mask is not None:
        # a query whose every entry is masked falls back to the full dictionary
        mask = mask & ~mask.all(dim=1, keepdim=True)
        logits = logits.masked_fill(mask, float("-inf"))
    alpha = torch.softmax(logits, dim=1)
    return alpha, alpha @ C


def cir_loss(q_hat: torch.Tensor, k: torch.Tensor, C_bar: torch.Tensor, temperature: float,
             q: Optional[torch.Tensor] = None, printed_variant: bool = False) -> torch.Tensor:
    """InfoNCE of the reconstruction against its augmented-view key, with the
    negative pool as distractors; mean over rows.

    With ``printed_variant`` the negative logits use the raw query ``q``
    instead of the reconstruction.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if C_bar.shape[0] == 0:
        raise ConfigError("the negative pool is empty")
    if printed_variant and q is None:
        raise ContractError("the printed variant needs the raw query q")
    qh = F.normalize(q_hat, dim=1)
    pos = (qh * F.normalize(k.detach(), dim=1)).sum(dim=1, keepdim=True)
    anchor = F.normalize(q, dim=1) if printed_variant else qh
    neg = anchor @ F.normalize(C_bar.detach(), dim=1).T
    logits = torch.cat([pos, neg], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


@dataclass
class CirStepResult:
    loss: torch.Tensor
    queue: MemoryQueue
    warmup: bool
    alpha: Optional[torch.Tensor] = None
    q_hat: Optional[torch.Tensor] = None


def cir_step(frames_q: torch.Tensor, frames_k: torch.Tensor, pair: EncoderPair, queue: MemoryQueue,
             cfg, rng: np.random.Generator, source_ids=None, extra_frames: Optional[torch.Tensor] = None,
             extra_ids=None, subject_ids=None) -> CirStepResult:
    """One CIR forward pass.

    ``frames_k`` are photometric augmentations of ``frames_q``. The target keys
    (and embeddings of ``extra_frames``) are enqueued only after the loss is
    formed, so a key never appears among its own negatives. During warm-up
    the loss is a zero that still carries a graph.

    With ``cfg.exclude_same_video`` (or ``exclude_same_subject``) a query's
    reconstruction ignores dictionary entries from its own video (subject).
    """
    n = frames_q.shape[0]
    source_ids = list(source_ids) if source_ids is not None else [None] * n
    subject_ids = list(subject_ids) if subject_ids is not None else [None] * n
    q = encode(pair, frames_q, "cir", "online").vectors
    k = encode(pair, frames_k, "cir", "target").vectors
    dict_size = int(cfg.memory_size * cfg.dict_fraction)
    try:
        split = split_queue(queue, dict_size, rng, cfg.min_negatives)
    except QueueWarmupError:
        loss, alpha, q_hat, warm = q.sum() * 0.0, None, None, True
    else:
        mask = None
        if cfg.exclude_same_video:
            ids = np.asarray(source_ids, dtype=object)
            mask = torch.from_numpy(ids[:, None] == split.C_ids[None, :])
        if getattr(cfg, "exclude_same_subject", False):
            subs = np.asarray(subject_ids, dtype=object)
            same = torch.from_numpy((subs[:, None] == split.C_subjects[None, :]) & (subs[:, None] != None))
            mask = same if mask is None else mask | same
        alpha, q_hat = reconstruct(q, split.C, cfg.temperature, mask)
        loss = cir_loss(q_hat, k, split.C_bar, cfg.temperature, q=q, printed_variant=cfg.eq4_printed_variant)
        warm = False
    queue.enqueue(k, source_ids, subject_ids)
    if extra_frames is not None and len(extra_frames):
        queue.enqueue(encode(pair, extra_frames, "cir", "target").vectors, extra_ids)
    return CirStepResult(loss, queue, warm, alpha, q_hat)
