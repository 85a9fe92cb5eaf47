"""Temporal contrastive learning: fixed-anchor triplets over a frame sequence,
weighted by temporal offset, in both temporal directions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ContractError, NotEnoughFramesError

SCHEDULES = {
    "constant_1": lambda j: 1.0,
    "inv_sqrt": lambda j: 1.0 / math.sqrt(j),
    "inv_linear": lambda j: 1.0 / j,
    "exp_decay": lambda j: math.exp(-j),
}
# ablation-grid spellings
SCHEDULE_ALIASES = {"1": "constant_1", "1/sqrt(j)": "inv_sqrt", "1/j": "inv_linear", "exp(-j)": "exp_decay"}


@dataclass(frozen=True)
class WeightSchedule:
    kind: str = "inv_sqrt"

    def __post_init__(self):
        kind = SCHEDULE_ALIASES.get(self.kind, self.kind)
        if kind not in SCHEDULES:
            raise ConfigError(f"unknown weight schedule {self.kind!r}; choose from {sorted(SCHEDULES)}")
        object.__setattr__(self, "kind", kind)

    def __call__(self, j: int) -> float:
        """Weight of the triplet whose positive sits ``j`` steps from the anchor."""
        return SCHEDULES[self.kind](j)


@dataclass(frozen=True)
class TripletSet:
    anchor_index: int
    triplets: tuple  # ((positive, negative, weight), ...)
    direction: str
    margin: float = 0.03

    def __len__(self):
        return len(self.triplets)

    @property
    def positives(self):
        return [t[0] for t in self.triplets]

    @property
    def negatives(self):
        return [t[1] for t in self.triplets]

    @property
    def weights(self):
        return [t[2] for t in self.triplets]


def build_triplets(sequence_length: int, schedule="inv_sqrt", direction: str = "forward",
                   margin: float = 0.03) -> TripletSet:
    if sequence_length < 3:
        raise NotEnoughFramesError(3, sequence_length, "sequence frames for a triplet")
    if not isinstance(schedule, WeightSchedule):
        schedule = WeightSchedule(schedule)
    J = sequence_length
    if direction == "forward":
        triplets = tuple((t, t + 1, schedule(t)) for t in range(1, J - 1))
        anchor = 0
    elif direction == "reversed":
        triplets = tuple((J - 1 - t, J - 2 - t, schedule(t)) for t in range(1, J - 1))
        anchor = J - 1
    else:
        raise ConfigError(f"direction must be 'forward' or 'reversed', got {direction!r}")
    return TripletSet(anchor, triplets, direction, float(margin))


def _check_normalized(embeddings: torch.Tensor, tol: float = 1e-3):
    norms = embeddings.detach().norm(dim=-1)
    if torch.any((norms - 1).abs() > tol):
        raise ContractError(f"embeddings must be L2-normalized (row norms span "
                            f"{norms.min().item():.4f}..{norms.max().item():.4f})")


def triplet_loss(embeddings: torch.Tensor, tset: TripletSet) -> torch.Tensor:
    """Weighted hinge sum over the triplet set.

    ``embeddings`` is J x d or B x J x d; a batch is reduced by the mean over
    sequences. Gradients come from autograd; the hinge's subgradient at the
    kink is 0.
    """
    _check_normalized(embeddings)
    squeeze = embeddings.ndim == 2
    x = embeddings.unsqueeze(0) if squeeze else embeddings
    J = x.shape[1]
    if tset.anchor_index >= J or max(max(tset.positives), max(tset.negatives)) >= J:
        raise ContractError(f"triplet indices exceed sequence length {J}")
    pos = torch.as_tensor(tset.positives)
    neg = torch.as_tensor(tset.negatives)
    w = torch.as_tensor(tset.weights, dtype=x.dtype)
    anchor = x[:, tset.anchor_index:tset.anchor_index + 1]
    d_pos = _dist(anchor, x[:, pos])
    d_neg = _dist(anchor, x[:, neg])
    hinge = torch.relu(d_pos - d_neg + tset.margin)
    per_seq = (hinge * w).sum(dim=1)
    return per_seq[0] if squeeze else per_seq.mean()


def _dist(a, b):
    # sqrt has an infinite derivative at 0; route coincident points through a
    # zero gradient instead of NaN.
    sq = (a - b).pow(2).sum(dim=-1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def tcl_loss(embeddings: torch.Tensor, schedule="inv_sqrt", margin: float = 0.03) -> torch.Tensor:
    """Forward plus reversed-order triplet loss on the same embeddings."""
    J = embeddings.shape[-2]
    fwd = build_triplets(J, schedule, "forward", margin)
    rev = build_triplets(J, schedule, "reversed", margin)
    return triplet_loss(embeddings, fwd) + triplet_loss(embeddings, rev)
