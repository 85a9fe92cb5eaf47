"""Linear-probe evaluation of a frozen encoder: inverse-frequency weighted
BCE, subject-independent folds, per-label F1."""
from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ProbeConfig
from .errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class LabelSet:
    """Images with multi-label binary targets; ``mask`` is True where known."""

    names: list
    images: torch.Tensor          # N x C x H x W
    targets: torch.Tensor         # N x A, {0, 1}
    mask: torch.Tensor            # N x A, bool
    subjects: np.ndarray          # N

    def __post_init__(self):
        n = self.images.shape[0]
        if self.targets.shape != (n, len(self.names)) or self.mask.shape != self.targets.shape:
            raise ContractError("images, targets and mask disagree in shape")
        self.subjects = np.asarray(self.subjects)
        if len(self.subjects) != n:
            raise ContractError("one subject id per image is required")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "LabelSet":
        idx = np.asarray(idx)
        t = torch.from_numpy(idx)
        return LabelSet(self.names, self.images[t], self.targets[t], self.mask[t], self.subjects[idx])

    @classmethod
    def from_records(cls, records, image_size: int, root=None) -> "LabelSet":
        from pathlib import Path
        from .data import read_image, to_tensor
        names = []
        for r in records:
            for k in r["labels"]:
                if k not in names:
                    names.append(k)
        targets = torch.zeros(len(records), len(names))
        mask = torch.zeros(len(records), len(names), dtype=torch.bool)
        imgs, subjects = [], []
        for i, r in enumerate(records):
            for j, name in enumerate(names):
                v = r["labels"].get(name)
                if v is not None:
                    targets[i, j], mask[i, j] = float(v), True
            path = Path(root) / r["image"] if root is not None else Path(r["image"])
            imgs.append(read_image(path, image_size))
            if r.get("subject_id") is None:
                raise ContractError(f"label record for {r['image']} has no subject_id; "
                                    "subject-independent folds need one")
            subjects.append(r["subject_id"])
        return cls(names, to_tensor(np.stack(imgs)), targets, mask, np.asarray(subjects))


class LinearProbe(nn.Module):
    """Normalization layer followed by a bias-free linear map."""

    def __init__(self, feature_dim: int, num_labels: int):
        super().__init__()
        self.norm = nn.BatchNorm1d(feature_dim)
        self.fc = nn.Linear(feature_dim, num_labels, bias=False)

    def forward(self, h):
        return self.fc(self.norm(h))


class PixelFeatures(nn.Module):
    """Raw pixels as features; a baseline encoder for sanity checks."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.feature_dim = feature_dim

    def forward(self, x):
        return x.flatten(1)


# losses and metrics ---------------------------------------------------------

def positive_weights(targets: torch.Tensor, mask: torch.Tensor, cap: float = 100.0) -> torch.Tensor:
    """negatives / positives per label over known entries (training fold only)."""
    known = mask.to(targets.dtype)
    pos = (targets * known).sum(0)
    neg = ((1 - targets) * known).sum(0)
    w = torch.where(pos > 0, neg / pos.clamp_min(1), torch.full_like(pos, cap))
    if torch.any(pos == 0):
        warnings.warn(f"{int((pos == 0).sum())} label(s) have no positives in the training fold; "
                      f"positive weight capped at {cap}", RuntimeWarning, stacklevel=2)
    w = torch.where((neg == 0) & (pos > 0), torch.ones_like(w), w)
    return w.clamp(max=cap)


def weighted_bce(logits, targets, mask, class_weights) -> torch.Tensor:
    """Per-label BCE with positive-class weights; mean over known entries."""
    per = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="none",
                                             pos_weight=class_weights.to(logits.dtype))
    known = mask.to(logits.dtype)
    n = known.sum()
    if n == 0:
        return (per * known).sum()
    return (per * known).sum() / n


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=float), where=den > 0)


@dataclass
class ProbeReport:
    names: list
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    fold_f1: Optional[np.ndarray] = None   # folds x labels
    meta: dict = field(default_factory=dict)

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1)) if len(self.f1) else 0.0

    @property
    def fold_mean_f1(self) -> list:
        return [] if self.fold_f1 is None else [float(r.mean()) for r in self.fold_f1]

    def to_rows(self) -> list:
        rows = []
        for a, name in enumerate(self.names):
            row = {"label": name, "precision": float(self.precision[a]), "recall": float(self.recall[a]),
                   "f1x100": round(100 * float(self.f1[a]), 4),
                   "tp": int(self.tp[a]), "fp": int(self.fp[a]), "fn": int(self.fn[a])}
            if self.fold_f1 is not None:
                for k, f in enumerate(self.fold_f1[:, a]):
                    row[f"fold{k + 1}_f1x100"] = round(100 * float(f), 4)
            rows.append(row)
        return rows

    def to_json(self) -> str:
        return json.dumps({"labels": self.to_rows(), "mean_f1x100": round(100 * self.mean_f1, 4),
                           "fold_mean_f1x100": [round(100 * f, 4) for f in self.fold_mean_f1],
                           "meta": self.meta}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProbeReport":
        d = json.loads(text)
        rows = d["labels"]
        folds = sorted(k for k in rows[0] if k.startswith("fold")) if rows else []
        fold_f1 = (np.array([[r[k] / 100 for r in rows] for k in folds]) if folds else None)
        get = lambda k: np.array([r[k] for r in rows], dtype=float)
        return cls([r["label"] for r in rows], get("tp"), get("fp"), get("fn"), get("precision"),
                   get("recall"), get("f1x100") / 100, fold_f1, d.get("meta", {}))

    def render_text(self, title: str = "Method") -> str:
        header = ["Method"] + [str(n) for n in self.names] + ["Avg."]
        values = [title] + [f"{100 * f:.1f}" for f in self.f1] + [f"{100 * self.mean_f1:.1f}"]
        widths = [max(len(h), len(v)) for h, v in zip(header, values)]
        line = lambda cells: "| " + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + " |"
        rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
        return "\n".join([rule, line(header), rule, line(values), rule])


def f1_scores(predictions, targets, mask=None, names: Optional[Sequence[str]] = None) -> ProbeReport:
    """Per-label precision, recall and F1 over known entries; 0/0 counts as 0."""
    pred = np.asarray(predictions, dtype=bool)
    tgt = np.asarray(targets, dtype=bool)
    if pred.ndim == 1:
        pred, tgt = pred[:, None], tgt[:, None]
    known = np.ones_like(tgt) if mask is None else np.asarray(mask, dtype=bool).reshape(tgt.shape)
    tp = (pred & tgt & known).sum(0).astype(float)
    fp = (pred & ~tgt & known).sum(0).astype(float)
    fn = (~pred & tgt & known).sum(0).astype(float)
    p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    f1 = _ratio(2 * r * p, r + p)
    names = list(names) if names is not None else [f"label{i}" for i in range(tgt.shape[1])]
    return ProbeReport(names, tp, fp, fn, p, r, f1)


# folds and training --------------------------------------------------------------

def subject_folds(subjects, k: int = 3, seed: int = 0) -> list:
    """(train_idx, test_idx) pairs with each subject in exactly one test fold."""
    subjects = np.asarray(subjects)
    uniq = np.unique(subjects)
    if len(uniq) < k:
        raise ContractError(f"{len(uniq)} subjects cannot form {k} subject-independent folds")
    uniq = uniq[np.random.default_rng(seed).permutation(len(uniq))]
    folds = []
    for group in np.array_split(uniq, k):
        test = np.isin(subjects, group)
        folds.append((np.flatnonzero(~test), np.flatnonzero(test)))
    return folds


def check_folds(subjects, folds) -> None:
    subjects = np.asarray(subjects)
    for i, (train, test) in enumerate(folds):
        shared = set(subjects[train]) & set(subjects[test])
        if shared:
            raise ContractError(f"fold {i + 1}: subject(s) {sorted(shared)[:5]} in both train and test")


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = perm[s:s + batch_size]
        if len(idx) > 1:  # batch norm needs two samples
            yield torch.from_numpy(idx)


@torch.no_grad()
def extract_features(encoder: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    encoder.eval()
    with torch.no_grad():
        return torch.cat([encoder(images[s:s + batch_size]) for s in range(0, len(images), batch_size)])


def train_probe(encoder: nn.Module, data: LabelSet, cfg: ProbeConfig, seed: int = 0) -> LinearProbe:
    """Fit a probe (and, if configured, the encoder's normalization layers)."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    feature_dim = encoder.feature_dim
    probe = LinearProbe(feature_dim, len(data.names))
    weights = positive_weights(data.targets, data.mask, cfg.max_pos_weight)
    params = list(probe.parameters())
    tune = cfg.tune_backbone_norm and any(p.requires_grad for p in encoder.parameters())
    if tune:
        params += [p for p in encoder.parameters() if p.requires_grad]
        feats = None
    else:
        feats = extract_features(encoder, data.images)
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    probe.train()
    for _ in range(cfg.epochs):
        if tune:
            encoder.train()
        for idx in _batches(len(data), cfg.batch_size, rng):
            h = encoder(data.images[idx]) if tune else feats[idx]
            loss = weighted_bce(probe(h), data.targets[idx], data.mask[idx], weights)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return probe


@torch.no_grad()
def predict(encoder: nn.Module, probe: LinearProbe, images: torch.Tensor, threshold: float = 0.5):
    probe.eval()
    h = extract_features(encoder, images)
    return (torch.sigmoid(probe(h)) >= threshold).numpy()


def run_probe(encoder: nn.Module, dataset: LabelSet, folds=3, cfg: Optional[ProbeConfig] = None,
              seed: int = 0) -> ProbeReport:
    """Per fold: fit on the train split, threshold on the held-out split.

    ``encoder`` is a frozen handle (see ``freeze_for_probe``); each fold
    starts from its own copy so normalization updates never leak across folds.
    Per-label F1 is averaged over folds; confusion counts are summed.
    """
    cfg = cfg or ProbeConfig()
    if isinstance(folds, int):
        folds = subject_folds(dataset.subjects, folds, seed)
    check_folds(dataset.subjects, folds)
    shared_features = None
    frozen_stats = not (cfg.tune_backbone_norm or cfg.update_norm_stats)
    reports = []
    for k, (train_idx, test_idx) in enumerate(folds):
        enc = copy.deepcopy(encoder)
        if frozen_stats and shared_features is None:
            shared_features = extract_features(enc, dataset.images)
        if shared_features is not None:
            enc = _CachedFeatures(shared_features, enc.feature_dim)
            train = dataset.subset(train_idx)
            train = LabelSet(train.names, torch.from_numpy(np.asarray(train_idx)), train.targets,
                             train.mask, train.subjects)
            test_images = torch.from_numpy(np.asarray(test_idx))
        else:
            train, test_images = dataset.subset(train_idx), dataset.images[torch.from_numpy(test_idx)]
        probe = train_probe(enc, train, cfg, seed=seed * 1000 + k)
        pred = predict(enc, probe, test_images, cfg.threshold)
        reports.append(f1_scores(pred, dataset.targets[test_idx].numpy(), dataset.mask[test_idx].numpy(),
                                 dataset.names))
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    fold_f1 = np.stack([r.f1 for r in reports])
    return ProbeReport(list(dataset.names), tp, fp, fn, np.mean([r.precision for r in reports], 0),
                       np.mean([r.recall for r in reports], 0), fold_f1.mean(0), fold_f1,
                       {"folds": len(folds)})


class _CachedFeatures(nn.Module):
    """Looks features up by row index; used when the encoder is fully frozen."""

    def __init__(self, features, feature_dim):
        super().__init__()
        self.features = features
        self.feature_dim = feature_dim

    def forward(self, idx):
        return self.features[idx]
