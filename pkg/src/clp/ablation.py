"""Ablation grid over the loss switches, the TCL weight schedule, the
dictionary size and the reconstruction-loss variant.

A grid file (YAML or JSON) looks like::

    seeds: [0, 1, 2]
    steps: 400
    desk: true                 # start from desk_config() instead of CLPConfig()
    overrides: {train.beta: 0.1}
    synth: {num_identities: 24}  # or data: DIR + labels: FILE for real frames
    random_init: true            # add an untrained-encoder row
    cells:                       # explicit cells ...
      full: {}
      cir_only: {tcl.enabled: false}
    axes:                        # ... and/or a cartesian product
      tcl.weight_schedule: [constant_1, inv_sqrt]
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .config import CLPConfig, apply_overrides, desk_config, save_config
from .data import load_au_labels, load_manifests
from .encoder import EncoderConfig, EncoderPair, freeze_for_probe
from .errors import ConfigError
from .probe import LabelSet, ProbeReport, run_probe
from .synth import SynthConfig, generate_corpus
from .trainer import init_state, make_batch, pretrain

logger = logging.getLogger(__name__)

AXES = ("tcl.enabled", "cir.enabled", "tcl.weight_schedule", "cir.memory_size", "cir.eq4_printed_variant")
RANDOM_INIT = "random_init"


@dataclass
class Grid:
    cells: dict                      # name -> overrides
    seeds: list = field(default_factory=lambda: [0])
    steps: int = 0                   # 0 keeps the configured epochs
    desk: bool = True
    overrides: dict = field(default_factory=dict)
    synth: Optional[dict] = None
    data: Optional[str] = None
    labels: Optional[str] = None
    random_init: bool = False
    folds: int = 3
    label_every: int = 4

    def config(self, cell: str, seed: int) -> CLPConfig:
        cfg = desk_config() if self.desk else CLPConfig()
        cfg = apply_overrides(cfg, self.overrides)
        cfg = apply_overrides(cfg, self.cells.get(cell, {}))
        cfg.train.seed = seed
        if self.steps:
            cfg.train.max_steps = self.steps
        return cfg


def _vacuous(overrides: dict, base: CLPConfig) -> bool:
    tcl = overrides.get("tcl.enabled", base.tcl.enabled)
    cir = overrides.get("cir.enabled", base.cir.enabled)
    return not (tcl or cir)


def expand_axes(axes: dict) -> dict:
    """Cartesian product of the axes; cells with both losses off are dropped."""
    bad = sorted(set(axes) - set(AXES))
    if bad:
        raise ConfigError(f"unsupported ablation axes {bad}; choose from {list(AXES)}")
    keys = list(axes)
    cells = {}
    if not keys:
        return cells
    for combo in itertools.product(*(axes[k] for k in keys)):
        ov = dict(zip(keys, combo))
        if _vacuous(ov, CLPConfig()):
            logger.warning("skipping vacuous cell %s", ov)
            continue
        cells[",".join(f"{k}={v}" for k, v in ov.items())] = ov
    return cells


def load_grid(path_or_dict) -> Grid:
    if isinstance(path_or_dict, dict):
        raw = dict(path_or_dict)
    else:
        path = Path(path_or_dict)
        if not path.exists():
            raise FileNotFoundError(f"grid file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
    cells = dict(raw.pop("cells", None) or {})
    cells.update(expand_axes(raw.pop("axes", None) or {}))
    unknown = set(raw) - set(Grid.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    grid = Grid(cells=cells, **raw)
    base = apply_overrides(desk_config() if grid.desk else CLPConfig(), grid.overrides)
    for name, ov in cells.items():
        if _vacuous(ov, base):
            raise ConfigError(f"cell {name!r} disables both TCL and CIR")
    if not cells and not grid.random_init:
        raise ConfigError("grid has no cells")
    if grid.data is not None and grid.synth is not None:
        raise ConfigError("give either synth or data, not both")
    return grid


def load_source(grid: Grid, image_size: int):
    """Manifests and the probe label set for the grid's data source."""
    if grid.data is not None:
        if grid.labels is None:
            raise ConfigError("real-data grids need a labels file")
        manifests = load_manifests(grid.data)
        labels = LabelSet.from_records(load_au_labels(grid.labels), image_size, Path(grid.labels).parent)
        return manifests, labels
    corpus = generate_corpus(SynthConfig(**(grid.synth or {})))
    return corpus.manifests, corpus.label_set(grid.label_every)


def untrained_pair(cfg: CLPConfig) -> EncoderPair:
    """Same initialization a training run with this config would start from."""
    torch.manual_seed(cfg.train.seed)
    return EncoderPair(EncoderConfig.from_section(cfg.encoder), cfg.train.ema_momentum, cfg.data.image_size)


def train_cell(cfg: CLPConfig, manifests, out_dir=None) -> EncoderPair:
    if out_dir is not None:
        pair = untrained_pair(cfg)
        pretrain(cfg, manifests, out_dir, pair=pair)
        return pair
    from .trainer import train_step
    state = init_state(cfg, len(manifests))
    while state.step < state.total_steps:
        train_step(state, make_batch(manifests, cfg, state.step))
    return state.pair


def probe_pair(pair: EncoderPair, labels: LabelSet, cfg: CLPConfig, folds: int) -> ProbeReport:
    frozen = freeze_for_probe(pair.online, cfg.probe.update_norm_stats)
    return run_probe(frozen, labels, folds, cfg.probe, seed=cfg.train.seed)


@dataclass
class AblationResult:
    rows: list           # one dict per cell
    names: list          # label names

    def mean(self, cell: str) -> float:
        return next(r["mean_f1x100"] for r in self.rows if r["cell"] == cell)

    def to_json(self) -> str:
        return json.dumps({"labels": self.names, "rows": self.rows}, indent=2, sort_keys=True)

    def render_text(self) -> str:
        return render_table(self.rows)


def _mark(flag) -> str:
    return "x" if flag else "-"


def render_table(rows: list) -> str:
    """Ablation-shaped table: loss switches, schedule, |C|, variant, F1."""
    header = ["Cell", "L_tcl", "L_cir", "lambda_j", "|C|", "CIR negatives", "F1 (mean)", "F1 (seeds)"]
    body = []
    for r in rows:
        if r.get("random_init"):
            body.append([r["cell"], "-", "-", "-", "-", "-", f"{r['mean_f1x100']:.1f}",
                         " ".join(f"{f:.1f}" for f in r["seed_f1x100"])])
            continue
        body.append([r["cell"], _mark(r["tcl"]), _mark(r["cir"]), r["schedule"] if r["tcl"] else "-",
                     str(r["dict_size"]) if r["cir"] else "-", "vs q" if r["printed_variant"] else "vs q_hat",
                     f"{r['mean_f1x100']:.1f}", " ".join(f"{f:.1f}" for f in r["seed_f1x100"])])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    return "\n".join([rule, line(header), rule] + [line(b) for b in body] + [rule]) + "\n"


def run_ablation(grid: Grid, out_dir=None, keep_runs: bool = False) -> AblationResult:
    """Train and probe every cell for every seed."""
    out = Path(out_dir) if out_dir is not None else None
    base = grid.config(next(iter(grid.cells), ""), grid.seeds[0])
    manifests, labels = load_source(grid, base.data.image_size)
    rows = []
    names = [RANDOM_INIT] if grid.random_init else []
    for name in names + list(grid.cells):
        seed_f1, per_label = [], []
        for seed in grid.seeds:
            cfg = grid.config(name, seed)
            run_dir = out / "runs" / _slug(name) / f"seed{seed}" if (out is not None and keep_runs) else None
            if name == RANDOM_INIT:
                pair = untrained_pair(cfg)
            else:
                pair = train_cell(cfg, manifests, run_dir)
            report = probe_pair(pair, labels, cfg, grid.folds)
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
                save_config(cfg, run_dir / "config.json")
                (run_dir / "probe.json").write_text(report.to_json() + "\n")
            seed_f1.append(100 * report.mean_f1)
            per_label.append(100 * report.f1)
            logger.info("cell %s seed %d: F1 %.2f", name, seed, seed_f1[-1])
        cfg = grid.config(name, grid.seeds[0])
        rows.append({"cell": name, "random_init": name == RANDOM_INIT,
                     "tcl": cfg.tcl.enabled, "cir": cfg.cir.enabled,
                     "schedule": cfg.tcl.weight_schedule,
                     "dict_size": int(cfg.cir.memory_size * cfg.cir.dict_fraction),
                     "printed_variant": cfg.cir.eq4_printed_variant,
                     "seed_f1x100": [round(f, 4) for f in seed_f1],
                     "mean_f1x100": round(float(np.mean(seed_f1)), 4),
                     "label_f1x100": [round(float(f), 4) for f in np.mean(per_label, 0)]})
    result = AblationResult(rows, list(labels.names))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(result.to_json() + "\n")
        (out / "ablation.txt").write_text(result.render_text())
    return result


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
