"""Command-line entry point: pretrain, probe, ablate, synth-gen, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import CLPConfig, apply_overrides, desk_config, from_dict, merge_values, save_config
from .errors import CLPError, ConfigError, DataError

logger = logging.getLogger("clp")


def _seed_from_env():
    raw = os.environ.get("CLP_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CLP_SEED must be an integer, got {raw!r}") from None


def resolve_config(path=None, overrides=(), desk=False, seed=None) -> CLPConfig:
    """defaults < file < overrides; CLP_SEED fills in when no seed is given anywhere."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            values = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    base = desk_config() if desk else CLPConfig()
    cfg = merge_values(base, values)
    cfg = apply_overrides(cfg, list(overrides))
    seed_given = "seed" in (values.get("train") or {}) or any(o.startswith("train.seed=") for o in overrides)
    if seed is not None:
        cfg.train.seed = seed
    elif not seed_given:
        env = _seed_from_env()
        if env is not None:
            cfg.train.seed = env
    return cfg


def _write_provenance(cfg: CLPConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    (out / "run.json").write_text(json.dumps({"command": command, "seed": cfg.train.seed,
                                              "code_version": __version__}) + "\n")


# commands --------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .data import load_manifests
    from .trainer import pretrain

    overrides = list(args.set)
    for flag, key in (("seq_len", "data.seq_len"), ("stride", "data.stride"),
                      ("cir_frames_per_video", "data.cir_frames_per_video"), ("steps", "train.max_steps")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
            if flag == "seq_len":
                overrides.append(f"tcl.seq_len={value}")
    cfg = resolve_config(args.config, overrides, args.desk, args.seed)
    manifests = load_manifests(args.data, check_files=True)
    if not manifests:
        raise DataError(f"no usable videos under {args.data}")
    ckpt = pretrain(cfg, manifests, args.out, resume=args.resume, progress=True)
    print(ckpt)
    return 0


def cmd_probe(args) -> int:
    from .data import load_au_labels
    from .encoder import freeze_for_probe, load_checkpoint
    from .probe import LabelSet, run_probe

    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    pair, payload = load_checkpoint(args.checkpoint)
    cfg = apply_overrides(from_dict(payload["config"]), list(args.set))
    if args.seed is not None:
        cfg.train.seed = args.seed
    labels_path = Path(args.dataset)
    if labels_path.is_dir():
        labels_path = labels_path / "labels.jsonl"
    if not labels_path.exists():
        raise DataError(f"label file not found: {labels_path}")
    root = Path(args.frame_root) if args.frame_root else labels_path.parent
    dataset = LabelSet.from_records(load_au_labels(labels_path), cfg.data.image_size, root)
    frozen = freeze_for_probe(pair.online, cfg.probe.update_norm_stats)
    report = run_probe(frozen, dataset, args.folds, cfg.probe, seed=cfg.train.seed)
    report.meta.update({"checkpoint": str(args.checkpoint), "dataset": str(labels_path)})
    out = Path(args.out)
    _write_provenance(cfg, out, "probe")
    (out / "probe.json").write_text(report.to_json() + "\n")
    (out / "probe.txt").write_text(report.render_text(args.title) + "\n")
    print(report.render_text(args.title))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import load_grid, run_ablation

    path = Path(args.grid)
    if not path.exists():
        raise ConfigError(f"grid file not found: {path}")
    grid = load_grid(path)
    if args.seed is not None:
        grid.seeds = [args.seed]
    elif "seeds" not in (yaml.safe_load(path.read_text()) or {}):
        env = _seed_from_env()
        if env is not None:
            grid.seeds = [env]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.yaml").write_text(path.read_text())
    result = run_ablation(grid, out, keep_runs=args.keep_runs)
    print(result.render_text(), end="")
    return 0


def cmd_synth_gen(args) -> int:
    from .synth import SynthConfig, generate_corpus

    seed = args.seed if args.seed is not None else (_seed_from_env() or 0)
    kwargs = {"num_identities": args.identities, "seed": seed}
    for flag in ("videos_per_identity", "frames_per_video", "image_size", "latent_dim"):
        value = getattr(args, flag)
        if value is not None:
            kwargs[flag] = value
    corpus = generate_corpus(SynthConfig(**kwargs), args.out)
    print(f"wrote {len(corpus.manifests)} videos ({corpus.num_frames} frames) to {args.out}")
    return 0


def cmd_report(args) -> int:
    from .report import render_report

    try:
        written = render_report(args.inputs, args.out)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    for path in written.values():
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clp", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train the online/momentum encoder pair")
    s.add_argument("--config", help="YAML/JSON config file")
    s.add_argument("--data", required=True, help="directory holding manifest.jsonl (or the manifest file)")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--seq-len", type=int, dest="seq_len")
    s.add_argument("--stride", type=int)
    s.add_argument("--cir-frames-per-video", type=int, dest="cir_frames_per_video")
    s.add_argument("--steps", type=int, help="stop after this many steps (train.max_steps)")
    s.add_argument("--desk", action="store_true", help="start from the small single-CPU defaults")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="config overrides")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="linear-probe a frozen encoder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True, help="AU label JSONL (or a directory with labels.jsonl)")
    s.add_argument("--frame-root", help="base directory for image paths (default: the label file's)")
    s.add_argument("--folds", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--title", default="CLP")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("ablate", help="run an ablation grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="run a single seed instead of the grid's")
    s.add_argument("--keep-runs", action="store_true", help="keep per-cell checkpoints and logs")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth-gen", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--identities", type=int, default=24)
    s.add_argument("--seed", type=int)
    s.add_argument("--videos-per-identity", type=int, dest="videos_per_identity")
    s.add_argument("--frames-per-video", type=int, dest="frames_per_video")
    s.add_argument("--image-size", type=int, dest="image_size")
    s.add_argument("--latent-dim", type=int, dest="latent_dim")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("report", help="render tables and loss curves")
    s.add_argument("--in", dest="inputs", nargs="+", required=True, help="metrics logs, probe reports or run dirs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
