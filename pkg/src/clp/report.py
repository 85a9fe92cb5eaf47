"""Render metrics logs and probe reports into tables and loss-curve plots."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .probe import ProbeReport

METRIC_KEYS = ("l_tcl", "l_cir", "l_tot")


def read_metrics(path) -> list:
    text = Path(path).read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _is_probe_json(path: Path) -> bool:
    try:
        d = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError):
        return False
    return isinstance(d, dict) and "labels" in d and "mean_f1x100" in d


def collect_inputs(inputs: Sequence) -> tuple:
    """Split ``inputs`` (files or directories) into metrics logs and probe
    reports. Raises FileNotFoundError naming every missing path."""
    missing = [str(p) for p in inputs if not Path(p).exists()]
    if missing:
        raise FileNotFoundError("missing report inputs: " + ", ".join(missing))
    metrics, probes = [], []
    for p in map(Path, inputs):
        files = sorted(p.rglob("*")) if p.is_dir() else [p]
        for f in files:
            if f.suffix == ".jsonl":
                metrics.append(f)
            elif f.suffix == ".json" and _is_probe_json(f):
                probes.append(f)
    return metrics, probes


def _label(path: Path) -> str:
    return path.parent.name if path.name in ("metrics.jsonl", "probe.json") else path.stem


def _table(header, rows, align_left=1) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    def line(cells):
        return "| " + " | ".join(str(c).ljust(w) if i < align_left else str(c).rjust(w)
                                 for i, (c, w) in enumerate(zip(cells, widths))) + " |"
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    return "\n".join([rule, line(header), rule] + [line(r) for r in rows] + [rule])


def metrics_table(logs: dict) -> str:
    header = ["Run", "steps", "l_tcl", "l_cir", "l_tot", "queue_fill"]
    rows = []
    for name, rows_ in logs.items():
        last = rows_[-1] if rows_ else {}
        rows.append([name, str(len(rows_))] + [f"{last[k]:.4f}" if k in last else "-" for k in METRIC_KEYS]
                    + [str(last.get("queue_fill", "-"))])
    return _table(header, rows)


def comparison_table(reports: dict) -> str:
    """Per-label F1 x 100, one column per report, plus the average row."""
    names = []
    for r in reports.values():
        names += [n for n in r.names if n not in names]
    header = ["Label"] + list(reports)
    rows = []
    for n in names:
        cells = [n]
        for r in reports.values():
            cells.append(f"{100 * r.f1[r.names.index(n)]:.1f}" if n in r.names else "-")
        rows.append(cells)
    rows.append(["Avg."] + [f"{100 * r.mean_f1:.1f}" for r in reports.values()])
    return _table(header, rows)


def plot_losses(logs: dict, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(METRIC_KEYS), figsize=(4 * len(METRIC_KEYS), 3))
    for ax, key in zip(axes, METRIC_KEYS):
        for name, rows in logs.items():
            if rows:
                ax.plot([r["step"] for r in rows], [r[key] for r in rows], label=name, lw=1)
        ax.set_title(key)
        ax.set_xlabel("step")
    if any(logs.values()):
        axes[-1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def _unique(paths) -> dict:
    out = {}
    for p in paths:
        name = _label(p)
        key, i = name, 2
        while key in out:
            key, i = f"{name}#{i}", i + 1
        out[key] = p
    return out


def render_report(inputs: Sequence, out_dir) -> dict:
    """Write ``report.txt``, ``report.json`` and, for metrics logs,
    ``loss_curves.png`` under ``out_dir``. Returns the written paths."""
    metric_paths, probe_paths = collect_inputs(inputs)
    logs = {k: read_metrics(p) for k, p in _unique(metric_paths).items()}
    reports = {k: ProbeReport.from_json(p.read_text()) for k, p in _unique(probe_paths).items()}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts, written = [], {}
    if logs:
        parts += ["Training metrics (last step)", metrics_table(logs), ""]
    if reports:
        title = "Probe F1 x 100" if len(reports) == 1 else "Probe F1 x 100, side by side"
        parts += [title, comparison_table(reports), ""]
    if not parts:
        parts = ["(no metrics rows or probe reports)", ""]
    written["text"] = out / "report.txt"
    written["text"].write_text("\n".join(parts))
    summary = {"metrics": {k: {"steps": len(v), "last": v[-1] if v else None} for k, v in logs.items()},
               "probes": {k: {"mean_f1x100": round(100 * r.mean_f1, 4),
                              "f1x100": {n: round(100 * float(f), 4) for n, f in zip(r.names, r.f1)}}
                          for k, r in reports.items()}}
    written["json"] = out / "report.json"
    written["json"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if logs:
        written["plot"] = plot_losses(logs, out / "loss_curves.png")
    return written
