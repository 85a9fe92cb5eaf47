import json

import numpy as np
import pytest

from clp.probe import f1_scores
from clp.report import collect_inputs, render_report


def _log(path, n):
    rows = [{"step": s + 1, "l_tcl": 0.2 / (s + 1), "l_cir": 5.0 - 0.01 * s, "l_tot": 0.7 - 0.001 * s,
             "queue_fill": 32 * (s + 1)} for s in range(n)]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def _probe(path, seed):
    rng = np.random.default_rng(seed)
    t = rng.random((40, 3)) < 0.4
    p = rng.random((40, 3)) < 0.5
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f1_scores(p, t, names=["AU1", "AU2", "AU4"]).to_json())
    return path


def test_empty_log_is_valid(tmp_path):
    log = tmp_path / "metrics.jsonl"
    log.write_text("")
    written = render_report([log], tmp_path / "out")
    summary = json.loads(written["json"].read_text())
    assert list(summary["metrics"].values())[0]["steps"] == 0
    assert written["plot"].exists()


def test_no_inputs_found_still_renders(tmp_path):
    (tmp_path / "empty").mkdir()
    written = render_report([tmp_path / "empty"], tmp_path / "out")
    assert written["text"].read_text().strip()


def test_missing_inputs_listed(tmp_path):
    with pytest.raises(FileNotFoundError) as exc:
        collect_inputs([tmp_path / "a.jsonl", tmp_path / "b.json"])
    assert "a.jsonl" in str(exc.value) and "b.json" in str(exc.value)


def test_side_by_side(tmp_path):
    a = _probe(tmp_path / "runA" / "probe.json", 0)
    b = _probe(tmp_path / "runB" / "probe.json", 1)
    text = render_report([a, b], tmp_path / "out")["text"].read_text()
    header = next(l for l in text.splitlines() if "Label" in l)
    assert "runA" in header and "runB" in header
    assert sum(l.startswith("| AU") for l in text.splitlines()) == 3
    assert "Avg." in text


def test_deterministic_tables(tmp_path):
    log = _log(tmp_path / "r1" / "metrics.jsonl", 30)
    probe = _probe(tmp_path / "r1" / "probe.json", 2)
    w1 = render_report([log, probe], tmp_path / "o1")
    w2 = render_report([log, probe], tmp_path / "o2")
    assert w1["text"].read_bytes() == w2["text"].read_bytes()
    assert w1["json"].read_bytes() == w2["json"].read_bytes()


def test_directory_input(tmp_path):
    _log(tmp_path / "runs" / "a" / "metrics.jsonl", 5)
    _log(tmp_path / "runs" / "b" / "metrics.jsonl", 7)
    metrics, probes = collect_inputs([tmp_path / "runs"])
    assert len(metrics) == 2 and not probes
    text = render_report([tmp_path / "runs"], tmp_path / "out")["text"].read_text()
    assert "| a " in text and "| b " in text
