"""Acceptance gate. Each test checks one criterion at its stated tolerance and
records a PASS/FAIL line that is printed in the terminal summary."""
import itertools
import math
import os
import time
from collections import deque
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from conftest import ACCEPTANCE, unit_rows
from test_encoder import _scalar_pair
from test_tcl import away_from_kinks, numeric_grad
from clp.ablation import probe_pair, train_cell, untrained_pair
from clp.cir import MemoryQueue, cir_loss, reconstruct
from clp.config import desk_config
from clp.encoder import freeze_for_probe, momentum_update
from clp.probe import f1_scores
from clp.synth import SynthConfig, cross_identity_similarity, generate_corpus
from clp.tcl import build_triplets, tcl_loss


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


# loss kernels ----------------------------------------------------------------------

def test_loss_oracle_equivalence():
    g = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_tcl = worst_cir = 0.0
    for _ in range(100):
        J, d = int(g.integers(3, 12)), int(g.integers(2, 10))
        kind = ["constant_1", "inv_sqrt", "inv_linear", "exp_decay"][int(g.integers(4))]
        x = unit_rows(g, J, d)
        got = tcl_loss(x, kind, 0.03).item()
        worst_tcl = max(worst_tcl, abs(got - oracles.tcl_loss(x.tolist(), kind, 0.03)))
    for _ in range(100):
        n, c, cb, d = (int(v) for v in g.integers([1, 1, 1, 2], [5, 10, 10, 10]))
        tau = float(g.uniform(0.05, 1.0))
        q, C, Cb, k = unit_rows(g, n, d), unit_rows(g, c, d), unit_rows(g, cb, d), unit_rows(g, n, d)
        alpha, q_hat = reconstruct(q, C, tau)
        a_ref, r_ref = oracles.reconstruct(q.tolist(), C.tolist(), tau)
        got = cir_loss(q_hat, k, Cb, tau).item()
        ref = oracles.cir_loss(r_ref, k.tolist(), Cb.tolist(), tau)
        worst_cir = max(worst_cir, abs(got - ref), float(np.abs(alpha.numpy() - a_ref).max()),
                        float(np.abs(q_hat.numpy() - r_ref).max()))
    elapsed = time.perf_counter() - start
    ok = worst_tcl <= 1e-6 and worst_cir <= 1e-6 and elapsed < 10
    record("loss-oracle equivalence", ok,
           f"max |err| tcl {worst_tcl:.2e}, cir {worst_cir:.2e} (tol 1e-6); {elapsed:.1f}s (< 10s)")


def test_gradient_checks():
    g = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(5):
        x = away_from_kinks(g).requires_grad_(True)
        fn = lambda y: tcl_loss(y, "inv_sqrt", 0.03)
        (analytic,) = torch.autograd.grad(fn(x), x)
        numeric = numeric_grad(fn, x.detach().clone())
        worst = max(worst, ((analytic - numeric).norm() / numeric.norm()).item())
    for _ in range(5):
        q, C, Cb, k = unit_rows(g, 2, 8), unit_rows(g, 6, 8), unit_rows(g, 5, 8), unit_rows(g, 2, 8)
        fn = lambda y: cir_loss(reconstruct(y, C, 0.07)[1], k, Cb, 0.07)
        x = q.clone().requires_grad_(True)
        (analytic,) = torch.autograd.grad(fn(x), x)
        numeric = numeric_grad(fn, q.clone())
        worst = max(worst, ((analytic - numeric).norm() / numeric.norm()).item())
    elapsed = time.perf_counter() - start
    record("gradient checks", worst < 1e-4 and elapsed < 60,
           f"max relative error {worst:.2e} (< 1e-4); {elapsed:.1f}s (< 60s)")


def _fifo_exhaustive():
    for n_batches in range(1, 5):
        for sizes in itertools.product(range(1, 9), repeat=n_batches):
            q, ref, counter = MemoryQueue(8, 2), deque(maxlen=8), 0
            for b in sizes:
                v = torch.zeros(b, 2)
                v[:, 1] = 1
                ids = list(range(counter, counter + b))
                q.enqueue(v, ids)
                ref.extend(ids)
                counter += b
                if q.filled != len(ref) or list(q.snapshot()[1]) != list(ref):
                    return False
    return True


def test_algebraic_invariants():
    g = np.random.default_rng(11)
    alpha_err, max_norm = 0.0, 0.0
    for _ in range(200):
        n, c, d = (int(v) for v in g.integers([1, 1, 2], [6, 16, 12]))
        alpha, q_hat = reconstruct(unit_rows(g, n, d), unit_rows(g, c, d), float(g.uniform(0.01, 2)))
        alpha_err = max(alpha_err, (alpha.sum(1) - 1).abs().max().item())
        max_norm = max(max_norm, q_hat.norm(dim=1).max().item())
    p = _scalar_pair(0.9, 0.0, 1.0)
    for w_q, w_k in p.shared_parameters():
        w_q.data, w_k.data = w_q.data.double(), w_k.data.double()
    ema_ok = True
    for t in range(1, 30):
        momentum_update(p)
        for w_q, w_k in p.shared_parameters():
            gap = (w_q - w_k).abs()
            ema_ok &= torch.allclose(gap, torch.full_like(gap, 0.9 ** t), rtol=1e-12, atol=0)
    fifo_ok = _fifo_exhaustive()
    fwd, rev = build_triplets(9, direction="forward"), build_triplets(9, direction="reversed")
    trip_ok = (fwd.anchor_index == 0 and [(p, n) for p, n, _ in fwd.triplets] == [(t, t + 1) for t in range(1, 8)]
               and rev.anchor_index == 8
               and [(p, n) for p, n, _ in rev.triplets] == [(8 - t, 7 - t) for t in range(1, 8)])
    ok = alpha_err <= 1e-6 and max_norm <= 1 + 1e-9 and ema_ok and fifo_ok and trip_ok
    record("algebraic invariants", ok,
           f"alpha row-sum err {alpha_err:.1e}, max |q_hat| {max_norm:.6f}, EMA decay {ema_ok}, "
           f"FIFO@8 {fifo_ok}, J=9 triplets 7+7 {trip_ok}")


def test_degenerate_values():
    x = unit_rows(np.random.default_rng(0), 1, 16).repeat(9, 1)
    expected = 0.06 * math.fsum(1 / math.sqrt(j) for j in range(1, 8))   # 0.2410730
    got = tcl_loss(x, "inv_sqrt", 0.03).item()
    e = torch.eye(12, dtype=torch.float64)
    uniform = [cir_loss(e[:1], e[1:2], e[2:2 + m], 0.07).item() - math.log(m + 1) for m in range(1, 11)]
    ok = abs(got - expected) < 1e-9 and max(map(abs, uniform)) < 1e-9
    record("degenerate values", ok,
           f"identical-row tcl {got:.7f} vs m*sum(lambda) {expected:.7f}; "
           f"uniform-logit cir - ln(|C_bar|+1) max {max(map(abs, uniform)):.1e}")


def test_anti_collapse():
    start = time.perf_counter()
    torch.manual_seed(0)
    w = torch.randn(9, 8, dtype=torch.float64) * 0.01 + torch.randn(1, 8, dtype=torch.float64)
    w = (w / w.norm(dim=1, keepdim=True)).requires_grad_(True)
    opt = torch.optim.SGD([w], lr=0.05)
    for _ in range(5000):
        loss = tcl_loss(w, "inv_sqrt", 0.03)
        if loss.item() < 0.003:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            w /= w.norm(dim=1, keepdim=True)
    final = tcl_loss(w, "inv_sqrt", 0.03).item()
    spread = torch.cdist(w, w).max().item()
    elapsed = time.perf_counter() - start
    record("anti-collapse", final < 0.003 and spread > 0.1 and elapsed < 30,
           f"loss {final:.5f} (< m/10 = 0.003), max pairwise distance {spread:.3f} (> 0.1), {elapsed:.1f}s")


def test_probe_metric_oracle():
    # independent oracle: confusion counts by bit arithmetic on integer-coded patterns
    start = time.perf_counter()
    bad = 0
    for n in range(1, 13):
        codes = np.arange(2 ** n)
        bits = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)       # patterns x n
        pop = np.array([bin(c).count("1") for c in range(2 ** n)])
        for t in codes:
            rep = f1_scores(bits.T, np.repeat(bits[t][:, None], len(codes), 1))
            tp, fp, fn = pop[codes & t], pop[codes & ~t & (2 ** n - 1)], pop[~codes & t & (2 ** n - 1)]
            with np.errstate(divide="ignore", invalid="ignore"):
                f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
            bad += int(np.sum(~np.isclose(rep.f1, f1, rtol=0, atol=1e-12)))
            bad += int(np.sum(rep.tp != tp) + np.sum(rep.fp != fp) + np.sum(rep.fn != fn))
    record("probe-metric oracle", bad == 0,
           f"{bad} mismatches over all pattern pairs of length 1..12 ({time.perf_counter() - start:.0f}s)")


# synthetic end-to-end --------------------------------------------------------------

WORLD = SynthConfig(num_identities=24, identity_strength=0.3, seed=0)
SEEDS = (0, 1, 2)
STEPS = 400
CELLS = {
    "full CLP": {},
    "CIR-only": {"tcl.enabled": False, "train.beta": 1.0},
    "TCL-only (1/sqrt(j))": {"cir.enabled": False},
    "TCL-only (lambda=1)": {"cir.enabled": False, "tcl.weight_schedule": "constant_1"},
}


def desk(overrides, seed):
    cfg = desk_config(**overrides)
    cfg.train.seed, cfg.train.max_steps = seed, STEPS
    # features are cached once per encoder; normalization layers stay as trained
    cfg.probe.tune_backbone_norm = False
    cfg.probe.update_norm_stats = False
    return cfg


@pytest.fixture(scope="module")
def synthetic_runs():
    start = time.perf_counter()
    corpus = generate_corpus(WORLD)
    labels = corpus.label_set(4)
    f1 = {name: [] for name in list(CELLS) + ["random init"]}
    pull = {"full CLP": [], "TCL-only (1/sqrt(j))": []}
    for seed in SEEDS:
        cfg = desk({}, seed)
        f1["random init"].append(100 * probe_pair(untrained_pair(cfg), labels, cfg, 3).mean_f1)
        for name, ov in CELLS.items():
            cfg = desk(ov, seed)
            pair = train_cell(cfg, corpus.manifests)
            f1[name].append(100 * probe_pair(pair, labels, cfg, 3).mean_f1)
            if name in pull:
                pull[name].append(cross_identity_similarity(freeze_for_probe(pair.online, False), corpus))
    return {"f1": {k: float(np.mean(v)) for k, v in f1.items()}, "seed_f1": f1,
            "pull": {k: float(np.mean(v)) for k, v in pull.items()},
            "elapsed": time.perf_counter() - start}


def test_synthetic_ablation_ordering(synthetic_runs):
    order = ["full CLP", "CIR-only", "TCL-only (1/sqrt(j))", "TCL-only (lambda=1)", "random init"]
    f1 = synthetic_runs["f1"]
    gaps = [f1[a] - f1[b] for a, b in zip(order, order[1:])]
    ok = all(g > 2 for g in gaps) and synthetic_runs["elapsed"] < 7200
    detail = " > ".join(f"{n} {f1[n]:.1f}" for n in order)
    detail += f"; gaps {', '.join(f'{g:+.1f}' for g in gaps)} (each > 2); {synthetic_runs['elapsed'] / 60:.0f} min"
    record("synthetic ablation ordering", ok, detail)


def test_cross_identity_pull(synthetic_runs):
    full, tcl = synthetic_runs["pull"]["full CLP"], synthetic_runs["pull"]["TCL-only (1/sqrt(j))"]
    record("cross-identity pull", full - tcl > 0.05,
           f"mean cosine full {full:.3f} vs TCL-only {tcl:.3f}, gap {full - tcl:+.3f} (> 0.05)")


# optional real-data path -------------------------------------------------------------

REAL = os.environ.get("CLP_AU_DATA")


@pytest.mark.skipif(not REAL, reason="set CLP_AU_DATA to a directory with manifest.jsonl and labels.jsonl")
def test_real_data_probe_path(tmp_path):
    from clp.cli import main
    root = Path(REAL)
    run = tmp_path / "run"
    assert main(["pretrain", "--desk", "--data", str(root), "--out", str(run), "--steps", "20"]) == 0
    out = tmp_path / "probe"
    code = main(["probe", "--checkpoint", str(run / "checkpoint.pt"), "--dataset", str(root / "labels.jsonl"),
                 "--folds", "3", "--out", str(out)])
    text = (out / "probe.txt").read_text() if code == 0 else ""
    record("real-data path", code == 0 and "Avg." in text, "3-fold subject-independent probe report emitted")
