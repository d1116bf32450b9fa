"""Acceptance gate: one test per criterion, each printing a pass/fail line.

The two training criteria reuse completed runs from the acceptance cache
directory when present (SHAREDWORKSPACE_ACCEPTANCE_CACHE, default
.acceptance_cache at the repo root) and otherwise train from scratch; the
thresholds they assert were derived from pilot runs and are recorded as
constants below.
"""

import dataclasses
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

import test_models
import test_tasks
import test_workspace
from sharedworkspace import tensor as T
from sharedworkspace.bench import fit_loglog_slope, run_scaling
from sharedworkspace.config import HOSTS, ModelConfig
from sharedworkspace.gradcheck import grad_check
from sharedworkspace.hostcheck import check_all_hosts
from sharedworkspace.models import build_model
from sharedworkspace.serialization import read_metrics
from sharedworkspace.tasks import (SOC_ANSWERS, gen_copy, gen_sort_of_clevr,
                                   gen_triangles, triangle_spread)
from sharedworkspace.tensor import Tensor
from sharedworkspace.train import run_training
from sharedworkspace.workspace import SharedWorkspace

CACHE = Path(os.environ.get(
    "SHAREDWORKSPACE_ACCEPTANCE_CACHE",
    Path(__file__).resolve().parent.parent / ".acceptance_cache"))


def _report(criterion, passed, detail):
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} — {detail}")
    assert passed, detail


# ---- 1. gradient suite -------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ws = SharedWorkspace(rng, n_s=5, n_h=8, n_m=2, n_heads=2, key_dim=4,
                         value_dim=4, dtype=np.float64)
    spec = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True, name="spec")
    cand_in = Tensor(rng.normal(size=(2, 2, 8)), requires_grad=True, name="cand")
    params = ws.parameters()
    params["spec"] = spec
    params["cand"] = cand_in

    stages = {
        "write_step": lambda p: T.tmean(T.mul(*(2 * [ws.write_step(ws.reset((2,)), spec)[0]]))),
        "gated_update": lambda p: T.tmean(T.mul(*(2 * [
            ws.gated_update(ws.reset((2,)), cand_in, spec).memory]))),
        "broadcast_step": lambda p: T.tmean(T.mul(*(2 * [
            ws.broadcast_step(ws.reset((2,)), spec)[0]]))),
    }
    errs = {}
    for name, f in stages.items():
        rep = grad_check(f, params, eps=1e-5, tol=1e-4, max_entries_per_param=8)
        errs[name] = rep.max_rel_err
        assert rep.passed, (name, rep.per_param)

    host_reports = check_all_hosts()
    for host, rep in host_reports.items():
        errs[host] = rep.max_rel_err
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = all(r.passed for r in host_reports.values()) and worst <= 1e-4 \
        and elapsed < 300
    _report(1, ok, f"max rel err {worst:.2e} over ops + {len(HOSTS)} hosts, "
                   f"{elapsed:.1f}s (< 300s)")


# ---- 2. oracle equivalence ---------------------------------------------------


def test_criterion_2_oracle_equivalence():
    # Straight-line transcriptions of the write/gate/broadcast equations and
    # of the two modular integration algorithms, all at 64-bit <= 1e-10.
    test_workspace.test_write_matches_loop_oracle()
    test_workspace.test_gated_update_matches_equation_oracle()
    test_workspace.test_broadcast_matches_loop_oracle()
    test_models.test_rims_step_matches_straight_line_oracle()
    test_models.test_tims_layer_matches_straight_line_oracle()
    _report(2, True, "write/gate/broadcast + modular step/layer match "
                     "independent transcriptions <= 1e-10")


# ---- 3. soft/hard equivalence ------------------------------------------------


def test_criterion_3_soft_hard_equivalence():
    base = dict(task="triangles", n_layers=2, n_h=8, ffn_dim=16, n_heads=2,
                mem_heads=2, key_dim=4, value_dim=4, n_m=2, image_size=16,
                patch_size=8, dropout=0.0, seed=0)
    n_tokens = 5   # 4 patches + classification token
    soft = build_model(ModelConfig(host="tr_ssw", **base))
    hard = build_model(ModelConfig(host="tr_hsw", topk=n_tokens, **base))
    rng = np.random.default_rng(42)
    for _ in range(100):
        x = rng.random((2, 16, 16), dtype=np.float32)
        a = soft.forward(x).data
        b = hard.forward(x).data
        assert a.tobytes() == b.tobytes()
    _report(3, True, "k=n hard competition bitwise equals soft on 100 inputs")


# ---- 4. permutation invariance -----------------------------------------------


def test_criterion_4_write_permutation_invariance():
    rng = np.random.default_rng(7)
    ws = test_workspace.make_ws(rng, dtype=np.float32, n_s=6)
    worst = 0.0
    state = ws.reset(())
    for _ in range(1000):
        spec = rng.normal(size=(6, 8)).astype(np.float32)
        perm = rng.permutation(6)
        a, _ = ws.write_step(state, Tensor(spec))
        b, _ = ws.write_step(state, Tensor(spec[perm]))
        worst = max(worst, float(np.abs(a.data - b.data).max()))
    _report(4, worst <= 1e-5, f"1000 trials, max |delta| {worst:.2e} (<= 1e-5)")


# ---- 5. causality ------------------------------------------------------------


def test_criterion_5_causality_bitwise():
    cfg = ModelConfig(host="tr_ssw", task="copy", n_layers=2, n_h=8, ffn_dim=16,
                      n_heads=2, mem_heads=2, key_dim=4, value_dim=4, n_m=2,
                      vocab_size=5, copy_len=3, dropout=0.0, seed=0)
    m = build_model(cfg)
    rng = np.random.default_rng(5)
    n_t = cfg.seq_len
    trials = 0
    batch = 100
    while trials < 1000:
        t = int(rng.integers(1, n_t))
        toks = np.tile(rng.integers(0, 5, size=(1, n_t)), (batch, 1))
        perturbed = toks.copy()
        perturbed[1:, t:] = rng.integers(0, 5, size=(batch - 1, n_t - t))
        out = m.forward(perturbed).data
        assert (out[1:, :t] == out[0, :t]).all()
        trials += batch - 1
    _report(5, True, f"{trials} future-token perturbations leave past logits "
                     "bitwise unchanged")


# ---- 6. complexity -----------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_complexity_slopes():
    t0 = time.perf_counter()
    res = run_scaling([32, 64, 128, 256, 512], repeats=7, seed=0)
    ws = fit_loglog_slope(res, "workspace")
    pw = fit_loglog_slope(res, "pairwise")
    elapsed = time.perf_counter() - t0
    ok = 0.8 <= ws <= 1.3 and 1.7 <= pw <= 2.3 and elapsed < 600
    _report(6, ok, f"workspace slope {ws:.3f} in [0.8,1.3], "
                   f"pairwise {pw:.3f} in [1.7,2.3], {elapsed:.1f}s (< 600s)")


# ---- 7. triangle convergence (desk scale) ------------------------------------

# Desk-scale setup: 32x32 images, 10k train / 2k test, 4 layers, n_h=64,
# 50 epochs, seeds 0/1/2.  The workspace model uses 8 slots with hard
# competition k=15 over the 17 tokens; k was tuned in pilot runs (k in
# {5, 8, 12, 15}) because unrenormalized top-k attenuates the write signal
# early in training, and larger k converges strictly faster at this scale.
#
# Pilot medians (finals): workspace 0.868, baseline 0.869 -- the final-
# accuracy margin holds.  The epochs-to-threshold comparison does NOT hold at
# this scale for any meaningful threshold: with only 17 tokens, pairwise
# attention reaches every accuracy level first (e.g. 85%: baseline median 17
# epochs, workspace median 30).  The workspace's convergence advantage
# belongs to the many-token regime (256+ positions), which is out of reach of
# the 2 h desk budget; see the recorded pilot curves.  The assertion below is
# kept faithful to the stated comparison and is expected to fail (documented
# known-red).
TRIANGLE_BASE = dict(task="triangles", n_layers=4, n_h=64, ffn_dim=128,
                     n_heads=4, mem_heads=4, key_dim=16, value_dim=16,
                     image_size=32, patch_size=8, dropout=0.1, epochs=50,
                     batch_size=64, lr=3e-4, cosine=True, train_n=10000,
                     test_n=2000)
TRIANGLE_SEEDS = (0, 1, 2)
TRIANGLE_THRESHOLD = 0.85


def _cached_test_curve(cfg, name, split="test"):
    """Per-epoch accuracies for ``split``, training only when the cache
    directory has no completed run."""
    out = CACHE / name
    path = out / "metrics.jsonl"
    if path.exists():
        recs = [r for r in read_metrics(path) if r["split"] == split]
        if len(recs) >= cfg.epochs:
            return [r["accuracy"] for r in recs[:cfg.epochs]]
    run_training(cfg, out, resume=(out / "last.ckpt").exists())
    recs = [r for r in read_metrics(path) if r["split"] == split]
    return [r["accuracy"] for r in recs[:cfg.epochs]]


def _epochs_to(curve, threshold):
    for i, acc in enumerate(curve):
        if acc >= threshold:
            return i + 1
    return len(curve) + 1   # never reached: rank after every reaching run


@pytest.mark.slow
def test_criterion_7_triangle_convergence():
    curves = {}
    for host, kw in (("tr_hsw", {"n_m": 8, "topk": 15}), ("tr", {})):
        for seed in TRIANGLE_SEEDS:
            cfg = ModelConfig(host=host, seed=seed, **TRIANGLE_BASE, **kw)
            curves[(host, seed)] = _cached_test_curve(cfg, f"c7_{host}_s{seed}")
    med = {host: statistics.median(
        _epochs_to(curves[(host, s)], TRIANGLE_THRESHOLD) for s in TRIANGLE_SEEDS)
        for host in ("tr_hsw", "tr")}
    final = {host: statistics.median(curves[(host, s)][-1] for s in TRIANGLE_SEEDS)
             for host in ("tr_hsw", "tr")}
    ok = med["tr_hsw"] <= med["tr"] and final["tr_hsw"] >= final["tr"] - 0.01
    _report(7, ok, f"median epochs to {TRIANGLE_THRESHOLD:.0%}: "
                   f"workspace {med['tr_hsw']} vs baseline {med['tr']} "
                   f"(claim: workspace <=); median final acc "
                   f"{final['tr_hsw']:.4f} vs {final['tr']:.4f} "
                   f"(claim: within 1%)")


# ---- 8. persistence ablation (desk scale) ------------------------------------

# Desk-scale relational-reasoning setup: 45x45 scenes, 1500 train / 150 test
# scenes (x20 questions), 4 layers, n_h=64, hard competition k=5 over 4
# slots, 24 epochs, seeds 0/1/2.  (75x75 with 500 scenes was piloted first
# and overfits completely -- test accuracy stuck near chance even on
# non-relational questions -- so the scene budget went up and the image down
# to keep runtime desk-sized.)  The relational-accuracy threshold below was
# derived from the pilot curves.
SOC_BASE = dict(host="tr_hsw", task="soc", n_layers=4, n_h=64, ffn_dim=128,
                n_heads=4, mem_heads=4, key_dim=16, value_dim=16, n_m=4,
                topk=5, image_size=45, patch_size=15, dropout=0.1, epochs=24,
                batch_size=64, lr=3e-4, cosine=True, train_n=1500, test_n=150)
SOC_SEEDS = (0, 1, 2)
SOC_REL_THRESHOLD = 0.50


@pytest.mark.slow
def test_criterion_8_persistence_ablation():
    med = {}
    for persistent in (True, False):
        tag = "pers" if persistent else "nopers"
        epochs = []
        for seed in SOC_SEEDS:
            cfg = ModelConfig(seed=seed, persistent_memory=persistent, **SOC_BASE)
            curve = _cached_test_curve(cfg, f"c8_{tag}_s{seed}",
                                       split="test_relational")
            epochs.append(_epochs_to(curve, SOC_REL_THRESHOLD))
        med[tag] = statistics.median(epochs)
    ok = med["nopers"] > med["pers"]
    _report(8, ok, f"median epochs to relational acc {SOC_REL_THRESHOLD:.0%}: "
                   f"persistent {med['pers']} < non-persistent {med['nopers']}")


# ---- 9. dataset oracles ------------------------------------------------------


def test_criterion_9_dataset_oracles():
    # triangles: recompute every label from the stored midpoints
    tri = gen_triangles(1000, image_size=64, seed=11)
    tol = tri["params"]["tol_eq"]
    agree = 0
    for mids, label in zip(tri["midpoints"], tri["labels"]):
        spread = triangle_spread(mids)
        assert not (tol < spread < 2 * tol)
        agree += int((spread <= tol) == bool(label))
    assert agree == 1000

    # scenes: independent loop-style answering implementation
    soc = gen_sort_of_clevr(1000, seed=12)
    for i in range(1000):
        for j in range(20):
            expect = test_tasks.soc_oracle(soc["shapes"][i], soc["centers"][i],
                                           75, soc["questions"][i, j])
            assert SOC_ANSWERS[soc["answers"][i, j]] == expect

    # copy: target recomputable from the prefix
    cp = gen_copy(1000, vocab=8, seq_len=10, seed=13)
    toks = cp["tokens"]
    assert (toks[:, 5] == 0).all()
    assert (toks[:, :5] == toks[:, 6:]).all()
    assert ((toks[:, :5] >= 1) & (toks[:, :5] < 8)).all()
    _report(9, True, "generator labels agree 100% with independent oracles on "
                     "1000 samples per task")


# ---- 10. determinism ---------------------------------------------------------


def test_criterion_10_metrics_determinism(tmp_path):
    cfg = ModelConfig(host="tr_ssw", task="triangles", n_layers=2, n_h=16,
                      ffn_dim=32, n_heads=2, mem_heads=2, key_dim=8,
                      value_dim=8, n_m=2, image_size=32, patch_size=8,
                      dropout=0.1, epochs=3, batch_size=32, train_n=96,
                      test_n=32, lr=3e-4, seed=0)
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b")
    strip = lambda p: [{k: v for k, v in r.items() if k != "wall_ms"}
                       for r in read_metrics(p / "metrics.jsonl")]
    a, b = strip(tmp_path / "a"), strip(tmp_path / "b")
    # wall_ms is timing metadata; every recorded metric value must coincide
    _report(10, a == b and len(a) > 0,
            f"two identical-seed runs produced identical metrics "
            f"({len(a)} records)")
