"""Acceptance suite: the nine release criteria plus the AFPR invariant.

Each test prints one ``PASS``/``FAIL`` line (collected and repeated in the
terminal summary) and then asserts.  Criteria 3, 4, 6 and 9 train real
models on the bundled seven-center scenario and take several minutes each;
select them with ``-m slow`` or skip them with ``-m "not slow"``.
"""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from ringfed import cli
from ringfed.checkpoint import load_checkpoint, save_checkpoint
from ringfed.config import bundled_config, load_config
from ringfed.experiment import run_seed, sweep_seed, sweep_summary
from ringfed.federation import Schedule, run_icl, run_svcl
from ringfed.losses import LossConfig, bce_loss, seg_loss, vss_loss
from ringfed.metrics import connected_components, match_lesions
from ringfed.nn import build_model, default_layers
from ringfed.si import SIState, StepRecord, si_accumulate, si_consolidate, si_penalty
from ringfed.synthdata import build_scenario

from conftest import TINY_TASK, TINY_TRAIN, record_verdict
from oracles import brute_match, central_diff, flood_fill, rel_err

SEEDS = (0, 1, 2, 3, 4)
slow = pytest.mark.slow


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    record_verdict(line)
    return ok


@pytest.fixture(scope="module")
def seven():
    return load_config(bundled_config("sevencenter.cfg"))


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_si_oracle():
    t0 = time.perf_counter()
    h = np.array([[3.0, 0.8], [0.8, 1.5]])
    theta = np.array([1.2, -0.7])
    loss = lambda t: 0.5 * t @ h @ t
    start = loss(theta)
    si = SIState.fresh(theta, c=0.1, xi=1e-8)
    for _ in range(5000):
        g = h @ theta
        delta = -1e-3 * g
        theta = theta + delta
        si_accumulate(si, StepRecord(g, delta))
    drop = start - loss(theta)
    path_err = abs(si.w_acc.sum() - drop) / drop

    # importance after one center, then a second one, against hand values
    w1 = si.w_acc.copy()
    moved1 = (theta - si.anchor) ** 2
    si_consolidate(si, theta)
    hand1 = np.maximum(w1, 0) / (moved1 + 1e-8)
    first = theta.copy()
    theta2 = first + np.array([0.05, -0.02])
    si_accumulate(si, StepRecord(np.array([-2.0, 1.0]), theta2 - first))
    si_consolidate(si, theta2)
    hand2 = hand1 + np.array([0.1, 0.02]) / (np.array([0.0025, 0.0004]) + 1e-8)
    omega_err = float(np.max(np.abs(si.omega - hand2) / hand2))
    elapsed = time.perf_counter() - t0

    ok = path_err < 0.01 and omega_err < 1e-6 and elapsed < 1.0
    verdict(1, ok, f"path integral err {path_err:.2e}, omega rel err {omega_err:.1e}, "
                   f"{elapsed:.2f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {"bce": 0.0, "vss": 0.0, "seg": 0.0, "si": 0.0}
    counts = dict.fromkeys(worst, 0)
    for _ in range(100):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        p = rng.uniform(0.02, 0.98, size=shape)
        y = (rng.random(shape) < rng.uniform(0.0, 0.5)).astype(float)
        cfg = LossConfig(alpha=float(rng.uniform(0, 1)))
        for name, fn in (("bce", lambda q, t: bce_loss(q, t)),
                         ("vss", lambda q, t: vss_loss(q, t, cfg)),
                         ("seg", lambda q, t: seg_loss(q, t, cfg))):
            fd = central_diff(lambda q: fn(q.reshape(shape), y).total, p.ravel(), h=1e-5)
            worst[name] = max(worst[name], rel_err(fn(p, y).grad.ravel(), fd))
            counts[name] += 1

        n = int(rng.integers(1, 12))
        si = SIState(np.zeros(n), rng.exponential(size=n), rng.normal(size=n), np.zeros(n),
                     c=float(rng.uniform(0.01, 5)), center_index=1)
        theta = rng.normal(size=n)
        fd = central_diff(lambda t: si_penalty(t, si)[0], theta, h=1e-5)
        worst["si"] = max(worst["si"], rel_err(si_penalty(theta, si)[1], fd))
        counts["si"] += 1
    elapsed = time.perf_counter() - t0

    ok = max(worst.values()) < 1e-4 and min(counts.values()) >= 100 and elapsed < 30
    verdict(2, ok, ", ".join(f"{k} {v:.1e} ({counts[k]})" for k, v in worst.items())
            + f", {elapsed:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def forgetting_runs(seven):
    t0 = time.perf_counter()
    runs = {s: run_seed(seven, s, ["isolated", "svcl", "svcl+si"]) for s in SEEDS}
    return runs, time.perf_counter() - t0


@slow
def test_criterion_3_forgetting_and_si_benefit(forgetting_runs):
    runs, elapsed = forgetting_runs
    a = b = c = 0
    for res in runs.values():
        iso = np.mean([h.final_report.sensitivity for h in res.isolated()])
        plain = res.get("svcl").final_report.sensitivity
        curve = res.get("svcl+si").sensitivities()
        a += iso < plain
        b += curve[-1] >= plain
        c += all(nxt >= prev - 0.02 for prev, nxt in zip(curve, curve[1:]))
    ok = a >= 4 and b >= 4 and c >= 4 and elapsed < 600
    verdict(3, ok, f"(a) {a}/5 (b) {b}/5 (c) {c}/5, {elapsed:.0f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def icl_runs(seven):
    t0 = time.perf_counter()
    runs = {s: run_seed(seven, s, ["icl", "mixed"]) for s in SEEDS}
    return runs, time.perf_counter() - t0


@slow
def test_criterion_4_icl_matches_mixed(icl_runs):
    runs, elapsed = icl_runs
    gaps = [abs(r.get("icl").final_report.sensitivity - r.get("mixed").final_report.sensitivity)
            for r in runs.values()]
    close = sum(g <= 0.05 for g in gaps)
    ok = close == 5 and elapsed < 600
    verdict(4, ok, f"{close}/5 within 0.05 (largest gap {max(gaps):.3f}), {elapsed:.0f}s")
    assert ok


@slow
def test_final_icl_model_afpr_below_one(icl_runs):
    runs, _ = icl_runs
    afpr = [r.get("icl").final_report.afpr for r in runs.values()]
    ok = all(x < 1 for x in afpr)
    line = f"{'PASS' if ok else 'FAIL'} invariant afpr<1 at final ICL model: " \
           + " ".join(f"{x:.2f}" for x in afpr)
    print(line)
    record_verdict(line)
    assert ok


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_ledger_exactness():
    t0 = time.perf_counter()
    sc = build_scenario(TINY_TASK, 7, 1, 0, 1, master_seed=5)
    cfg = replace(TINY_TRAIN, patches_per_subepoch=2, batch_size=2, channels=(1,), fused=(2,))
    svcl = run_svcl(sc.centers, Schedule("svcl", 1, 1), cfg, test_set=sc.test_set)
    icl = run_icl(sc.centers, Schedule("icl", 1, 1, rounds=6), cfg, test_set=sc.test_set)
    again = run_icl(sc.centers, Schedule("icl", 1, 1, rounds=6), cfg, test_set=sc.test_set)
    totals = icl.ledger.totals
    elapsed = time.perf_counter() - t0
    ok = (len(svcl.ledger) == 6
          and all(totals[(i, i + 1)] == 6 for i in range(1, 7))
          and totals[(7, 1)] == 5 and len(icl.ledger) == 41
          and icl.ledger.to_csv() == again.ledger.to_csv()
          and elapsed < 1.0)
    verdict(5, ok, f"svcl {len(svcl.ledger)}, icl {len(icl.ledger)} "
                   f"(wrap {totals[(7, 1)]}), {elapsed:.2f}s")
    assert ok


# -- 6 ------------------------------------------------------------------------

@slow
def test_criterion_6_data_amount_trend(seven):
    t0 = time.perf_counter()
    points = [p for s in SEEDS for p in sweep_seed(seven, s, [0.125, 0.25, 0.5, 1.0])]
    rows = sweep_summary(points)
    elapsed = time.perf_counter() - t0
    sens = [float(r[2]) for r in rows]
    small = [float(r[3]) for r in rows]
    mono = all(nxt >= prev - 0.03 for prev, nxt in zip(sens, sens[1:]))
    ok = mono and small[-1] > small[0] and elapsed < 900
    verdict(6, ok, "median sensitivity " + " ".join(f"{x:.3f}" for x in sens)
            + f", small ratio {small[0]:.3f} -> {small[-1]:.3f}, {elapsed:.0f}s")
    assert ok


# -- 7 ------------------------------------------------------------------------

def test_criterion_7_metrics_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    agree = 0
    for _ in range(1000):
        truth = rng.random((16, 16)) < rng.uniform(0.02, 0.6)
        pred = rng.random((16, 16)) < rng.uniform(0.02, 0.6)
        pc, tc = connected_components(pred), connected_components(truth, "truth")
        ref_p, ref_t = flood_fill(pred), flood_fill(truth)
        m = match_lesions(pc, tc)
        agree += (sorted(map(list, pc.components)) == ref_p
                  and sorted(map(list, tc.components)) == ref_t
                  and (m.tp, m.fp, m.fn) == brute_match(ref_p, ref_t))
    elapsed = time.perf_counter() - t0
    ok = agree == 1000 and elapsed < 10
    verdict(7, ok, f"{agree}/1000 masks agree, {elapsed:.1f}s")
    assert ok


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_checkpoint_fidelity(tmp_path):
    t0 = time.perf_counter()
    exact = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        layers = default_layers(tuple(int(c) for c in rng.integers(1, 6, size=2)),
                                (int(rng.integers(1, 6)),), low_res=bool(rng.random() < 0.5))
        model = build_model(layers, seed=rng)
        n = model.n_params
        w, anchor, prev = (rng.normal(size=n).astype(np.float32) for _ in range(3))
        omega = rng.exponential(size=n).astype(np.float32)
        si = SIState(w, omega, anchor, prev, c=float(rng.uniform(0, 1)), xi=1e-8, center_index=int(rng.integers(50)))
        path = tmp_path / f"m{seed}.ckpt"
        save_checkpoint(path, model, si)
        m2, si2 = load_checkpoint(path)
        first = path.read_bytes()
        save_checkpoint(path, m2, si2)
        exact += (m2.same_as(model) and si2.same_as(si)
                  and path.read_bytes() == first)  # identical bytes, CRC included
    elapsed = time.perf_counter() - t0
    ok = exact == 100 and elapsed < 5
    verdict(8, ok, f"{exact}/100 bitwise round trips, {elapsed:.2f}s")
    assert ok


# -- 9 ------------------------------------------------------------------------

@slow
def test_criterion_9_bundled_configs_reproduce(tmp_path):
    t0 = time.perf_counter()
    mismatched, compared = [], 0
    for name in ("bilateral.cfg", "sevencenter.cfg"):
        outs = [tmp_path / f"{name}-{i}" for i in (1, 2)]
        for out in outs:
            assert cli.main(["run", "--config", str(bundled_config(name)),
                             "--out", str(out), "--no-plots"]) == 0
        files = sorted(p.name for p in outs[0].iterdir()
                       if p.name == "metrics.csv" or p.name.startswith("ledger_"))
        for f in files:
            compared += 1
            if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes():
                mismatched.append(f"{name}:{f}")
    elapsed = time.perf_counter() - t0
    ok = compared > 2 and not mismatched
    verdict(9, ok, f"{compared} CSVs compared, {len(mismatched)} differ, {elapsed:.0f}s")
    assert ok
