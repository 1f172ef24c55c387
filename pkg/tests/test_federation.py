from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from ringfed.checkpoint import encode
from ringfed.federation import (CommLedger, Schedule, TrainConfig, history_rows, initial_model,
                                pooled, run_icl, run_isolated, run_mixed, run_schedule,
                                run_svcl, stream, train_local, transfer, STREAM_VISIT)
from ringfed.losses import seg_loss
from ringfed.sampling import sample_from_volumes
from ringfed.si import SIState
from ringfed.synthdata import IDENTITY_SHIFT, Center, TaskSpec, build_scenario


def _kw(sc):
    return dict(val_set=sc.val_set, test_set=sc.test_set, seed=0)


def test_svcl_ledger_has_six_transfers(seven_centers, tiny_train):
    h = run_svcl(seven_centers.centers, Schedule("svcl", 1, 1), tiny_train, **_kw(seven_centers))
    assert len(h.ledger) == 6
    assert [(e.src, e.dst) for e in h.ledger.events] == [(i, i + 1) for i in range(1, 7)]
    assert len(h.snapshots) == 7
    assert h.snapshots[-1].transfers_so_far == 6


def test_icl_ledger_counts(seven_centers, tiny_train):
    h = run_icl(seven_centers.centers, Schedule("icl", 1, 1, rounds=6, use_si=True),
                tiny_train, **_kw(seven_centers))
    totals = h.ledger.totals
    assert len(h.ledger) == 41
    assert all(totals[(i, i + 1)] == 6 for i in range(1, 7))
    assert totals[(7, 1)] == 5
    assert len(h.snapshots) == 42
    assert h.final_si.center_index == 41
    assert [s.round for s in h.snapshots[::7]] == [1, 2, 3, 4, 5, 6]


def test_transfer_bytes_equal_checkpoint_size(two_centers, tiny_train, tmp_path):
    model = initial_model(tiny_train, 0)
    si = SIState.fresh(model.theta)
    si.steps_since_consolidation = 1
    ledger = CommLedger()
    a, b = two_centers.centers
    received, received_si = transfer(model, si, a, b, ledger)
    assert ledger.events[0].byte_count == len(encode(received, received_si))
    assert received.same_as(model) and received_si.same_as(si)
    assert received_si.center_index == 1  # consolidated before shipping
    assert received.version == model.version + 1
    with pytest.raises(ValueError):
        transfer(model, None, a, a, ledger)


def test_ledger_csv(two_centers, tiny_train):
    h = run_svcl(two_centers.centers, Schedule("svcl", 1, 1), tiny_train, **_kw(two_centers))
    lines = h.ledger.to_csv().splitlines()
    assert lines[0] == "seq,from,to,bytes,round"
    assert lines[1].startswith("1,1,2,")


def test_zero_epochs_returns_model_unchanged(two_centers, tiny_train):
    m = initial_model(tiny_train, 0)
    out, _, trace = train_local(two_centers.centers[0], m, None, 0, tiny_train,
                                rng=np.random.default_rng(0))
    assert out.same_as(m) and out is not m and trace.steps == []


def test_empty_center_rejected(tiny_train):
    with pytest.raises(ValueError):
        train_local(Center(1, [], 0), initial_model(tiny_train, 0), None, 1, tiny_train,
                    rng=np.random.default_rng(0))


def test_training_halves_the_loss_on_a_separable_task():
    spec = TaskSpec(volume_extent=(24, 24), large_radius=(2.5, 4.0), small_lesion_fraction=0,
                    large_contrast=(1.0, 1.0), texture_amplitude=0, noise_sigma=0.01,
                    distractors_per_volume=0, fixed_lesion_count=2)
    sc = build_scenario(spec, 1, 6, 0, 1, shifts=[IDENTITY_SHIFT])
    cfg = TrainConfig(patch_size=12, batch_size=8, patches_per_subepoch=32, subepochs=2,
                      volumes_per_subepoch=6, channels=(4, 4), fused=(8,), lr=3e-3)
    probe = sample_from_volumes(sc.centers[0].train_set, 64, 12, np.random.default_rng(9))
    loss = lambda m: seg_loss(m.forward(probe.inputs), probe.targets).total
    start = initial_model(cfg, 0)
    trained, _, trace = train_local(sc.centers[0], start, None, 5, cfg,
                                    rng=np.random.default_rng(0))
    assert len(trace.losses) == 5
    assert loss(trained) <= 0.5 * loss(start)


def test_si_keeps_parameters_nearer_the_anchor(two_centers, tiny_train):
    a, b = two_centers.centers
    cfg = replace(tiny_train, patches_per_subepoch=16)
    start = initial_model(cfg, 0)
    si = SIState.fresh(start.theta, c=cfg.c)
    first, si, _ = train_local(a, start, si, 3, cfg, rng=np.random.default_rng(1))
    ledger = CommLedger()
    shipped, si = transfer(first, si, a, b, ledger)
    drift = {}
    for name, state in (("si", si), ("plain", None)):
        out, _, _ = train_local(b, shipped, state, 3, cfg, rng=np.random.default_rng(2))
        drift[name] = np.linalg.norm(out.theta - shipped.theta)
    assert drift["si"] < drift["plain"]


def test_icl_with_one_epoch_visits_is_blocked_mixed(seven_centers, tiny_train):
    cs = seven_centers.centers
    icl = run_icl(cs, Schedule("icl", 1, 1, rounds=2), tiny_train, **_kw(seven_centers))
    mixed = run_mixed(cs, tiny_train, 14, order="blocked", **_kw(seven_centers))
    assert Counter(icl.step_provenance()) == Counter(mixed.step_provenance())
    assert {o for _, o in mixed.step_provenance()} == {(i,) for i in range(1, 8)}


def test_shuffled_mixed_uses_the_union(seven_centers, tiny_train):
    cs = seven_centers.centers
    assert len(pooled(cs)) == sum(len(c.train_set) for c in cs)
    h = run_mixed(cs, tiny_train, 3, snapshot_every=1, **_kw(seven_centers))
    assert len(h.snapshots) == 3 and [s.cum_epochs for s in h.snapshots] == [1, 2, 3]
    assert len(h.ledger) == 0
    with pytest.raises(ValueError):
        run_mixed(cs, tiny_train, 3, order="random", **_kw(seven_centers))


def test_single_center_svcl_is_isolated_training(two_centers, tiny_train):
    one = two_centers.centers[:1]
    svcl = run_svcl(one, Schedule("svcl", 2, 1), tiny_train, **_kw(two_centers))
    iso = run_isolated(one, tiny_train, 2, **_kw(two_centers))
    assert len(iso) == 1 and svcl.final_model.same_as(iso[0].final_model)
    assert len(svcl.ledger) == 0


def test_one_round_icl_is_uniform_svcl(two_centers, tiny_train):
    cs = two_centers.centers
    icl = run_icl(cs, Schedule("icl", 2, 2, rounds=1), tiny_train, **_kw(two_centers))
    svcl = run_svcl(cs, Schedule("svcl", 2, 2), tiny_train, **_kw(two_centers))
    assert icl.final_model.same_as(svcl.final_model)


def test_isolated_models_differ(two_centers, tiny_train):
    hs = run_isolated(two_centers.centers, tiny_train, 1, **_kw(two_centers))
    assert len(hs) == 2
    assert not hs[0].final_model.same_as(hs[1].final_model)


def test_runs_are_deterministic(two_centers, tiny_train):
    s = Schedule("svcl", 1, 1, use_si=True)
    a = run_svcl(two_centers.centers, s, tiny_train, **_kw(two_centers))
    b = run_svcl(two_centers.centers, s, tiny_train, **_kw(two_centers))
    assert a.final_model.same_as(b.final_model) and a.final_si.same_as(b.final_si)
    assert history_rows(a, "x") == history_rows(b, "x")


def test_run_schedule_dispatch(two_centers, tiny_train):
    assert len(run_schedule(two_centers, Schedule("isolated", 1, 1), tiny_train)) == 2
    mixed, = run_schedule(two_centers, Schedule("mixed", 1, 1, rounds=2), tiny_train)
    assert mixed.snapshots[-1].cum_epochs == 4


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule("star")
    with pytest.raises(ValueError):
        Schedule("icl", rounds=0)
    with pytest.raises(ValueError):
        run_svcl([], Schedule("icl"), TrainConfig(), test_set=[])


def test_streams_are_independent():
    a = stream(0, STREAM_VISIT, 1, 1).random(4)
    b = stream(0, STREAM_VISIT, 2, 1).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, stream(0, STREAM_VISIT, 1, 1).random(4))
