"""Peer-to-peer ring training: isolated baselines, single-visit and iterative
continual learning, and the mixed-data upper bound.

Centers are visited in ring order I -> II -> ... -> N.  Between visits the
model (plus its SI state, when SI is on) is serialized, counted in a
:class:`CommLedger` and deserialized at the receiving center.  SI
consolidation happens at departure, before serialization.

All randomness is drawn from streams keyed by ``(seed, center, round)``, so
runs that differ only in ``use_si`` or schedule see the same patches and
the same initial weights.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, decode, encode
from .losses import LossConfig, seg_loss
from .metrics import MetricsReport, evaluate
from .nn import ModelState, NumericalError, build_model, default_layers
from .optim import OptimizerState, optimizer_step, step_lr_on_plateau
from .sampling import sample_from_volumes, take
from .si import SIState, StepRecord, si_accumulate, si_consolidate, si_penalty
from .synthdata import Center, LabeledVolume, Scenario

SCHEDULE_KINDS = ("isolated", "svcl", "icl", "mixed")


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 24
    batch_size: int = 16
    patches_per_subepoch: int = 80
    subepochs: int = 2
    volumes_per_subepoch: int = 8
    fg_fraction: float = 0.5
    augment: bool = True
    loss: LossConfig = LossConfig()
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-4
    momentum: float = 0.6
    plateau_patience: int = 5
    plateau_delta: float = 1e-4
    c: float = 0.1
    xi: float = 1e-8
    tau: float = 0.5
    min_overlap_voxels: int = 1
    small_max_voxels: int | None = 13
    channels: tuple[int, ...] = (8, 8, 16, 16)
    fused: tuple[int, ...] = (16,)
    low_res: bool = True
    low_res_factor: int = 3
    head_prior: float | None = 0.05
    ndim: int = 2
    dtype: str = "float32"
    eval_batch: int = 16

    @property
    def steps_per_epoch(self) -> int:
        return self.subepochs * math.ceil(self.patches_per_subepoch / self.batch_size)

    def new_optimizer(self, model: ModelState) -> OptimizerState:
        return OptimizerState.for_model(
            model, lr=self.lr, rho=self.rho, eps=self.eps, momentum=self.momentum,
            plateau_patience=self.plateau_patience, plateau_delta=self.plateau_delta)

    def layers(self):
        return default_layers(self.channels, self.fused, low_res=self.low_res,
                              low_res_factor=self.low_res_factor, ndim=self.ndim)


@dataclass(frozen=True)
class Schedule:
    kind: str
    epochs_initial: int = 10
    epochs_visit: int = 5
    rounds: int = 1
    use_si: bool = False

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.epochs_initial < 1 or self.epochs_visit < 1:
            raise ValueError("epoch counts must be at least 1")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")


# ---------------------------------------------------------------------------
# communication ledger


@dataclass(frozen=True)
class TransferEvent:
    seq: int
    src: int
    dst: int
    byte_count: int
    round: int
    epoch_mark: int


@dataclass
class CommLedger:
    events: list[TransferEvent] = field(default_factory=list)

    def record(self, src, dst, byte_count, round, epoch_mark) -> TransferEvent:
        ev = TransferEvent(len(self.events) + 1, src, dst, byte_count, round, epoch_mark)
        self.events.append(ev)
        return ev

    @property
    def totals(self) -> Counter:
        """Transfer count per directed (src, dst) pair."""
        return Counter((e.src, e.dst) for e in self.events)

    @property
    def total_bytes(self) -> int:
        return sum(e.byte_count for e in self.events)

    def __len__(self):
        return len(self.events)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "from", "to", "bytes", "round"])
        for e in self.events:
            w.writerow([e.seq, e.src, e.dst, e.byte_count, e.round])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# histories


@dataclass
class Snapshot:
    center: int
    round: int
    cum_epochs: int
    report: MetricsReport
    transfers_so_far: int = 0
    bytes_so_far: int = 0


@dataclass
class VisitTrace:
    center: int
    round: int
    losses: list[float] = field(default_factory=list)      # mean total loss per epoch
    val_sensitivity: list[float] = field(default_factory=list)
    steps: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    lr_final: float = 0.0


@dataclass
class RunHistory:
    kind: str
    use_si: bool
    snapshots: list[Snapshot]
    final_model: ModelState
    ledger: CommLedger
    traces: list[VisitTrace] = field(default_factory=list)
    final_si: SIState | None = None

    @property
    def final_report(self) -> MetricsReport:
        return self.snapshots[-1].report

    def sensitivities(self) -> list[float]:
        return [s.report.sensitivity for s in self.snapshots]

    def step_provenance(self) -> list[tuple[int, tuple[int, ...]]]:
        return [s for t in self.traces for s in t.steps]


METRIC_COLUMNS = ["run_id", "schedule", "use_si", "center", "round", "cum_epochs",
                  "sensitivity", "precision", "afpr", "dsc", "transfers_so_far",
                  "bytes_so_far"]


def history_rows(history: RunHistory, run_id: str) -> list[list]:
    rows = []
    for s in history.snapshots:
        r = s.report
        rows.append([run_id, history.kind, int(history.use_si), s.center, s.round,
                     s.cum_epochs, f"{r.sensitivity:.6f}", f"{r.precision:.6f}",
                     f"{r.afpr:.6f}", f"{r.mean_tp_dsc:.6f}", s.transfers_so_far,
                     s.bytes_so_far])
    return rows


# ---------------------------------------------------------------------------
# training


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


STREAM_INIT, STREAM_VISIT, STREAM_MIXED, STREAM_SWEEP = 1, 2, 3, 4


def initial_model(cfg: TrainConfig, seed: int) -> ModelState:
    return build_model(cfg.layers(), stream(seed, STREAM_INIT), dtype=np.dtype(cfg.dtype),
                       head_prior=cfg.head_prior)


def train_step(model: ModelState, opt: OptimizerState, si: SIState | None, batch,
               loss_cfg: LossConfig) -> float:
    """One optimizer step on ``batch``; returns the total loss.

    The SI path integral is fed the segmentation-loss gradient only, never
    the penalty gradient.
    """
    pred = model.forward(batch.inputs)
    loss = seg_loss(pred, batch.targets, loss_cfg)
    if not math.isfinite(loss.total):
        raise NumericalError("non-finite segmentation loss")
    g_seg = model.backward(loss.grad)
    penalty, g = 0.0, g_seg
    if si is not None and si.center_index > 0:
        penalty, g_pen = si_penalty(model.theta, si)
        g = g_seg + g_pen
    delta = optimizer_step(opt, model, g)
    if si is not None:
        si_accumulate(si, StepRecord(g_seg, delta))
    return loss.total + penalty


def train_local(center: Center, model: ModelState, si: SIState | None, epochs: int,
                cfg: TrainConfig, *, rng: np.random.Generator,
                val_set: Sequence[LabeledVolume] = (), opt: OptimizerState | None = None,
                epoch_offset: int = 0, round: int = 1):
    """Train a copy of ``model`` at ``center`` for ``epochs`` epochs.

    Each epoch runs ``subepochs`` rounds of: sample patches from a random
    subset of the center's volumes, then step through them in mini-batches.
    The learning rate is halved on validation-sensitivity plateaus; the
    validation set is only evaluated when the visit is long enough for the
    plateau rule to fire.  SI state is accumulated but not consolidated.

    Returns ``(model, si, trace)``.
    """
    if not center.train_set:
        raise ValueError(f"center {center.id} has no training data")
    model = model.copy()
    if epochs == 0:
        return model, si, VisitTrace(center.id, round)
    opt = cfg.new_optimizer(model) if opt is None else opt
    trace = VisitTrace(center.id, round)
    vols = center.train_set
    center_of = {v.volume_id: v.center for v in vols}
    validate = len(val_set) > 0 and epochs > cfg.plateau_patience
    for epoch in range(epochs):
        losses = []
        for _ in range(cfg.subepochs):
            k = min(cfg.volumes_per_subepoch, len(vols))
            chosen = [vols[i] for i in rng.choice(len(vols), k, replace=False)]
            patches = sample_from_volumes(chosen, cfg.patches_per_subepoch, cfg.patch_size,
                                          rng, cfg.fg_fraction, cfg.augment,
                                          np.dtype(cfg.dtype))
            for start in range(0, len(patches), cfg.batch_size):
                batch = take(patches, np.arange(start, min(start + cfg.batch_size, len(patches))))
                try:
                    losses.append(train_step(model, opt, si, batch, cfg.loss))
                except NumericalError as exc:
                    raise NumericalError(
                        f"center {center.id}, round {round}, epoch {epoch_offset + epoch}: {exc}"
                    ) from exc
                owners = tuple(sorted({center_of[p[0]] for p in batch.provenance}))
                trace.steps.append((epoch_offset + epoch, owners))
        trace.losses.append(float(np.mean(losses)))
        if validate:
            rep = evaluate(model, val_set, cfg.tau, cfg.min_overlap_voxels,
                           cfg.small_max_voxels, cfg.eval_batch)
            trace.val_sensitivity.append(rep.sensitivity)
            step_lr_on_plateau(opt, trace.val_sensitivity)
    trace.lr_final = opt.lr
    return model, si, trace


def transfer(model: ModelState, si: SIState | None, src: Center, dst: Center,
             ledger: CommLedger, round: int = 1, epoch_mark: int = 0):
    """Ship ``model`` (and SI state) from ``src`` to ``dst``.

    Consolidates SI at departure, serializes, records the exact byte count
    and returns the deserialized ``(model, si)`` seen by the receiver.
    """
    if src.id == dst.id:
        raise ValueError("a center cannot transfer to itself")
    if model.dtype != np.float32:
        raise CheckpointError("only float32 models can be transferred bit-exactly")
    if si is not None:
        si = si_consolidate(si, model.theta)
    raw = encode(model, si)
    received, received_si = decode(raw)
    if not received.same_as(model) or (si is not None and not received_si.same_as(si)):
        raise CheckpointError("checkpoint round trip changed the model")
    received.version = model.version + 1
    ledger.record(src.id, dst.id, len(raw), round, epoch_mark)
    return received, received_si


def _evaluate(model, test_set, cfg):
    return evaluate(model, test_set, cfg.tau, cfg.min_overlap_voxels, cfg.small_max_voxels,
                    cfg.eval_batch)


def _ring(centers, schedule, cfg, visits, *, val_set, test_set, seed, init):
    """Shared ring walk.  ``visits`` is a list of (center index, round, epochs)."""
    model = initial_model(cfg, seed) if init is None else init.copy()
    si = SIState.fresh(model.theta, cfg.c, cfg.xi) if schedule.use_si else None
    ledger = CommLedger()
    snaps, traces = [], []
    cum = 0
    for n, (ci, rnd, epochs) in enumerate(visits):
        center = centers[ci]
        if n > 0:
            prev = centers[visits[n - 1][0]]
            model, si = transfer(model, si, prev, center, ledger, visits[n - 1][1], cum)
        model, si, trace = train_local(center, model, si, epochs, cfg,
                                       rng=stream(seed, STREAM_VISIT, center.id, rnd),
                                       val_set=val_set, epoch_offset=cum, round=rnd)
        cum += epochs
        traces.append(trace)
        snaps.append(Snapshot(center.id, rnd, cum, _evaluate(model, test_set, cfg),
                              len(ledger), ledger.total_bytes))
    return RunHistory(schedule.kind, schedule.use_si, snaps, model, ledger, traces, si)


def run_svcl(centers: Sequence[Center], schedule: Schedule, cfg: TrainConfig, *,
             val_set=(), test_set, seed: int = 0, init: ModelState | None = None) -> RunHistory:
    """Visit every center once; the first visit is ``epochs_initial`` long."""
    if schedule.kind != "svcl":
        raise ValueError("run_svcl needs an svcl schedule")
    visits = [(i, 1, schedule.epochs_initial if i == 0 else schedule.epochs_visit)
              for i in range(len(centers))]
    return _ring(centers, schedule, cfg, visits, val_set=val_set, test_set=test_set,
                 seed=seed, init=init)


def run_icl(centers: Sequence[Center], schedule: Schedule, cfg: TrainConfig, *,
            val_set=(), test_set, seed: int = 0, init: ModelState | None = None) -> RunHistory:
    """``rounds`` passes over the ring, ``epochs_visit`` epochs per visit,
    wrapping from the last center back to the first between rounds."""
    if schedule.kind != "icl":
        raise ValueError("run_icl needs an icl schedule")
    visits = [(i, r + 1, schedule.epochs_visit)
              for r in range(schedule.rounds) for i in range(len(centers))]
    return _ring(centers, schedule, cfg, visits, val_set=val_set, test_set=test_set,
                 seed=seed, init=init)


def run_isolated(centers: Sequence[Center], cfg: TrainConfig, epochs: int, *, val_set=(),
                 test_set, seed: int = 0) -> list[RunHistory]:
    """One independent model per center, each from the same initial weights."""
    out = []
    for center in centers:
        model, _, trace = train_local(center, initial_model(cfg, seed), None, epochs, cfg,
                                      rng=stream(seed, STREAM_VISIT, center.id, 1),
                                      val_set=val_set)
        snap = Snapshot(center.id, 1, epochs, _evaluate(model, test_set, cfg))
        out.append(RunHistory("isolated", False, [snap], model, CommLedger(), [trace]))
    return out


def pooled(centers: Sequence[Center]) -> list[LabeledVolume]:
    return [v for c in centers for v in c.train_set]


def run_mixed(centers: Sequence[Center], cfg: TrainConfig, epochs: int, *, val_set=(),
              test_set, seed: int = 0, snapshot_every: int | None = None,
              order: str = "shuffled", volumes: Sequence[LabeledVolume] | None = None,
              init: ModelState | None = None) -> RunHistory:
    """Train one model on the union of all centers' data.

    ``order="blocked"`` feeds epoch ``e`` from center ``e mod N`` only, the
    ordering iterative continual learning with one-epoch visits amounts to.
    A single optimizer persists for the whole run.  ``volumes`` overrides
    the pooled training set (used by the data-amount sweep).
    """
    if order not in ("shuffled", "blocked"):
        raise ValueError(f"unknown order {order!r}")
    every = snapshot_every or epochs
    model = initial_model(cfg, seed) if init is None else init.copy()
    opt = cfg.new_optimizer(model)
    union = Center(0, list(pooled(centers) if volumes is None else volumes), 0)
    rng = stream(seed, STREAM_MIXED)
    snaps, traces = [], []
    val_hist: list[float] = []
    for start in range(0, epochs, every):
        n_ep = min(every, epochs - start)
        trace = VisitTrace(0, 0)
        for e in range(start, start + n_ep):
            src = centers[e % len(centers)] if order == "blocked" else union
            # one-epoch chunks keep the optimizer and plateau state continuous
            model, _, t = train_local(src, model, None, 1, replace(cfg, plateau_patience=10**9),
                                      rng=rng, opt=opt, epoch_offset=e)
            trace.steps += t.steps
            trace.losses += t.losses
            if len(val_set):
                rep = _evaluate(model, val_set, cfg)
                val_hist.append(rep.sensitivity)
                step_lr_on_plateau(opt, val_hist)
        trace.lr_final = opt.lr
        traces.append(trace)
        snaps.append(Snapshot(0, len(snaps) + 1, start + n_ep, _evaluate(model, test_set, cfg)))
    return RunHistory("mixed", False, snaps, model, CommLedger(), traces)


def run_schedule(scenario: Scenario, schedule: Schedule, cfg: TrainConfig,
                 seed: int = 0) -> list[RunHistory]:
    """Dispatch on ``schedule.kind``.  Mixed runs get the same total epoch
    budget as an ICL run of the same schedule."""
    kw = dict(val_set=scenario.val_set, test_set=scenario.test_set, seed=seed)
    cs = scenario.centers
    if schedule.kind == "svcl":
        return [run_svcl(cs, schedule, cfg, **kw)]
    if schedule.kind == "icl":
        return [run_icl(cs, schedule, cfg, **kw)]
    if schedule.kind == "isolated":
        return run_isolated(cs, cfg, schedule.epochs_initial, **kw)
    budget = schedule.rounds * len(cs) * schedule.epochs_visit
    return [run_mixed(cs, cfg, budget, snapshot_every=schedule.epochs_visit, **kw)]
