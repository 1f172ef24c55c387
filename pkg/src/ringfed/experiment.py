"""Execute a :class:`~ringfed.config.ScenarioConfig`: the configured runs for
one seed, and the data-amount sweep.

These functions return plain results; writing files is the CLI's job.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .federation import (STREAM_SWEEP, RunHistory, history_rows, pooled, run_icl,
                         run_isolated, run_mixed, run_svcl, stream)
from .metrics import MetricsReport
from .synthdata import Scenario, build_scenario


def scenario_for(cfg: ScenarioConfig, seed: int) -> Scenario:
    return build_scenario(cfg.task, cfg.n_centers, list(cfg.per_center), cfg.val_volumes,
                          cfg.test_volumes, cfg.shifts, master_seed=seed,
                          eval_shift=cfg.eval_shift)


def run_id(kind: str, seed: int, center: int | None = None) -> str:
    base = f"{kind}-c{center}" if center is not None else kind
    return f"{base}-s{seed}"


@dataclass
class SeedResult:
    seed: int
    test_hash: str
    runs: list[tuple[str, RunHistory]] = field(default_factory=list)

    def get(self, kind: str) -> RunHistory:
        """The single history of ``kind`` (not valid for ``isolated``)."""
        for rid, h in self.runs:
            if rid == run_id(kind, self.seed):
                return h
        raise KeyError(kind)

    def isolated(self) -> list[RunHistory]:
        return [h for rid, h in self.runs if rid.startswith("isolated-")]

    def rows(self) -> list[list]:
        return [row for rid, h in self.runs for row in history_rows(h, rid)]


def run_kind(cfg: ScenarioConfig, scenario: Scenario, kind: str,
             seed: int) -> list[tuple[str, RunHistory]]:
    """Histories for one entry of ``schedule.runs``."""
    kw = dict(val_set=scenario.val_set, test_set=scenario.test_set, seed=seed)
    centers, train = scenario.centers, cfg.train
    if kind == "isolated":
        hs = run_isolated(centers, train, cfg.epochs_initial, **kw)
        return [(run_id(kind, seed, h.snapshots[0].center), h) for h in hs]
    if kind == "mixed":
        h = run_mixed(centers, train, cfg.mixed_budget, snapshot_every=cfg.icl_epochs_visit,
                      **kw)
    elif kind.startswith("svcl"):
        h = run_svcl(centers, cfg.schedule(kind), train, **kw)
    elif kind.startswith("icl"):
        h = run_icl(centers, cfg.schedule(kind), train, **kw)
    else:
        raise ValueError(f"unknown run kind {kind!r}")
    return [(run_id(kind, seed), h)]


def run_seed(cfg: ScenarioConfig, seed: int, kinds=None) -> SeedResult:
    scenario = scenario_for(cfg, seed)
    out = SeedResult(seed, scenario.test_hash())
    for kind in (cfg.runs if kinds is None else kinds):
        out.runs += run_kind(cfg, scenario, kind, seed)
    return out


# ---------------------------------------------------------------------------
# data-amount sweep

SWEEP_COLUMNS = ["seed", "fraction", "n_volumes", "sensitivity", "precision", "afpr",
                 "dsc", "small_tp_ratio"]


@dataclass
class SweepPoint:
    seed: int
    fraction: float
    n_volumes: int
    report: MetricsReport
    history: RunHistory
    test_hash: str = ""

    def row(self) -> list:
        r = self.report
        return [self.seed, f"{self.fraction:g}", self.n_volumes, f"{r.sensitivity:.6f}",
                f"{r.precision:.6f}", f"{r.afpr:.6f}", f"{r.mean_tp_dsc:.6f}",
                f"{r.small_tp_ratio:.6f}"]


def nested_subsets(n: int, fractions, rng: np.random.Generator) -> list[list[int]]:
    """Index subsets of ``range(n)``, one per fraction, each a prefix of one
    seeded permutation (so smaller fractions are contained in larger ones).
    Indices come back sorted, so fraction 1.0 is the pooled order itself."""
    perm = rng.permutation(n)
    out = []
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError("fractions must lie in (0, 1]")
        k = max(1, int(round(f * n)))
        out.append(sorted(int(i) for i in perm[:k]))
    return out


def sweep_seed(cfg: ScenarioConfig, seed: int, fractions=None) -> list[SweepPoint]:
    """One mixed model per fraction of the pooled training set, all with the
    same epoch budget."""
    fractions = cfg.sweep_fractions if fractions is None else tuple(fractions)
    scenario = scenario_for(cfg, seed)
    pool = pooled(scenario.centers)
    epochs = cfg.sweep_epochs or cfg.mixed_budget
    points = []
    for f, idx in zip(fractions, nested_subsets(len(pool), fractions,
                                                stream(seed, STREAM_SWEEP))):
        vols = None if len(idx) == len(pool) else [pool[i] for i in idx]
        h = run_mixed(scenario.centers, cfg.train, epochs, val_set=scenario.val_set,
                      test_set=scenario.test_set, seed=seed, volumes=vols)
        points.append(SweepPoint(seed, f, len(idx), h.final_report, h,
                                 scenario.test_hash()))
    return points


def sweep_summary(points: list[SweepPoint]) -> list[list]:
    """Median over seeds per fraction: fraction, n_volumes, sensitivity,
    small_tp_ratio, afpr."""
    fracs = sorted({p.fraction for p in points})
    rows = []
    for f in fracs:
        sel = [p for p in points if p.fraction == f]
        med = lambda key: float(np.median([getattr(p.report, key) for p in sel]))
        rows.append([f"{f:g}", int(np.median([p.n_volumes for p in sel])),
                     f"{med('sensitivity'):.6f}", f"{med('small_tp_ratio'):.6f}",
                     f"{med('afpr'):.6f}"])
    return rows


SUMMARY_COLUMNS = ["fraction", "n_volumes", "sensitivity_median", "small_tp_ratio_median",
                   "afpr_median"]
