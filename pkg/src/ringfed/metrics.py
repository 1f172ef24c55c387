"""Lesion-level detection metrics.

Lesions are connected components under full-neighbourhood connectivity.
A truth lesion counts as detected when some predicted component overlaps it
by at least ``min_overlap_voxels``; a predicted component that overlaps no
truth lesion is a false positive.  Only the Dice score is voxel based.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .nn import context_margin
from .synthdata import FULL_CONNECTIVITY


@dataclass
class LesionSet:
    components: list[np.ndarray]  # flat voxel indices, one array per lesion
    source: str = "prediction"
    shape: tuple[int, ...] = ()

    def __len__(self):
        return len(self.components)


def connected_components(mask, source: str = "prediction") -> LesionSet:
    mask = np.asarray(mask, bool)
    if mask.ndim not in FULL_CONNECTIVITY:
        raise ValueError(f"masks must be 2D or 3D, got {mask.ndim}D")
    lab, n = ndimage.label(mask, FULL_CONNECTIVITY[mask.ndim])
    flat = lab.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    comps = [np.sort(order[bounds[i]:bounds[i + 1]]) for i in range(n)]
    return LesionSet(comps, source, mask.shape)


def threshold_predictions(prob, tau: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= tau


@dataclass
class Match:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, list[int]]]  # (truth index, predicted components hitting it)
    detected: list[bool] = field(default_factory=list)


def match_lesions(pred: LesionSet, truth: LesionSet, min_overlap_voxels: int = 1) -> Match:
    if pred.shape and truth.shape and pred.shape != truth.shape:
        raise ValueError(f"extent mismatch: {pred.shape} vs {truth.shape}")
    n_pred, n_truth = len(pred), len(truth)
    hits = np.zeros((n_pred, n_truth), np.int64)
    if n_pred and n_truth:
        t_vox = np.concatenate(truth.components)
        t_id = np.repeat(np.arange(n_truth), [len(c) for c in truth.components])
        p_vox = np.concatenate(pred.components)
        p_id = np.repeat(np.arange(n_pred), [len(c) for c in pred.components])
        order = np.argsort(t_vox)
        t_vox, t_id = t_vox[order], t_id[order]
        pos = np.clip(np.searchsorted(t_vox, p_vox), 0, len(t_vox) - 1)
        inside = t_vox[pos] == p_vox
        np.add.at(hits, (p_id[inside], t_id[pos[inside]]), 1)
    hit = hits >= min_overlap_voxels
    detected = hit.any(axis=0) if len(pred) else np.zeros(len(truth), bool)
    fp = int((~hit.any(axis=1)).sum()) if len(truth) else len(pred)
    pairs = [(j, [int(i) for i in np.flatnonzero(hit[:, j])])
             for j in range(len(truth)) if detected[j]]
    tp = int(detected.sum())
    return Match(tp, fp, len(truth) - tp, pairs, [bool(d) for d in detected])


@dataclass
class MetricsReport:
    sensitivity: float
    precision: float
    afpr: float
    mean_tp_dsc: float
    tp: int
    fp: int
    fn: int
    n_volumes: int
    small_tp_ratio: float = 0.0
    small_tp: int = 0
    flags: tuple[str, ...] = ()

    @classmethod
    def from_counts(cls, tp, fp, fn, n_volumes, dsc_values=(), small_tp=0):
        """Metrics from raw counts.  Empty denominators yield the neutral value
        (1 for ratios of detections, 0 for the Dice mean and small ratio)
        and raise the matching flag."""
        flags = []
        if tp + fn > 0:
            sens = tp / (tp + fn)
        else:
            sens = 1.0
            flags.append("sensitivity_undefined")
        if tp + fp > 0:
            prec = tp / (tp + fp)
        else:
            prec = 1.0
            flags.append("precision_undefined")
        if len(dsc_values):
            dsc = float(np.mean(dsc_values))
        else:
            dsc = 0.0
            flags.append("dsc_undefined")
        if tp > 0:
            ratio = small_tp / tp
        else:
            ratio = 0.0
            flags.append("small_ratio_undefined")
        afpr = fp / n_volumes if n_volumes else 0.0
        return cls(sens, prec, afpr, dsc, int(tp), int(fp), int(fn), int(n_volumes),
                   ratio, int(small_tp), tuple(flags))


@dataclass
class VolumeResult:
    match: Match
    dsc: list[float]
    small_tp: int


def score_volume(pred_mask, truth_mask, min_overlap_voxels: int = 1,
                 small_max_voxels: int | None = None) -> VolumeResult:
    pred = connected_components(pred_mask, "prediction")
    truth = connected_components(truth_mask, "truth")
    m = match_lesions(pred, truth, min_overlap_voxels)
    dsc, small = [], 0
    for j, members in m.pairs:
        t = truth.components[j]
        p = np.concatenate([pred.components[i] for i in members])
        inter = np.intersect1d(p, t, assume_unique=True).size
        dsc.append(2 * inter / (p.size + t.size))
        if small_max_voxels is not None and t.size <= small_max_voxels:
            small += 1
    return VolumeResult(m, dsc, small)


def evaluate_masks(pred_masks: Sequence, truth_masks: Sequence, min_overlap_voxels: int = 1,
                   small_max_voxels: int | None = None) -> MetricsReport:
    if len(pred_masks) != len(truth_masks):
        raise ValueError("need one prediction per truth mask")
    if len(truth_masks) == 0:
        raise ValueError("empty test set")
    tp = fp = fn = small = 0
    dsc: list[float] = []
    for p, t in zip(pred_masks, truth_masks):
        r = score_volume(p, t, min_overlap_voxels, small_max_voxels)
        tp += r.match.tp
        fp += r.match.fp
        fn += r.match.fn
        small += r.small_tp
        dsc += r.dsc
    return MetricsReport.from_counts(tp, fp, fn, len(truth_masks), dsc, small)


def predict_volumes(model, volumes, batch_size: int = 16) -> list[np.ndarray]:
    """Full-volume probability maps, run in batches of equal extent.

    Each volume is mirror padded by the network's context margin (rounded so
    the padded extent fits the low-res grid) and cropped back afterwards, so
    border voxels see the same kind of context as training patches do.
    """
    margin, grid = context_margin(model.layers)
    out = []
    for start in range(0, len(volumes), batch_size):
        chunk = volumes[start:start + batch_size]
        extent = chunk[0].image.shape
        pad = [(margin, margin + (-(e + 2 * margin)) % grid) for e in extent]
        crop = tuple(slice(lo, lo + e) for (lo, _), e in zip(pad, extent))
        x = np.stack([np.pad(v.image, pad, mode="symmetric")[None] for v in chunk])
        probs = model.forward(x.astype(model.dtype, copy=False))
        model._tape = None
        out += [p[0][crop] for p in probs]
    return out


def evaluate(model, test_set, tau: float = 0.5, min_overlap_voxels: int = 1,
             small_max_voxels: int | None = None, batch_size: int = 16) -> MetricsReport:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    probs = predict_volumes(model, test_set, batch_size)
    preds = [threshold_predictions(p, tau) for p in probs]
    return evaluate_masks(preds, [v.mask for v in test_set], min_overlap_voxels,
                          small_max_voxels)
