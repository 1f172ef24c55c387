"""Segmentation objective: binary cross-entropy plus a volume-level
sensitivity-specificity term.

Predictions and targets are arrays whose first axis indexes volumes (or
patches).  Every function returns the loss value together with its analytic
gradient with respect to the predictions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

P_CLIP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.95
    epsilon_den: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon_den <= 0:
            raise ValueError("epsilon_den must be positive")


@dataclass
class LossValue:
    total: float
    bce: float
    vss: float
    grad: np.ndarray  # d total / d pred, same shape as pred


def _check(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def bce_loss(pred, target) -> LossValue:
    """Mean voxelwise binary cross-entropy."""
    pred, target = _check(pred, target)
    p = np.clip(pred.astype(np.float64), P_CLIP, 1 - P_CLIP)
    y = target.astype(np.float64)
    n = p.size
    value = float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))
    grad = (p - y) / (p * (1 - p)) / n
    return LossValue(value, value, 0.0, grad.astype(pred.dtype, copy=False))


def vss_loss(pred, target, cfg: LossConfig = LossConfig()) -> LossValue:
    """alpha * (1 - soft sensitivity) + (1 - alpha) * (1 - soft specificity).

    Computed per volume along axis 0 and averaged.  Volumes with no
    foreground voxel contribute only their specificity term.
    """
    pred, target = _check(pred, target)
    if pred.ndim < 2:
        raise ValueError("vss_loss expects a leading batch axis")
    p = pred.astype(np.float64)
    y = target.astype(np.float64)
    axes = tuple(range(1, p.ndim))
    bshape = (-1,) + (1,) * (p.ndim - 1)
    a, eps = cfg.alpha, cfg.epsilon_den
    n_fg = y.sum(axis=axes)
    n_bg = (1 - y).sum(axis=axes)
    has_fg = (n_fg > 0).astype(np.float64)
    sens = (p * y).sum(axis=axes) / (n_fg + eps)
    spec = ((1 - p) * (1 - y)).sum(axis=axes) / (n_bg + eps)
    per_volume = a * (1 - sens) * has_fg + (1 - a) * (1 - spec)
    batch = p.shape[0]
    value = float(per_volume.mean())
    grad = (-a * has_fg.reshape(bshape) * y / (n_fg.reshape(bshape) + eps)
            + (1 - a) * (1 - y) / (n_bg.reshape(bshape) + eps)) / batch
    return LossValue(value, 0.0, value, grad.astype(pred.dtype, copy=False))


def seg_loss(pred, target, cfg: LossConfig = LossConfig()) -> LossValue:
    b = bce_loss(pred, target)
    v = vss_loss(pred, target, cfg)
    return LossValue(b.bce + v.vss, b.bce, v.vss, b.grad + v.grad)
