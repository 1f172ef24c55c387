"""Synaptic Intelligence bookkeeping for sequential training across centers.

Lifecycle per center: :func:`si_accumulate` after every optimizer step with
the gradient of the segmentation loss alone, :func:`si_consolidate` once when
the model leaves the center, and :func:`si_penalty` while training at any
later center.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig, LossValue, seg_loss


class ConsolidationError(RuntimeError):
    pass


@dataclass(eq=False)
class SIState:
    w_acc: np.ndarray       # running path contribution at the current center
    omega: np.ndarray       # consolidated importance, summed over past centers
    anchor: np.ndarray      # parameters at the end of the previous center
    prev_final: np.ndarray  # parameters at the last consolidation
    c: float = 0.1
    xi: float = 1e-8
    center_index: int = 0   # number of consolidations so far
    steps_since_consolidation: int = field(default=0, compare=False)

    def __post_init__(self):
        n = len(self.w_acc)
        if not (len(self.omega) == len(self.anchor) == len(self.prev_final) == n):
            raise ValueError("SI vectors must all have the parameter count")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if np.any(self.omega < 0):
            raise ValueError("omega must be non-negative")

    @classmethod
    def fresh(cls, theta: np.ndarray, c: float = 0.1, xi: float = 1e-8) -> "SIState":
        zeros = np.zeros_like(theta)
        return cls(zeros.copy(), zeros.copy(), theta.copy(), theta.copy(), c, xi)

    def copy(self) -> "SIState":
        return SIState(self.w_acc.copy(), self.omega.copy(), self.anchor.copy(),
                       self.prev_final.copy(), self.c, self.xi, self.center_index,
                       self.steps_since_consolidation)

    def same_as(self, other: "SIState") -> bool:
        vecs = ("w_acc", "omega", "anchor", "prev_final")
        return (all(getattr(self, v).tobytes() == getattr(other, v).tobytes() for v in vecs)
                and self.c == other.c and self.xi == other.xi
                and self.center_index == other.center_index)


@dataclass(frozen=True)
class StepRecord:
    g: np.ndarray            # segmentation-loss gradient at the step
    delta_theta: np.ndarray  # parameter change the optimizer applied
    t: int = 0


def si_accumulate(si: SIState, rec: StepRecord) -> SIState:
    """w_acc += -g * delta_theta, elementwise."""
    if not (len(rec.g) == len(rec.delta_theta) == len(si.w_acc)):
        raise ValueError("step record length does not match SI state")
    si.w_acc -= (rec.g * rec.delta_theta).astype(si.w_acc.dtype, copy=False)
    si.steps_since_consolidation += 1
    return si


def si_consolidate(si: SIState, theta_final: np.ndarray) -> SIState:
    """Fold the path contributions of the finished center into omega.

    Negative contributions are clipped to zero so omega never decreases.
    """
    if si.steps_since_consolidation == 0 and si.center_index > 0:
        raise ConsolidationError("consolidating twice without training in between")
    if len(theta_final) != len(si.w_acc):
        raise ValueError("parameter length does not match SI state")
    dt = si.w_acc.dtype
    moved = theta_final.astype(dt) - si.anchor
    si.omega += np.maximum(si.w_acc, 0) / (moved * moved + dt.type(si.xi))
    si.prev_final = theta_final.astype(dt, copy=True)
    si.anchor = theta_final.astype(dt, copy=True)
    si.w_acc[:] = 0
    si.center_index += 1
    si.steps_since_consolidation = 0
    return si


def si_penalty(theta: np.ndarray, si: SIState | None) -> tuple[float, np.ndarray]:
    """c * sum(omega * (anchor - theta)^2) and its gradient over theta."""
    if si is None or si.center_index == 0 or si.c == 0:
        return 0.0, np.zeros_like(theta)
    diff = theta - si.anchor
    value = float(si.c * np.sum(si.omega.astype(np.float64) * diff.astype(np.float64) ** 2))
    grad = (2 * si.c) * si.omega * diff
    return value, grad.astype(theta.dtype, copy=False)


@dataclass
class TotalLoss(LossValue):
    penalty: float = 0.0
    penalty_grad: np.ndarray | None = None
    seg: float = 0.0


def total_loss(pred, target, cfg: LossConfig, theta, si: SIState | None) -> TotalLoss:
    """Segmentation loss plus the SI penalty.

    ``grad`` is with respect to the predictions (segmentation part only);
    the parameter gradient is ``backward(grad) + penalty_grad``.
    """
    seg = seg_loss(pred, target, cfg)
    pen, pen_grad = si_penalty(theta, si)
    return TotalLoss(seg.total + pen, seg.bce, seg.vss, seg.grad,
                     penalty=pen, penalty_grad=pen_grad, seg=seg.total)
