"""RMSProp with Nesterov-style momentum and a halve-on-plateau schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ModelState, NumericalError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-4
    momentum: float = 0.6
    mean_square: np.ndarray | None = None
    velocity: np.ndarray | None = None
    plateau_patience: int = 5
    plateau_delta: float = 1e-4
    plateau_counter: int = 0
    best: float = -np.inf
    n_seen: int = 0  # validation entries already consumed by the schedule
    n_halvings: int = 0

    @classmethod
    def for_model(cls, model: ModelState, **kwargs) -> "OptimizerState":
        opt = cls(**kwargs)
        opt.mean_square = np.zeros_like(model.theta)
        opt.velocity = np.zeros_like(model.theta)
        return opt


def optimizer_step(opt: OptimizerState, model: ModelState, g: np.ndarray) -> np.ndarray:
    """Apply one update in place and return the parameter change.

    a <- rho a + (1 - rho) g^2
    u <- g / sqrt(a + eps)
    v <- m v - lr u
    theta <- theta + m v - lr u
    """
    if g.shape != model.theta.shape:
        raise ValueError(f"gradient length {g.shape} != theta {model.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient passed to optimizer")
    if opt.mean_square is None:
        opt.mean_square = np.zeros_like(model.theta)
        opt.velocity = np.zeros_like(model.theta)
    dtype = model.theta.dtype
    g = g.astype(dtype, copy=False)
    a, v = opt.mean_square, opt.velocity
    a *= dtype.type(opt.rho)
    a += dtype.type(1 - opt.rho) * g * g
    u = g / np.sqrt(a + dtype.type(opt.eps))
    lr_u = dtype.type(opt.lr) * u
    v *= dtype.type(opt.momentum)
    v -= lr_u
    delta = dtype.type(opt.momentum) * v - lr_u
    model.theta += delta
    return delta


def step_lr_on_plateau(opt: OptimizerState, val_history) -> OptimizerState:
    """Halve ``opt.lr`` once the best validation score stalls for ``patience`` epochs.

    Only history entries not yet seen are consumed, so calling this once per
    epoch with the growing history and once with the full history agree.
    """
    if len(val_history) == 0:
        raise ValueError("empty validation history")
    for value in val_history[opt.n_seen:]:
        if value > opt.best + opt.plateau_delta:
            opt.best = float(value)
            opt.plateau_counter = 0
        else:
            opt.plateau_counter += 1
            if opt.plateau_counter >= opt.plateau_patience:
                opt.lr /= 2
                opt.n_halvings += 1
                opt.plateau_counter = 0
    opt.n_seen = len(val_history)
    return opt
