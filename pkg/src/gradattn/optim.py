"""Adam, reduce-on-plateau scheduling and early stopping, all monitoring val accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "t": self.t}


def adam_step(params: dict[str, Tensor], state: AdamState) -> AdamState:
    """One Adam update with coupled L2 decay (``grad + wd * w``) and bias correction.

    Every gradient is validated before any parameter moves, so a refused step
    leaves both parameters and moments untouched.
    """
    bad = []
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        if p.grad.shape != p.shape:
            raise DimensionError(f"{name}: grad {p.grad.shape} vs param {p.shape}")
        if not np.all(np.isfinite(p.grad)):
            bad.append(name)
    if bad:
        raise NumericError(f"non-finite gradients in {len(bad)} parameter(s), step refused: {bad[:8]}")

    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)
    return state


@dataclass
class PlateauState:
    lr: float = 1e-3
    patience: int = 3
    factor: float = 0.2
    threshold: float = 1e-4
    best: float = -math.inf
    num_bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ContractError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 0:
            raise ContractError("patience must be >= 0")


def plateau_update(state: PlateauState, val_acc: float) -> tuple[PlateauState, float]:
    """Mode 'max': once the bad-epoch counter exceeds ``patience``, scale lr by ``factor``."""
    if val_acc > state.best + state.threshold:
        state.best = val_acc
        state.num_bad_epochs = 0
    else:
        state.num_bad_epochs += 1
    if state.num_bad_epochs > state.patience:
        state.lr *= state.factor
        state.num_bad_epochs = 0
    return state, state.lr


@dataclass
class EarlyStopState:
    patience: int = 7
    min_delta: float = 0.0
    best: float = -math.inf
    best_epoch: int = -1
    num_bad_epochs: int = 0
    epoch: int = 0
    stop: bool = False


def early_stop_update(state: EarlyStopState, val_acc: float) -> tuple[EarlyStopState, bool]:
    """Stop once ``patience`` consecutive epochs fail to beat the best val accuracy."""
    if val_acc > state.best + state.min_delta:
        state.best = val_acc
        state.best_epoch = state.epoch
        state.num_bad_epochs = 0
    else:
        state.num_bad_epochs += 1
    state.epoch += 1
    state.stop = state.num_bad_epochs >= state.patience
    return state, state.stop
