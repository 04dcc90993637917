"""Adam and the reduce-on-plateau learning-rate rule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence

import numpy as np

from .layers import Parameter


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    if state.t >= np.iinfo(np.int64).max:
        raise OverflowError("Adam step counter overflow")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype, copy=False)


@dataclass
class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its loss is below the best so far by more than
    ``min_delta``. The counter restarts after each reduction.
    """

    lr: float = 1e-3
    patience: int = 10
    factor: float = 0.1
    min_delta: float = 1e-4
    best: float = float("inf")
    bad_epochs: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")

    def step(self, loss: float) -> float:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def lr_on_plateau(history: Sequence[float], lr: float, patience: int = 10,
                  factor: float = 0.1, min_delta: float = 1e-4) -> float:
    """Learning rate after replaying ``history`` (one validation loss per epoch)."""
    sched = PlateauScheduler(lr, patience, factor, min_delta)
    for loss in history:
        sched.step(loss)
    return sched.lr
