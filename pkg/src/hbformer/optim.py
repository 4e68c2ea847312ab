"""SGD with classic momentum and coupled weight decay, plus a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class LrSchedule:
    lr_init: float = 1e-2
    lr_min: float = 6e-6
    total_steps: int = 500

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.lr_min <= self.lr_init:
            raise ValueError("need 0 <= lr_min <= lr_init")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    """Cosine decay from ``lr_init`` at step 0 to ``lr_min`` at ``total_steps`` (held afterwards)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= sched.total_steps:
        return sched.lr_min
    frac = step / sched.total_steps
    return sched.lr_min + 0.5 * (sched.lr_init - sched.lr_min) * (1 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """One velocity buffer per parameter, in parameter order."""

    velocity: list[np.ndarray]
    momentum: float = 0.98
    weight_decay: float = 1e-6
    current_lr: float = 1e-2
    steps: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params, momentum: float = 0.98, weight_decay: float = 1e-6, lr: float = 1e-2):
        return cls([np.zeros_like(p.data) for p in params], momentum, weight_decay, lr)


def sgd_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState) -> None:
    """``v <- mu*v + g + wd*p``; ``p <- p - lr*v``, in place.

    A missing gradient counts as zero, so weight decay and momentum still act.
    """
    if len(params) != len(state.velocity) or len(grads) != len(params):
        raise ShapeError(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.velocity)} velocity buffers"
        )
    mu, wd, lr = state.momentum, state.weight_decay, state.current_lr
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if v.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ShapeError(f"parameter {i}: shape {p.shape} vs gradient/velocity mismatch")
        v *= mu
        if g is not None:
            v += g
        if wd:
            v += wd * p.data
        if lr:
            p.data -= lr * v
    state.steps += 1
