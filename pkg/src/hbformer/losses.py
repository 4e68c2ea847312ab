"""Binary cross-entropy plus soft Dice, lifted to multi-class one-vs-all.

Targets may be an integer label map ``[B, H, W]`` (expanded to one-hot over
``num_classes`` logit channels) or an already one-hot float array of the
same shape as the logits.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import ops
from .tensor import Function, ShapeError, Tensor

DICE_EPS = 1.0


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[B, H, W]`` integer labels -> ``[B, num_classes, H, W]`` indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label {int(labels.max()) if labels.max() >= num_classes else int(labels.min())} "
            f"out of range for {num_classes} classes"
        )
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)


def _target_array(logits: Tensor, target) -> np.ndarray:
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if target.shape == logits.shape:
        if np.issubdtype(target.dtype, np.integer) or target.min() < 0 or target.max() > 1:
            raise ValueError("one-hot targets must be floats in [0, 1]")
        return target.astype(logits.dtype, copy=False)
    if logits.ndim == 4 and target.shape == (logits.shape[0],) + logits.shape[2:]:
        if not np.issubdtype(target.dtype, np.integer):
            raise ValueError("label-map targets must be integers")
        return one_hot(target, logits.shape[1], logits.dtype)
    raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")


class BCEWithLogits(Function):
    """Mean of ``max(z, 0) - z*t + log(1 + exp(-|z|))`` over every element."""

    name = "bce_with_logits"

    @staticmethod
    def forward(ctx, z, t):
        ctx.save(z, t)
        per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(per.mean(), dtype=z.dtype)

    @staticmethod
    def backward(ctx, grad):
        z, t = ctx.saved
        p = expit(z)
        return (grad * (p - t) / z.size).astype(z.dtype), None


def bce_loss(logits: Tensor, target) -> Tensor:
    """Per-class binary cross-entropy on every logit channel, averaged over all elements."""
    t = _target_array(logits, target)
    return BCEWithLogits.apply(logits, Tensor._wrap(t))


def dice_loss(logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` per foreground class, averaged.

    Sums run over the batch and all pixels. With a single logit channel the
    channel itself is the foreground; otherwise channel 0 is background and
    channels ``1..C-1`` are averaged.
    """
    t = _target_array(logits, target)
    p = ops.sigmoid(logits)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = (p * Tensor._wrap(t)).sum(axis=axes)
    p_sum = p.sum(axis=axes)
    t_sum = Tensor._wrap(t.sum(axis=axes))
    dice = (inter * 2.0 + eps) / (p_sum + t_sum + eps)
    fg = dice if logits.shape[1] == 1 else dice[1:]
    return 1.0 - fg.mean()


def bce_dice_loss(logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """Unweighted sum of :func:`bce_loss` and :func:`dice_loss`."""
    return bce_loss(logits, target) + dice_loss(logits, target, eps)
