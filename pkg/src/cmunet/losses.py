"""Segmentation objective: weighted BCE on logits plus soft Dice."""

from __future__ import annotations

import numpy as np

from cmunet.engine import ops
from cmunet.engine.tensor import Tensor, as_tensor, record
from cmunet.errors import DimensionError, ValidationError

DICE_SMOOTH = 1.0
BCE_WEIGHT = 0.5


def _check_pair(pred: Tensor, target: Tensor, what: str) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: prediction {pred.shape} vs target {target.shape}", axis="shape")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError(f"{what}: target values must be 0 or 1")


def bce_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy, evaluated on logits in the overflow-free form
    max(z, 0) - z*y + log(1 + exp(-|z|))."""
    target = as_tensor(target, like=logits)
    _check_pair(logits, target, "bce_loss")
    z = logits.data
    y = target.data.astype(z.dtype, copy=False)
    per_pixel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    out = np.asarray(per_pixel.sum() / count, dtype=z.dtype)

    def backward_fn(g):
        return (g * (ops._sigmoid(z) - y) / count, None)

    return record("bce_loss", [logits, target], out, backward_fn)


def dice_loss(probs: Tensor, target: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s), summed over the whole batch."""
    if smooth <= 0:
        raise ValidationError(f"dice smooth must be positive, got {smooth}")
    target = as_tensor(target, like=probs)
    _check_pair(probs, target, "dice_loss")
    p = probs.data
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("dice_loss: probabilities must lie in [0, 1]")
    y = target.data.astype(p.dtype, copy=False)
    inter = float((p * y).sum())
    denom = float(p.sum()) + float(y.sum()) + smooth
    num = 2.0 * inter + smooth
    out = np.asarray(1.0 - num / denom, dtype=p.dtype)

    def backward_fn(g):
        # d/dp of -num/denom
        grad = -(2.0 * y * denom - num) / (denom * denom)
        return (g * grad.astype(p.dtype), None)

    return record("dice_loss", [probs, target], out, backward_fn)


def combined_loss(logits: Tensor, target: Tensor, bce_weight: float = BCE_WEIGHT,
                  smooth: float = DICE_SMOOTH) -> Tensor:
    """bce_weight * BCE(logits) + Dice(sigmoid(logits))."""
    target = as_tensor(target, like=logits)
    bce = bce_loss(logits, target)
    dice = dice_loss(ops.sigmoid(logits), target, smooth)
    return ops.add(ops.mul(bce, bce_weight), dice)
