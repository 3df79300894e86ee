"""Training loss: per-class binary cross-entropy plus soft Dice complement.

Classes are handled one-vs-rest with sigmoid probabilities: each class
channel contributes BCE(probs, truth) + (1 - softDice(probs, truth)), and
the per-class terms are averaged.  Soft Dice uses smoothing eps = 1e-6 to
guard empty classes (documented constant, not tuned).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, DomainError

DICE_EPS = 1e-6


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(B, H, W) integer labels -> (B, C, H, W) float64 one-hot."""
    b, h, w = labels.shape
    out = np.zeros((b, num_classes, h, w))
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def seg_loss(probs: Tensor, truth_onehot: np.ndarray) -> Tensor:
    """BCE + (1 - soft Dice), averaged over classes; probs strictly in (0, 1)."""
    truth_onehot = np.asarray(truth_onehot, dtype=np.float64)
    if probs.shape != truth_onehot.shape:
        raise DimensionError(
            f"probs {probs.shape} and truth {truth_onehot.shape} shapes differ"
        )
    if probs.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W) probabilities, got {probs.shape}")
    if np.any(probs.data <= 0.0) or np.any(probs.data >= 1.0):
        raise DomainError("probabilities must lie strictly inside (0, 1)")

    t = Tensor(truth_onehot)
    one = Tensor(1.0)
    reduce_axes = (0, 2, 3)  # everything except the class axis

    bce_el = ag.neg(ag.add(
        ag.mul(t, ag.log(probs)),
        ag.mul(ag.sub(one, t), ag.log(ag.sub(one, probs))),
    ))
    bce = ag.mean_(bce_el, axis=reduce_axes)

    eps = Tensor(DICE_EPS)
    inter = ag.sum_(ag.mul(probs, t), axis=reduce_axes)
    totals = ag.add(ag.sum_(probs, axis=reduce_axes), ag.sum_(t, axis=reduce_axes))
    dice = ag.div(ag.add(ag.mul(Tensor(2.0), inter), eps), ag.add(totals, eps))

    return ag.mean_(ag.add(bce, ag.sub(one, dice)))
