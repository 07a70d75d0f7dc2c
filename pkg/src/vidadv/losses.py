"""Losses used by training and by the attacks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    oh = np.zeros((labels.shape[0], k), dtype=dtype)
    oh[np.arange(labels.shape[0]), labels] = 1
    return oh


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-softmax probability of the true class.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-sample vector).
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    oh = _one_hot(labels, logits.shape[1], logits.dtype)
    per = -T.tsum(T.log_softmax(logits) * oh, axis=1)
    if reduction == "none":
        return per
    if reduction == "sum":
        return T.tsum(per)
    return T.mean(per)


def cw_margin_loss(logits: Tensor, labels, margin: float = 0.05, reduction: str = "mean") -> Tensor:
    """``max(z_y - max_{j != y} z_j, -margin)``; minimising it pushes the true class down."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    oh = _one_hot(labels, logits.shape[1], logits.dtype)
    z_true = T.tsum(logits * oh, axis=1)
    z_other = T.tmax(T.where(oh.astype(bool), np.float32(-1e30), logits), axis=1)
    per = T.relu(z_true - z_other + margin) - margin
    if reduction == "none":
        return per
    if reduction == "sum":
        return T.tsum(per)
    return T.mean(per)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Squared Frobenius distance per clip divided by ``T*H*W``, averaged over the batch.

    Channels are summed, not averaged, so ``pred = target + 0.1`` with three
    channels gives 0.03.
    """
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 4:
        B, (t, h, w) = 1, pred.shape[:3]
    else:
        B, t, h, w = pred.shape[:4]
    diff = pred - target
    return T.tsum(diff * diff) * (1.0 / (B * t * h * w))


def bce_with_logits(logits: Tensor, target_is_real: bool) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against an all-real or all-fake target."""
    if target_is_real:
        return -T.mean(T.log_sigmoid(logits))
    return -T.mean(T.log_sigmoid(-logits))
