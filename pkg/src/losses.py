"""
Loss Functions
==============

Scalar losses and their gradients with respect to the prediction.

- mse: mean squared error over all elements (generator reconstruction term)
- bce: binary cross-entropy, predictions clamped to [1e-7, 1 - 1e-7]
- categorical_ce: negative log of the true-class probability, from
  probabilities (softmax output) or raw logits

Reductions accumulate in float64; gradients come back in the prediction dtype.
"""

from typing import Union

import numpy as np

from errors import ShapeError
from layers import softmax

PROB_EPS = 1e-7

ArrayLike = Union[np.ndarray, float, int]


def _check_same_shape(pred: np.ndarray, target: np.ndarray, op: str):
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: prediction shape {pred.shape} != target shape {target.shape}",
                         layer=op, expected=target.shape, actual=pred.shape)


def mse(pred: ArrayLike, target: ArrayLike) -> float:
    """Mean over all elements of (pred - target)^2."""
    pred, target = np.asarray(pred), np.asarray(target)
    _check_same_shape(pred, target, 'mse')
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def mse_grad(pred: ArrayLike, target: ArrayLike) -> np.ndarray:
    pred, target = np.asarray(pred), np.asarray(target)
    _check_same_shape(pred, target, 'mse')
    return (2.0 * (pred - target) / pred.size).astype(pred.dtype)


def _clamp(pred: np.ndarray) -> np.ndarray:
    return np.clip(pred.astype(np.float64), PROB_EPS, 1.0 - PROB_EPS)


def bce(pred: ArrayLike, label: ArrayLike) -> float:
    """
    -(y*log(p) + (1-y)*log(1-p)), averaged over elements.

    label may be a scalar (broadcast over pred) or an array of pred's shape.
    """
    pred = np.asarray(pred)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), pred.shape)
    p = _clamp(pred)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_grad(pred: ArrayLike, label: ArrayLike) -> np.ndarray:
    pred = np.asarray(pred)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), pred.shape)
    p = _clamp(pred)
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / max(pred.size, 1)
    return grad.astype(pred.dtype if pred.dtype.kind == 'f' else np.float32)


def _as_rows(scores: np.ndarray, labels) -> tuple:
    scores = np.asarray(scores)
    single = scores.ndim == 1
    rows = scores[None, :] if single else scores
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if rows.ndim != 2 or len(labels) != rows.shape[0]:
        raise ShapeError(f"categorical_ce: {len(labels)} labels for scores of shape {scores.shape}",
                         layer='categorical_ce', actual=scores.shape)
    k = rows.shape[1]
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise IndexError(f"class index {int(labels[bad][0])} out of range for {k} classes")
    return rows, labels, single


def categorical_ce(scores: ArrayLike, labels, from_logits: bool = False) -> float:
    """
    Mean negative log-likelihood of the true class.

    Args:
        scores: probabilities (rows sum to 1) or logits, shape [K] or [N, K]
        labels: class index or length-N index array
        from_logits: apply softmax to scores first
    """
    rows, labels, _ = _as_rows(scores, labels)
    rows = rows.astype(np.float64)
    probs = softmax(rows) if from_logits else rows
    picked = np.clip(probs[np.arange(len(labels)), labels], PROB_EPS, 1.0)
    return float(np.mean(-np.log(picked)))


def categorical_ce_grad(scores: ArrayLike, labels, from_logits: bool = False) -> np.ndarray:
    """Gradient with respect to `scores` (probabilities or logits), same shape as scores."""
    rows, labels, single = _as_rows(scores, labels)
    n = len(labels)
    idx = np.arange(n)
    if from_logits:
        grad = softmax(rows.astype(np.float64))
        grad[idx, labels] -= 1.0
        grad /= n
    else:
        grad = np.zeros(rows.shape, dtype=np.float64)
        picked = np.clip(rows[idx, labels].astype(np.float64), PROB_EPS, 1.0)
        grad[idx, labels] = -1.0 / (picked * n)
    grad = grad.astype(rows.dtype if rows.dtype.kind == 'f' else np.float32)
    return grad[0] if single else grad
