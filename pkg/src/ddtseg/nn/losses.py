"""Pixel-wise losses returning ``(loss, d loss / d input)``."""
import numpy as np

from ..errors import InvalidTarget, NonFiniteError, ShapeError


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of ``-log softmax(logits)[target]`` over all pixels of the batch.

    ``logits`` is (N, 3, H, W), ``target`` (N, H, W) with values in {0, 1, 2}.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) logits, got {logits.shape}")
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() > 2):
        raise InvalidTarget("class targets must lie in {0, 1, 2}")
    if not np.isfinite(logits).all():
        raise NonFiniteError("logits hold NaN or Inf")
    t = target.astype(np.intp)[:, None]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n_pix = target.size
    loss = -np.take_along_axis(logp, t, axis=1).sum() / n_pix
    grad = np.exp(logp)
    np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1.0, axis=1)
    return float(loss), grad / n_pix


def mae(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error with subgradient ``sign(pred - target) / N`` (sign(0) = 0)."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.ndim != 4 or pred.shape[1] != 1:
        raise ShapeError(f"expected (N, 1, H, W) predictions, got {pred.shape}")
    if target.shape == pred.shape[:1] + pred.shape[2:]:
        target = target[:, None]
    if target.shape != pred.shape:
        raise ShapeError(f"target {target.shape} does not match prediction {pred.shape}")
    if not np.isfinite(pred).all():
        raise NonFiniteError("predictions hold NaN or Inf")
    diff = pred - target
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def loss_cross_entropy(logits, target):
    return cross_entropy(logits, target)


def loss_mae(pred, target):
    return mae(pred, target)
