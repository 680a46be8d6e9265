"""Finite-difference verification of the backward pass."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument, PrecisionError
from . import losses


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def model_loss(model, x, target):
    out = model.forward(x, record_tape=True)
    if model.config.head == "logits3":
        return losses.cross_entropy(out, target)
    return losses.mae(out, target)


def default_target(model, x, seed: int = 0):
    rng = np.random.default_rng(seed)
    n, _, h, w = x.shape
    if model.config.head == "logits3":
        return rng.integers(0, 3, size=(n, h, w))
    return rng.uniform(0.0, 1.0, size=(n, 1, h, w))


def grad_check(model, x, eps: float = 1e-5, target=None, max_params: int | None = None,
               seed: int = 0, floor: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences.

    The loss is cross-entropy for a ``logits3`` head and MAE otherwise,
    against ``target`` (random if omitted). Above ``max_params`` a seeded
    subsample of parameter entries is checked. Relative errors use
    ``max(|a|, |n|, floor)`` as the scale.
    """
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    if model.dtype != np.float64:
        raise PrecisionError("gradient checks need a double-precision model")
    if target is None:
        target = default_target(model, x, seed)
    _, dout = model_loss(model, x, target)
    analytic = model.backward(dout)

    entries = [(name, i) for name, p in model.params.items() for i in range(p.size)]
    if max_params is not None and len(entries) > max_params:
        pick = np.random.default_rng(seed).choice(len(entries), max_params, replace=False)
        entries = [entries[i] for i in sorted(pick.tolist())]

    worst = 0.0
    for name, i in entries:
        flat = model.params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up, _ = model_loss(model, x, target)
        flat[i] = old - eps
        down, _ = model_loss(model, x, target)
        flat[i] = old
        numeric = (up - down) / (2 * eps)
        err = float(relative_error(analytic[name].reshape(-1)[i], numeric, floor))
        worst = max(worst, err)
    model._tape = None
    return worst
