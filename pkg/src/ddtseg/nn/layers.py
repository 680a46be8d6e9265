"""Forward/backward pairs for the network's layers (NCHW arrays).

Each ``*_forward`` returns ``(out, cache)`` and the matching
``*_backward(dout, cache)`` returns the gradients of its inputs in
argument order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_forward(x, w, b):
    """Stride-1 convolution with zero 'same' padding; ``w`` is (O, C, k, k), k odd."""
    k = w.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, O
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), (cols, w)


def conv_backward(dout, cache):
    cols, w = cache
    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))  # O, C, k, k
    # gradient w.r.t. input: same-padded correlation with the flipped, transposed kernel
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = conv_forward(dout, w_flip, np.zeros(w_flip.shape[0], dtype=dout.dtype))
    return dx, dw, db


def upconv_forward(x, w, b):
    """2x2 transposed convolution with stride 2; ``w`` is (C, O, 2, 2)."""
    n, _, h, wd = x.shape
    o = w.shape[1]
    out = np.einsum("ncij,coab->noiajb", x, w, optimize=True).reshape(n, o, 2 * h, 2 * wd)
    return out + b[None, :, None, None], (x, w)


def upconv_backward(dout, cache):
    x, w = cache
    n, _, h, wd = x.shape
    o = w.shape[1]
    d6 = dout.reshape(n, o, h, 2, wd, 2)
    dx = np.einsum("noiajb,coab->ncij", d6, w, optimize=True)
    dw = np.einsum("ncij,noiajb->coab", x, d6, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def _windows(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool_forward(x):
    win = _windows(x)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(dout, cache):
    shape, idx = cache
    n, c, h, w = shape
    win = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    dx = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return (dx,)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return (dout * mask,)


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout, out):
    return (dout * out * (1.0 - out),)


def concat_forward(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dout, split):
    return dout[:, :split], dout[:, split:]
