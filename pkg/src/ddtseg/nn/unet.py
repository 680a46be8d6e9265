"""Encoder-decoder network with a recorded tape for reverse-mode gradients."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, NonFiniteError, ShapeError, StateError
from . import layers

HEADS = {"logits3": 3, "regression1": 1}
OUTPUT_ACTIVATIONS = ("linear", "logistic")
DTYPES = {"double": np.float64, "single": np.float32}


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 3
    depth: int = 2
    base_filters: int = 8
    head: str = "logits3"
    precision: str = "double"
    output_activation: str = "linear"  # regression head only: "linear" or "logistic"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if HEADS[self.head] != self.out_channels:
            raise ConfigError(f"head {self.head} needs {HEADS[self.head]} output channels")
        if self.depth < 1 or self.base_filters < 1 or self.in_channels < 1:
            raise ConfigError("depth, base_filters and in_channels must be >= 1")
        if self.precision not in DTYPES:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level

    def to_json(self) -> dict:
        return asdict(self)


def parameter_count(cfg: UNetConfig) -> int:
    """Closed-form number of weights and biases.

    With ``f_l = base * 2**l``, ``c_0 = in_channels`` and ``c_l = f_{l-1}``:
    every encoder level and the bottleneck (level ``depth``) hold two 3x3
    convolutions, ``9 c_l f_l + f_l + 9 f_l^2 + f_l``; every decoder level
    ``l < depth`` holds an up-convolution ``4 f_{l+1} f_l + f_l`` and two 3x3
    convolutions on the concatenated input, ``18 f_l^2 + f_l + 9 f_l^2 + f_l``;
    the head adds ``f_0 out + out``.
    """
    total = 0
    c = cfg.in_channels
    for level in range(cfg.depth + 1):
        f = cfg.filters(level)
        total += 9 * c * f + f + 9 * f * f + f
        c = f
    for level in range(cfg.depth):
        f, f_up = cfg.filters(level), cfg.filters(level + 1)
        total += 4 * f_up * f + f + 18 * f * f + f + 9 * f * f + f
    return total + cfg.filters(0) * cfg.out_channels + cfg.out_channels


def _param_shapes(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """``(name, shape, fan_in)`` for every parameter in creation order."""
    shapes = []

    def conv(name, c_in, c_out, k=3):
        shapes.append((f"{name}.w", (c_out, c_in, k, k), c_in * k * k))
        shapes.append((f"{name}.b", (c_out,), 0))

    c = cfg.in_channels
    for level in range(cfg.depth):
        f = cfg.filters(level)
        conv(f"enc{level}.conv1", c, f)
        conv(f"enc{level}.conv2", f, f)
        c = f
    f = cfg.filters(cfg.depth)
    conv("bottom.conv1", c, f)
    conv("bottom.conv2", f, f)
    for level in reversed(range(cfg.depth)):
        f, f_up = cfg.filters(level), cfg.filters(level + 1)
        shapes.append((f"dec{level}.up.w", (f_up, f, 2, 2), f_up))
        shapes.append((f"dec{level}.up.b", (f,), 0))
        conv(f"dec{level}.conv1", 2 * f, f)
        conv(f"dec{level}.conv2", f, f)
    conv("head", cfg.filters(0), cfg.out_channels, k=1)
    return shapes


class UNet:
    """U-Net style model.

    ``depth`` levels of (conv3x3+ReLU) x2 followed by 2x2 max pooling, a
    bottleneck, and mirrored decoder levels of 2x2 stride-2 up-convolution,
    skip concatenation and (conv3x3+ReLU) x2, closed by a 1x1 convolution.
    The ``regression1`` head returns its single channel unchanged by
    default; consumers clip it to [0, 1]. ``output_activation="logistic"``
    squashes it into (0, 1) instead, but under MAE that head drives the
    background logits without bound, saturates and stalls on deeper
    networks, and a ReLU output dies the same way once every pixel goes
    negative.
    """

    def __init__(self, config: UNetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.dtype = DTYPES[config.precision]
        self.history: list[dict] = []
        self.adam = None
        self._tape = None
        self._recording = None

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- tape helpers -----------------------------------------------------

    def _record(self, op, cache, inputs, params=()):
        if self._recording is None:
            return None
        self._recording.append((op, cache, inputs, params))
        return len(self._recording) - 1

    def _conv(self, x, name, relu=True):
        val, node = x
        out, cache = layers.conv_forward(val, self.params[f"{name}.w"], self.params[f"{name}.b"])
        node = self._record("conv", cache, (node,), (f"{name}.w", f"{name}.b"))
        if relu:
            out, mask = layers.relu_forward(out)
            node = self._record("relu", mask, (node,))
        return out, node

    def forward(self, x: np.ndarray, record_tape: bool = False) -> np.ndarray:
        cfg = self.config
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        m = 2 ** cfg.depth
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"spatial size {x.shape[2:]} not divisible by {m}")
        if not np.isfinite(x).all():
            raise NonFiniteError("input holds NaN or Inf")
        x = x.astype(self.dtype, copy=False)
        self._recording = [] if record_tape else None
        self._tape = None

        h = (x, self._record("input", None, ()))
        skips = []
        for level in range(cfg.depth):
            h = self._conv(h, f"enc{level}.conv1")
            h = self._conv(h, f"enc{level}.conv2")
            skips.append(h)
            out, cache = layers.maxpool_forward(h[0])
            h = (out, self._record("pool", cache, (h[1],)))
        h = self._conv(h, "bottom.conv1")
        h = self._conv(h, "bottom.conv2")
        for level in reversed(range(cfg.depth)):
            name = f"dec{level}.up"
            out, cache = layers.upconv_forward(h[0], self.params[f"{name}.w"], self.params[f"{name}.b"])
            h = (out, self._record("upconv", cache, (h[1],), (f"{name}.w", f"{name}.b")))
            skip = skips[level]
            out, cache = layers.concat_forward(skip[0], h[0])
            h = (out, self._record("concat", cache, (skip[1], h[1])))
            h = self._conv(h, f"dec{level}.conv1")
            h = self._conv(h, f"dec{level}.conv2")
        out, node = self._conv(h, "head", relu=False)
        if cfg.head == "regression1" and cfg.output_activation == "logistic":
            out, cache = layers.sigmoid_forward(out)
            node = self._record("sigmoid", cache, (node,))
        if record_tape:
            self._tape = self._recording
        self._recording = None
        return out

    def backward(self, dout: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given the gradient of the output.

        Consumes the tape recorded by the last ``forward(..., record_tape=True)``.
        """
        if self._tape is None:
            raise StateError("backward needs a forward pass with record_tape=True")
        tape, self._tape = self._tape, None
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        node_grad = {len(tape) - 1: np.asarray(dout, dtype=self.dtype)}
        for node in range(len(tape) - 1, -1, -1):
            g = node_grad.pop(node, None)
            op, cache, inputs, pnames = tape[node]
            if g is None or op == "input":
                continue
            result = _BACKWARD[op](g, cache)
            for inp, gi in zip(inputs, result[:len(inputs)]):
                if inp in node_grad:
                    node_grad[inp] = node_grad[inp] + gi
                else:
                    node_grad[inp] = gi
            for pname, gp in zip(pnames, result[len(inputs):]):
                grads[pname] += gp
        return grads

    def copy(self) -> "UNet":
        clone = UNet(self.config, {k: v.copy() for k, v in self.params.items()})
        clone.history = [dict(r) for r in self.history]
        if self.adam is not None:
            clone.adam = self.adam.copy()
        return clone


_BACKWARD = {
    "conv": layers.conv_backward,
    "upconv": layers.upconv_backward,
    "relu": layers.relu_backward,
    "pool": layers.maxpool_backward,
    "concat": layers.concat_backward,
    "sigmoid": layers.sigmoid_backward,
}


def build_unet(cfg: UNetConfig, seed: int = 0) -> UNet:
    """Fresh model with He-scaled normal weights (std sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    dtype = DTYPES[cfg.precision]
    params = {}
    for name, shape, fan_in in _param_shapes(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return UNet(cfg, params)


def forward(model: UNet, x: np.ndarray, record_tape: bool = False) -> np.ndarray:
    return model.forward(x, record_tape)


def backward(model: UNet, loss_gradient: np.ndarray) -> dict[str, np.ndarray]:
    return model.backward(loss_gradient)
