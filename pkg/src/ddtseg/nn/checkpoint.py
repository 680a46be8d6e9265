"""Binary model checkpoints.

Layout, all integers little-endian::

    magic    8 bytes  b"DDTCKPT\\0"
    version  u32      1
    hlen     u32      length of the JSON header in bytes
    header   hlen     UTF-8 JSON: config, history, adam, blobs
    payload           concatenated little-endian float64 blobs

``header["blobs"]`` lists ``{"name", "shape", "offset"}`` with offsets
counted in bytes from the start of the payload. Parameters are stored
under their own names, Adam moments as ``adam.m/<name>`` and
``adam.v/<name>``. Single-precision models are widened on save and
narrowed again on load.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..dataio import atomic_write_bytes
from ..errors import IoError, StateError
from .adam import AdamState
from .unet import UNet, UNetConfig, _param_shapes

MAGIC = b"DDTCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def encode_checkpoint(model: UNet, extra: dict | None = None) -> bytes:
    blobs = [(name, p) for name, p in model.params.items()]
    adam = None
    if model.adam is not None:
        st = model.adam
        adam = {"beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}
        blobs += [(f"adam.m/{k}", a) for k, a in st.m.items()]
        blobs += [(f"adam.v/{k}", a) for k, a in st.v.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in blobs:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "config": model.config.to_json(),
        "history": model.history,
        "adam": adam,
        "blobs": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[UNet, dict]:
    """Rebuild a model from checkpoint bytes; returns ``(model, extra)``."""
    if len(data) < _PREFIX.size:
        raise IoError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise IoError("not a checkpoint file")
    if version != VERSION:
        raise IoError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
        cfg = UNetConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise IoError(f"corrupt checkpoint header: {exc}") from exc
    payload = memoryview(data)[start:]
    arrays = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise IoError(f"checkpoint blob {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(payload[entry["offset"]:end], dtype="<f8").reshape(shape)
    model = UNet(cfg, {})
    dtype = model.dtype
    for name, shape, _ in _param_shapes(cfg):
        if name not in arrays or arrays[name].shape != shape:
            raise StateError(f"checkpoint lacks parameter {name} with shape {shape}")
        model.params[name] = arrays[name].astype(dtype)
    model.history = header["history"]
    if header["adam"] is not None:
        a = header["adam"]
        model.adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["step"],
                               {k: arrays[f"adam.m/{k}"].astype(dtype) for k in model.params
                                if f"adam.m/{k}" in arrays},
                               {k: arrays[f"adam.v/{k}"].astype(dtype) for k in model.params
                                if f"adam.v/{k}" in arrays})
    return model, header.get("extra", {})


def save_checkpoint(model: UNet, path, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, extra))


def load_checkpoint(path) -> tuple[UNet, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
