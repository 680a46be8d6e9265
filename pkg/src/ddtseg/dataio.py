"""Image and map I/O, dataset indexing, fold splits and synthetic data.

Raw map container (``.map``), all integers little-endian::

    offset  size  field
    0       8     magic  b"DDTMAP\\x00\\x01"
    8       1     role   0 gray, 1 distance, 2 inverse, 3 class, 4 instance
    9       1     dtype  0 uint8, 1 uint16, 2 int32, 3 float64
    10      2     reserved (zero)
    12      4     height
    16      4     width
    20      ...   row-major payload
"""
from __future__ import annotations

import colorsys
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .errors import ConfigError, IoError, UnsupportedTiff
from .imgcore import Cls, connected_components, relabel_scan_order

TIFF_SUFFIXES = (".tif", ".tiff")

# -- atomic writes ------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- TIFF ---------------------------------------------------------------------

_OK_COMPRESSION = {1, 8, 32946}  # none, deflate, legacy deflate


def read_tiff16(path) -> np.ndarray:
    """Read a single-channel 8/16-bit baseline TIFF as ``uint16``.

    8-bit samples are widened by 257 so 255 maps to 65535.
    """
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    try:
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            if page.is_tiled:
                raise UnsupportedTiff("tiled TIFF is not supported", tag="TileWidth")
            if int(page.compression) not in _OK_COMPRESSION:
                raise UnsupportedTiff(
                    f"compression {int(page.compression)} is not supported", tag="Compression")
            if page.samplesperpixel != 1:
                raise UnsupportedTiff(
                    f"{page.samplesperpixel} samples per pixel, expected 1", tag="SamplesPerPixel")
            if page.bitspersample not in (8, 16) or page.dtype.kind != "u":
                raise UnsupportedTiff(
                    f"{page.bitspersample}-bit samples are not supported", tag="BitsPerSample")
            data = page.asarray()
    except UnsupportedTiff:
        raise
    except Exception as exc:  # tifffile raises a mix of ValueError/TiffFileError/struct.error
        raise IoError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 2:
        raise UnsupportedTiff(f"expected a 2D image, got shape {data.shape}", tag="ImageLength")
    if data.dtype == np.uint8:
        return data.astype(np.uint16) * 257
    return data.astype(np.uint16)


def read_labels_tiff(path) -> np.ndarray:
    """Ground-truth TIFF as raw integer instance ids (never widened)."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    try:
        data = tifffile.imread(path)
    except Exception as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 2 or data.dtype.kind not in "ui":
        raise UnsupportedTiff(f"label TIFF must be 2D integer, got {data.dtype} {data.shape}")
    return data.astype(np.int32)


def write_tiff16(path, image: np.ndarray, compress: bool = False) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint16:
        raise ValueError(f"expected uint16, got {image.dtype}")
    buf = io.BytesIO()
    tifffile.imwrite(buf, image, photometric="minisblack",
                     compression="zlib" if compress else None, metadata=None)
    atomic_write_bytes(path, buf.getvalue())


# -- map container --------------------------------------------------------------

MAP_MAGIC = b"DDTMAP\x00\x01"
ROLES = {"gray": 0, "distance": 1, "inverse": 2, "class": 3, "instance": 4}
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<i4"), 3: np.dtype("<f8")}

_ROLE_NAMES = {v: k for k, v in ROLES.items()}
_HEADER = struct.Struct("<8sBBHII")


def encode_map(arr: np.ndarray, role: str) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("maps are 2D")
    if arr.dtype == bool or arr.dtype == np.uint8:
        code = 0
    elif arr.dtype == np.uint16:
        code = 1
    elif arr.dtype.kind in "ui":
        code = 2
    elif arr.dtype.kind == "f":
        code = 3
    else:
        raise ValueError(f"cannot store {arr.dtype} in a map container")
    header = _HEADER.pack(MAP_MAGIC, ROLES[role], code, 0, arr.shape[0], arr.shape[1])
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_map(data: bytes) -> tuple[np.ndarray, str]:
    if len(data) < _HEADER.size:
        raise IoError("map file too short")
    magic, role, code, _, h, w = _HEADER.unpack_from(data)
    if magic != MAP_MAGIC or code not in _DTYPES or role not in _ROLE_NAMES:
        raise IoError("not a map container")
    dtype = _DTYPES[code]
    payload = data[_HEADER.size:]
    if len(payload) != h * w * dtype.itemsize:
        raise IoError("map payload size does not match its header")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(dtype.newbyteorder("="))
    return arr, _ROLE_NAMES[role]


def write_map(path, arr: np.ndarray, role: str) -> None:
    atomic_write_bytes(path, encode_map(arr, role))


def read_map(path) -> tuple[np.ndarray, str]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_map(data)


def peek_map_role(path) -> str | None:
    """Role of a map file from its header alone; None if it is not a map."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
    except OSError:
        return None
    if len(head) < _HEADER.size or head[:8] != MAP_MAGIC:
        return None
    return _ROLE_NAMES.get(head[8])


# -- rendering ------------------------------------------------------------------

CLASS_COLORS = np.array([[0, 0, 0], [40, 160, 255], [255, 200, 40]], dtype=np.uint8)


def _heat_palette() -> np.ndarray:
    # black -> red -> yellow -> white ramp
    t = np.linspace(0.0, 1.0, 256)
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.rint(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


HEAT_PALETTE = _heat_palette()


def instance_color(label: int) -> tuple[int, int, int]:
    hue = (label * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 1.0)
    return round(r * 255), round(g * 255), round(b * 255)


def render(arr: np.ndarray, mode: str) -> Image.Image:
    arr = np.asarray(arr)
    if mode == "raw":
        if arr.dtype == np.uint16 or (arr.dtype.kind in "ui" and arr.max(initial=0) > 255):
            return Image.fromarray(np.clip(arr, 0, 65535).astype(np.uint16))
        if arr.dtype.kind == "f":
            return Image.fromarray(np.rint(np.clip(arr, 0, 1) * 255).astype(np.uint8))
        return Image.fromarray(arr.astype(np.uint8))
    if mode == "heatmap":
        a = arr.astype(np.float64)
        hi = a.max(initial=0.0)
        scaled = a / hi if hi > 0 else np.zeros_like(a)
        return Image.fromarray(HEAT_PALETTE[np.rint(np.clip(scaled, 0, 1) * 255).astype(np.uint8)])
    if mode == "class_colors":
        if arr.max(initial=0) > 2:
            raise ValueError("class map holds values outside {0, 1, 2}")
        return Image.fromarray(CLASS_COLORS[arr.astype(np.uint8)])
    if mode == "instance_colors":
        labels = arr.astype(np.int64)
        ids = np.unique(labels)
        lut = np.zeros((int(ids.max(initial=0)) + 1, 3), dtype=np.uint8)
        for i in ids[ids > 0]:
            lut[i] = instance_color(int(i))
        return Image.fromarray(lut[labels])
    raise ValueError(f"unknown render mode {mode!r}")


def write_image(arr: np.ndarray, path, render_mode: str = "raw") -> None:
    """Render ``arr`` to PNG with a fixed palette; output bytes are deterministic."""
    buf = io.BytesIO()
    render(arr, render_mode).save(buf, format="PNG", optimize=False, compress_level=6)
    atomic_write_bytes(path, buf.getvalue())


# -- normalization --------------------------------------------------------------


def normalize(img: np.ndarray, mode: str = "minmax") -> np.ndarray:
    img = np.asarray(img).astype(np.float64)
    if mode == "fixed16":
        return img / 65535.0
    if mode == "minmax":
        lo, hi = img.min(), img.max()
        if hi == lo:
            return np.zeros_like(img)
        return (img - lo) / (hi - lo)
    raise ValueError(f"unknown normalization {mode!r}")


# -- dataset index and folds -----------------------------------------------------


@dataclass
class DatasetIndex:
    entries: list[tuple[str, str, str]]  # (image_path, ground_truth_path, source_id)
    tile_size: int = 256

    @property
    def source_ids(self) -> list[str]:
        return sorted({e[2] for e in self.entries})

    def to_json(self) -> dict:
        return {"tile_size": self.tile_size,
                "entries": [{"image": i, "ground_truth": g, "source_id": s}
                            for i, g, s in self.entries]}


def scan_dataset(dataset_dir, tile_size: int = 256) -> DatasetIndex:
    """Pair ``images/<stem>.tif`` with ``ground_truth/<stem>.tif``."""
    root = Path(dataset_dir)
    gts = {}
    gt_dir = root / "ground_truth"
    if gt_dir.is_dir():
        gts = {p.stem: p for p in gt_dir.iterdir() if p.suffix.lower() in TIFF_SUFFIXES}
    entries = []
    img_dir = root / "images"
    if img_dir.is_dir():
        for p in sorted(img_dir.iterdir()):
            if p.suffix.lower() in TIFF_SUFFIXES and p.stem in gts:
                entries.append((str(p), str(gts[p.stem]), p.stem))
    return DatasetIndex(entries, tile_size)


@dataclass
class FoldSplit:
    k: int
    assignments: dict[str, int]
    seed: int

    def fold(self, i: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f == i)

    def train_sources(self, i: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f != i)

    def to_json(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignments": dict(sorted(self.assignments.items()))}


def kfold_split(index: DatasetIndex | list[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Assign whole source frames to ``k`` folds after a seeded shuffle.

    Tiles of one frame never straddle train and test. Fold sizes differ by
    at most one source.
    """
    sources = index.source_ids if isinstance(index, DatasetIndex) else sorted(set(index))
    if k < 2:
        raise ConfigError("k must be at least 2")
    if k > len(sources):
        raise ConfigError(f"cannot split {len(sources)} sources into {k} folds")
    order = np.random.default_rng(seed).permutation(len(sources))
    assignments = {sources[j]: pos % k for pos, j in enumerate(order.tolist())}
    return FoldSplit(k, assignments, seed)


# -- synthetic data -------------------------------------------------------------


@dataclass
class SynthConfig:
    image_size: int = 64
    n_blobs: tuple[int, int] = (3, 6)
    radius: tuple[float, float] = (5.0, 9.0)
    eccentricity: tuple[float, float] = (0.0, 0.6)
    overlap_allowed: bool = True
    noise_sigma: float = 0.03
    seed: int = 0
    min_gap: int = 2  # clearance between blobs when overlap is not allowed

    def __post_init__(self):
        self.n_blobs = tuple(self.n_blobs)
        self.radius = tuple(self.radius)
        self.eccentricity = tuple(self.eccentricity)
        for name in ("n_blobs", "radius", "eccentricity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: {lo} > {hi}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0 <= self.eccentricity[0] <= self.eccentricity[1] < 1:
            raise ConfigError("eccentricity must lie in [0, 1)")
        if self.image_size < 1 or self.radius[0] <= 0:
            raise ConfigError("image_size and radius must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def _ellipse(size, cy, cx, a, b, theta):
    """Normalised squared elliptical radius of every pixel centre."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v


def _draw(rng, cfg: SynthConfig, blobs):
    size = cfg.image_size
    intensity = np.zeros((size, size))
    labels = np.zeros((size, size), dtype=np.int32)
    for k, (cy, cx, a, b, theta) in enumerate(blobs, start=1):
        rho2 = _ellipse(size, cy, cx, a, b, theta)
        inside = rho2 <= 1.0
        # centre-bright profile, dim but non-zero at the rim
        intensity[inside] = 0.35 + 0.65 * (1.0 - rho2[inside])
        labels[inside] = k
    return intensity, labels


def _finish(rng, cfg, intensity, labels):
    # keep the largest 8-connected piece of each instance
    clean = np.zeros_like(labels)
    for k in np.unique(labels[labels > 0]).tolist():
        parts = connected_components(labels == k, 8)
        if parts.max() == 0:
            continue
        sizes = np.bincount(parts.ravel())[1:]
        keep = parts == (int(np.argmax(sizes)) + 1)
        clean[keep] = k
    intensity = np.where(clean > 0, intensity, 0.0)
    if cfg.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, cfg.noise_sigma, intensity.shape)
    image = np.rint(np.clip(intensity, 0.0, 1.0) * 65535).astype(np.uint16)
    return image, relabel_scan_order(clean)


def _random_blob(rng, cfg):
    size = cfg.image_size
    r = rng.uniform(*cfg.radius)
    e = rng.uniform(*cfg.eccentricity)
    a, b = r, r * math.sqrt(1.0 - e * e)
    cy = rng.uniform(0, size - 1)
    cx = rng.uniform(0, size - 1)
    theta = rng.uniform(0, math.pi)
    return (cy, cx, a, b, theta)


def synth_blobs(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Random elliptical cells: a ``uint16`` image and its instance labels.

    Blobs drawn later win contested pixels. Without ``overlap_allowed``,
    placements closer than ``min_gap`` pixels to an earlier blob are
    redrawn (up to 200 attempts per blob, then the blob is skipped).
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))
    size = cfg.image_size
    blobs = []
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(n):
        for _attempt in range(200):
            blob = _random_blob(rng, cfg)
            cy, cx, a, b, theta = blob
            if cfg.overlap_allowed:
                break
            grown = _ellipse(size, cy, cx, a + cfg.min_gap, b + cfg.min_gap, theta) <= 1.0
            if not (grown & occupied).any():
                break
        else:
            continue
        blobs.append(blob)
        occupied |= _ellipse(size, *blob) <= 1.0
    intensity, labels = _draw(rng, cfg, blobs)
    return _finish(rng, cfg, intensity, labels)


def synth_touching_pair(size: int = 48, seed: int = 0, overlap: float = 0.15,
                        noise_sigma: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Two ellipses whose rims overlap by ``overlap`` of their radii sum."""
    rng = np.random.default_rng(seed)
    cfg = SynthConfig(image_size=size, noise_sigma=noise_sigma, seed=seed)
    r1, r2 = rng.uniform(size * 0.12, size * 0.2, size=2)
    e1, e2 = rng.uniform(0.0, 0.4, size=2)
    t1, t2 = rng.uniform(0, math.pi, size=2)
    angle = rng.uniform(0, 2 * math.pi)
    dist = (r1 + r2) * (1.0 - overlap)
    mid = (size - 1) / 2.0
    c1 = (mid - 0.5 * dist * math.sin(angle), mid - 0.5 * dist * math.cos(angle))
    c2 = (mid + 0.5 * dist * math.sin(angle), mid + 0.5 * dist * math.cos(angle))
    blobs = [(c1[0], c1[1], r1, r1 * math.sqrt(1 - e1 * e1), t1),
             (c2[0], c2[1], r2, r2 * math.sqrt(1 - e2 * e2), t2)]
    intensity, labels = _draw(rng, cfg, blobs)
    return _finish(rng, cfg, intensity, labels)


def write_sample(root, stem: str, image: np.ndarray, labels: np.ndarray) -> None:
    root = Path(root)
    write_tiff16(root / "images" / f"{stem}.tif", image)
    write_tiff16(root / "ground_truth" / f"{stem}.tif", labels.astype(np.uint16))
