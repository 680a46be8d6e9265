"""Raster conventions, connected components and tile geometry.

Rasters are plain 2D numpy arrays indexed ``[row, col]`` (height first):

* gray images are ``uint16`` (raw sensor counts) or ``float64`` in [0, 1];
* instance label maps are non-negative integer arrays, 0 = background;
* class maps are ``uint8`` arrays holding :class:`Cls` values.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import MalformedTileSet, TileTooLarge


class Cls(enum.IntEnum):
    BACKGROUND = 0
    FOREGROUND = 1
    BORDER = 2


N_CLASSES = 3


def structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def relabel_scan_order(labels: np.ndarray) -> np.ndarray:
    """Rename positive labels to 1..K by first row-major occurrence."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    ordered = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(int(flat.max(initial=0)) + 1, dtype=np.int32)
    lut[ordered] = np.arange(1, len(ordered) + 1, dtype=np.int32)
    return lut[labels]


def connected_components(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Label the foreground components of ``mask``.

    Labels run 1..K in the order their first pixel is met in a row-major
    scan, so the output is fully determined by the input.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError("mask must be a non-empty 2D array")
    labels, _ = ndimage.label(mask, structure=structure(connectivity))
    return relabel_scan_order(labels)


def n_instances(labels: np.ndarray) -> int:
    return len(np.setdiff1d(np.unique(labels), [0]))


# -- tiling -----------------------------------------------------------------

TILE_POLICIES = ("cover", "nearest")


def _axis_offsets(source: int, tile: int, policy: str = "cover") -> list[int]:
    if policy == "cover":
        n = math.ceil(source / tile)
    else:
        n = max(1, math.floor(source / tile + 0.5))
    if n == 1:
        return [0]
    return [i * (source - tile) // (n - 1) for i in range(n)]


def compute_tile_grid(source_w: int, source_h: int, tile: int,
                      policy: str = "cover") -> list[tuple[int, int]]:
    """Top-left ``(x, y)`` anchors of an even-spread tile grid, row by row.

    Per axis the first tile sits at 0, the last flush with the far edge and
    the rest evenly in between. ``cover`` uses the fewest tiles that cover
    every pixel, ``ceil(source / tile)`` per axis. ``nearest`` rounds
    ``source / tile`` to the nearest count instead, which may leave a thin
    uncovered strip: a 696x520 frame with 256 px tiles then gives the
    6-tile grid x in {0, 220, 440}, y in {0, 264} with rows 256..263
    unseen, whereas ``cover`` needs 9 tiles (y in {0, 132, 264}).
    """
    if tile < 1:
        raise ValueError("tile size must be positive")
    if policy not in TILE_POLICIES:
        raise ValueError(f"unknown tiling policy {policy!r}")
    if tile > source_w or tile > source_h:
        raise TileTooLarge(f"tile {tile} does not fit a {source_w}x{source_h} source")
    xs = _axis_offsets(source_w, tile, policy)
    ys = _axis_offsets(source_h, tile, policy)
    return [(x, y) for y in ys for x in xs]


@dataclass(frozen=True)
class TileSet:
    tile_size: int
    offsets: list[tuple[int, int]]
    tiles: list[np.ndarray] = field(repr=False)
    source_size: tuple[int, int]  # (width, height)

    def __len__(self) -> int:
        return len(self.tiles)


def tile(image: np.ndarray, tile_size: int, policy: str = "cover") -> TileSet:
    h, w = image.shape[:2]
    offsets = compute_tile_grid(w, h, tile_size, policy)
    tiles = [image[y:y + tile_size, x:x + tile_size].copy() for x, y in offsets]
    return TileSet(tile_size, offsets, tiles, (w, h))


def stitch(tiles: TileSet, reduce: str = "last_wins") -> np.ndarray:
    """Reassemble a full frame from ``tiles``.

    ``last_wins`` keeps the value of the last tile covering a pixel and is
    the right choice for label and class maps; ``mean`` averages the
    covering tiles and returns float64.
    """
    if reduce not in ("last_wins", "mean"):
        raise ValueError(f"unknown reduce rule {reduce!r}")
    w, h = tiles.source_size
    t = tiles.tile_size
    if len(tiles.tiles) != len(tiles.offsets) or not tiles.tiles:
        raise MalformedTileSet("tile and offset counts differ or are empty")
    first = tiles.tiles[0]
    for arr, (x, y) in zip(tiles.tiles, tiles.offsets):
        if arr.shape[:2] != (t, t) or arr.shape[2:] != first.shape[2:]:
            raise MalformedTileSet(f"tile of shape {arr.shape} in a set of {t}px tiles")
        if x < 0 or y < 0 or x + t > w or y + t > h:
            raise MalformedTileSet(f"tile at ({x}, {y}) leaves the {w}x{h} source")

    shape = (h, w) + first.shape[2:]
    if reduce == "last_wins":
        out = np.zeros(shape, dtype=first.dtype)
        covered = np.zeros((h, w), dtype=bool)
        for arr, (x, y) in zip(tiles.tiles, tiles.offsets):
            out[y:y + t, x:x + t] = arr
            covered[y:y + t, x:x + t] = True
    else:
        out = np.zeros(shape, dtype=np.float64)
        count = np.zeros((h, w), dtype=np.float64)
        for arr, (x, y) in zip(tiles.tiles, tiles.offsets):
            out[y:y + t, x:x + t] += arr
            count[y:y + t, x:x + t] += 1
        covered = count > 0
        count = np.maximum(count, 1)
        out /= count.reshape(count.shape + (1,) * (out.ndim - 2))
    if not covered.all():
        raise MalformedTileSet("tiles leave part of the source uncovered")
    return out


def class_map_counts(class_map: np.ndarray) -> tuple[int, int, int]:
    counts = np.bincount(np.asarray(class_map).ravel(), minlength=N_CLASSES)
    if len(counts) > N_CLASSES:
        raise ValueError("class map holds values outside {0, 1, 2}")
    return int(counts[0]), int(counts[1]), int(counts[2])
