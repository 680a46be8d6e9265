"""Distance transforms, ground-truth derivations and marker watershed."""
from __future__ import annotations

import heapq
import warnings

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _graph_components

from .errors import InvalidArgument, NoMarkersWarning
from .imgcore import Cls, connected_components

_INF = 1e20
_NEIGHBORS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _lower_envelope(f: list[float]) -> list[float]:
    """1D squared distance transform of sampled function ``f``.

    Computes ``min_j f[j] + (i - j)**2`` for every ``i`` in linear time by
    sweeping the lower envelope of the parabolas rooted at each sample.
    """
    n = len(f)
    v = [0] * n
    z = [0.0] * (n + 1)
    z[0] = -float("inf")
    z[1] = float("inf")
    k = 0
    for q in range(1, n):
        fq = f[q] + q * q
        while True:
            vk = v[k]
            s = (fq - (f[vk] + vk * vk)) / (2 * (q - vk))
            if s > z[k]:
                break
            k -= 1
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = float("inf")
    out = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]
    return out


def _transform_lines(grid: np.ndarray) -> np.ndarray:
    """Apply the 1D envelope transform to every row of ``grid``."""
    out = grid.copy()
    for i, row in enumerate(grid):
        lo, hi = row.min(), row.max()
        if hi == 0 or lo >= _INF:
            continue
        out[i] = _lower_envelope(row.tolist())
    return out


def _edt_squared_raw(mask: np.ndarray) -> np.ndarray:
    f = np.where(mask, _INF, 0.0)
    f = _transform_lines(f.T).T  # columns
    f = _transform_lines(f)      # rows
    return f


def edt_squared(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest background pixel.

    Returns int64. A mask with no background at all is capped at
    ``max(height, width)**2``.
    """
    mask = np.asarray(mask).astype(bool)
    f = _edt_squared_raw(mask)
    cap = max(mask.shape) ** 2
    f[f >= _INF / 2] = cap
    return np.rint(f).astype(np.int64)


def edt(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance transform of a binary mask (float64).

    Foreground pixels carry the distance between pixel centres to the
    closest background pixel; background is 0. If the mask has no
    background the distances are capped at ``max(height, width)``.
    """
    return np.sqrt(edt_squared(mask).astype(np.float64))


def dtgt(gt: np.ndarray) -> np.ndarray:
    """Per-instance distance transform of an instance label map.

    Each instance is transformed on its own, so pixels of other instances
    count as background and touching cells get near-zero distances along
    their shared frontier.
    """
    gt = np.asarray(gt)
    out = np.zeros(gt.shape, dtype=np.float64)
    if not gt.any():
        return out
    h, w = gt.shape
    cap = float(max(h, w))
    lab = gt.astype(np.int64)
    for i, box in enumerate(ndimage.find_objects(lab), start=1):
        if box is None:
            continue
        # one pixel of margin holds the nearest non-member for every member
        rs = slice(max(box[0].start - 1, 0), min(box[0].stop + 1, h))
        cs = slice(max(box[1].start - 1, 0), min(box[1].stop + 1, w))
        member = lab[rs, cs] == i
        sq = _edt_squared_raw(member)
        d = np.where(sq >= _INF / 2, cap, np.sqrt(sq))
        out[rs, cs][member] = d[member]
    return out


def inverse_normalize(d: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Flip the distance map inside each instance so borders are bright.

    Inside instance ``i`` with peak distance ``m``, a pixel at distance
    ``d`` maps to ``(m + 1 - d) / (m + 1)``: outline pixels get the largest
    value of the instance, the core the smallest positive one. Background
    stays 0 and every value lies in [0, 1].
    """
    d = np.asarray(d, dtype=np.float64)
    gt = np.asarray(gt).astype(np.int64)
    out = np.zeros(d.shape, dtype=np.float64)
    inside = gt > 0
    if not inside.any():
        return out
    ids = np.unique(gt[inside])
    peak = np.zeros(int(ids.max()) + 1)
    peak[ids] = ndimage.maximum(d, gt, index=ids)
    m = peak[gt[inside]]
    out[inside] = (m + 1.0 - d[inside]) / (m + 1.0)
    return np.clip(out, 0.0, 1.0)


def _shifted(a: np.ndarray, dy: int, dx: int, fill=0) -> np.ndarray:
    """``out[y, x] = a[y + dy, x + dx]`` with ``fill`` outside the image."""
    h, w = a.shape
    padded = np.pad(a, 1, constant_values=fill)
    return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]


def outline(gt: np.ndarray) -> np.ndarray:
    """Instance pixels with an 8-neighbour of a different label.

    Neighbours beyond the image edge count as background.
    """
    gt = np.asarray(gt)
    out = np.zeros(gt.shape, dtype=bool)
    for dy, dx in _NEIGHBORS8:
        out |= _shifted(gt, dy, dx) != gt
    return out & (gt > 0)


def btgt(gt: np.ndarray) -> np.ndarray:
    """Three-class background/foreground/border ground truth.

    A pixel becomes Border when its 3x3 window (clipped at the image edge)
    holds outline pixels of an instance other than its own. For a pixel of
    instance ``i`` that means any outline of an instance ``j != i``; for a
    background pixel, outlines of at least two different instances, i.e.
    it sits in the gap between cells.
    """
    gt = np.asarray(gt).astype(np.int64)
    ol = np.where(outline(gt), gt, 0)
    window = np.stack([_shifted(ol, dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    other = ((window > 0) & (window != gt)).any(axis=0)
    big = np.iinfo(np.int64).max
    lo = np.where(window > 0, window, big).min(axis=0)
    hi = window.max(axis=0)
    two_instances = (lo != big) & (lo < hi)

    out = np.full(gt.shape, Cls.BACKGROUND, dtype=np.uint8)
    out[gt > 0] = Cls.FOREGROUND
    border = np.where(gt > 0, other, two_instances)
    out[border] = Cls.BORDER
    return out


def _flat_zones(values: np.ndarray, fg: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 8-connected plateaus of equal value inside ``fg``."""
    h, w = values.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for dy, dx in [(0, 1), (1, -1), (1, 0), (1, 1)]:
        nb_idx = _shifted(idx, dy, dx, fill=-1)
        nb_fg = _shifted(fg, dy, dx, fill=False)
        nb_val = _shifted(values, dy, dx, fill=np.nan)
        link = fg & nb_fg & (nb_val == values)
        rows.append(idx[link])
        cols.append(nb_idx[link])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    n, zone = _graph_components(graph, directed=False)
    return zone.reshape(h, w), n


def _reconstruct_by_erosion(f: np.ndarray, fg: np.ndarray, h: float) -> np.ndarray:
    """Fill every basin of ``f`` shallower than ``h`` (paths stay in ``fg``)."""
    H, W = f.shape
    r = np.where(fg, f + h, np.inf)
    rf = r.ravel().tolist()
    ff = f.ravel().tolist()
    fgf = fg.ravel().tolist()
    heap = [(rf[p], p) for p in range(H * W) if fgf[p]]
    heapq.heapify(heap)
    while heap:
        val, p = heapq.heappop(heap)
        if val > rf[p]:
            continue
        y, x = divmod(p, W)
        for dy, dx in _NEIGHBORS8:
            yy, xx = y + dy, x + dx
            if 0 <= yy < H and 0 <= xx < W:
                q = yy * W + xx
                if fgf[q]:
                    cand = val if val > ff[q] else ff[q]
                    if cand < rf[q]:
                        rf[q] = cand
                        heapq.heappush(heap, (cand, q))
    return np.asarray(rf).reshape(H, W)


def extract_markers(v: np.ndarray, fg: np.ndarray, h: float = 0.1) -> np.ndarray:
    """Seed one marker per basin of ``v`` deeper than ``h`` inside ``fg``.

    These are the h-minima of the inverse distance map: every regional
    minimum that survives filling all basins shallower than ``h``. Each
    marker is the plateau of pixels within ``h`` of its basin floor.
    """
    if not 0 <= h < 1:
        raise InvalidArgument(f"h must lie in [0, 1), got {h}")
    v = np.asarray(v, dtype=np.float64)
    fg = np.asarray(fg).astype(bool)
    if not fg.any():
        return np.zeros(v.shape, dtype=np.int32)
    r = _reconstruct_by_erosion(v, fg, h)
    zone, n = _flat_zones(r, fg)
    has_lower = np.zeros(v.shape, dtype=bool)
    for dy, dx in _NEIGHBORS8:
        nb_fg = _shifted(fg, dy, dx, fill=False)
        nb_r = _shifted(r, dy, dx, fill=np.inf)
        has_lower |= nb_fg & (nb_r < r)
    not_minimal = np.bincount(zone[fg & has_lower], minlength=n) > 0
    minima = fg & ~not_minimal[zone]
    return connected_components(minima, 8)


def watershed(v: np.ndarray, markers: np.ndarray, fg: np.ndarray) -> np.ndarray:
    """Flood ``v`` from ``markers`` inside ``fg`` in ascending order.

    Pixels take the label of the first basin to reach them (8-connected);
    equal heights are served first-in first-out. Foreground not reachable
    from any marker stays 0. Without markers the result is all zeros and a
    :class:`NoMarkersWarning` is issued.
    """
    v = np.asarray(v, dtype=np.float64)
    markers = np.asarray(markers)
    fg = np.asarray(fg).astype(bool)
    H, W = v.shape
    labels = np.where(fg, markers, 0).astype(np.int32)
    if not labels.any():
        warnings.warn("watershed called without markers", NoMarkersWarning, stacklevel=2)
        return np.zeros((H, W), dtype=np.int32)

    out = labels.ravel().tolist()
    vf = v.ravel().tolist()
    fgf = fg.ravel().tolist()
    counter = 0
    heap = []
    for p in np.flatnonzero(labels).tolist():
        heap.append((vf[p], counter, p))
        counter += 1
    heapq.heapify(heap)
    while heap:
        _, _, p = heapq.heappop(heap)
        lab = out[p]
        y, x = divmod(p, W)
        for dy, dx in _NEIGHBORS8:
            yy, xx = y + dy, x + dx
            if 0 <= yy < H and 0 <= xx < W:
                q = yy * W + xx
                if fgf[q] and not out[q]:
                    out[q] = lab
                    heapq.heappush(heap, (vf[q], counter, q))
                    counter += 1
    return np.asarray(out, dtype=np.int32).reshape(H, W)


def class_relief(class_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Relief and foreground for watershed on a predicted class map.

    Foreground-class pixels are grouped into cores, their distance map is
    inverted per core and Border pixels sit on top as ridges (value 1).
    """
    class_map = np.asarray(class_map)
    core = class_map == Cls.FOREGROUND
    cores = connected_components(core, 8)
    v = inverse_normalize(edt(core) * core, cores)
    v[class_map == Cls.BORDER] = 1.0
    return v, class_map != Cls.BACKGROUND


def segment_instances(v: np.ndarray, fg: np.ndarray, h: float = 0.1) -> np.ndarray:
    markers = extract_markers(v, fg, h)
    if not markers.any():
        return np.zeros(v.shape, dtype=np.int32)
    return watershed(v, markers, fg)
