"""Segmentation metrics and the Wilcoxon signed-rank test."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateTest, EmptyBoundary, InvalidWeights, ShapeError
from .imgcore import N_CLASSES
from .morphology import edt

DEFAULT_WEIGHTS = (0.3, 0.3, 0.4)  # background, foreground, border
CLASS_NAMES = ("bg", "fg", "border")


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def dice_per_class(pred, gt) -> tuple[float, float, float]:
    """Sorensen-Dice per class, ``2|P&G| / (|P| + |G|)``; 1.0 if the class is absent from both."""
    pred, gt = _check_pair(pred, gt)
    out = []
    for c in range(N_CLASSES):
        p, g = pred == c, gt == c
        denom = int(p.sum()) + int(g.sum())
        out.append(1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom)
    return tuple(out)


def check_weights(weights) -> tuple[float, float, float]:
    w = tuple(float(x) for x in weights)
    if len(w) != N_CLASSES or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
        raise InvalidWeights(f"weights must be 3 non-negative values summing to 1, got {w}")
    return w


def wdmc_from_dice(dice, weights=DEFAULT_WEIGHTS) -> float:
    w = check_weights(weights)
    return float(sum(wi * di for wi, di in zip(w, dice)))


def wdmc(pred, gt, weights=DEFAULT_WEIGHTS) -> float:
    """Weighted per-class Dice, weights ordered (background, foreground, border)."""
    check_weights(weights)
    return wdmc_from_dice(dice_per_class(pred, gt), weights)


def boundary_pixels(label_map) -> np.ndarray:
    """Non-background pixels with an 8-neighbour of a different value.

    Pixels on the image edge count as boundary when non-background.
    """
    m = np.asarray(label_map)
    padded = np.pad(m, 1, constant_values=0)
    h, w = m.shape
    out = np.zeros(m.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                out |= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] != m
    return out & (m != 0)


def bde(pred_boundary, gt_boundary, mode: str = "symmetric") -> float:
    """Boundary displacement error between two boundary masks.

    ``symmetric`` averages the mean distance from predicted boundary pixels
    to the nearest true one and the reverse; ``pred-to-gt`` keeps only the
    first term. Two empty boundaries give 0.0; one empty side raises
    :class:`EmptyBoundary`.
    """
    pb, gb = _check_pair(np.asarray(pred_boundary, bool), np.asarray(gt_boundary, bool))
    if mode not in ("symmetric", "pred-to-gt"):
        raise ValueError(f"unknown BDE mode {mode!r}")
    if not pb.any() and not gb.any():
        return 0.0
    if not pb.any() or not gb.any():
        raise EmptyBoundary("one boundary set is empty")
    to_gt = edt(~gb)[pb].mean()
    if mode == "pred-to-gt":
        return float(to_gt)
    to_pred = edt(~pb)[gb].mean()
    return float(0.5 * (to_gt + to_pred))


BDE_SOURCES = ("classes", "foreground", "border")


def boundary_for_bde(class_map, source: str = "classes") -> np.ndarray:
    """Boundary set used by BDE: class-map boundaries, foreground outline, or the Border class."""
    class_map = np.asarray(class_map)
    if source == "classes":
        return boundary_pixels(class_map)
    if source == "foreground":
        return boundary_pixels(class_map != 0)
    if source == "border":
        return class_map == 2
    raise ValueError(f"unknown boundary source {source!r}")


@dataclass
class PRF1:
    precision: tuple[float, float, float]
    recall: tuple[float, float, float]
    f1: tuple[float, float, float]

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))


def confusion(pred, gt) -> np.ndarray:
    """``conf[g, p]`` counts pixels of true class ``g`` predicted as ``p``."""
    pred, gt = _check_pair(pred, gt)
    idx = gt.astype(np.int64).ravel() * N_CLASSES + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)


def prf1(pred, gt) -> PRF1:
    """One-vs-rest precision, recall and F1 per class.

    A class absent from both maps scores 1.0 everywhere; otherwise an
    empty denominator gives 0.0.
    """
    conf = confusion(pred, gt)
    precision, recall, f1 = [], [], []
    for c in range(N_CLASSES):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if tp + fp + fn == 0:
            precision.append(1.0)
            recall.append(1.0)
            f1.append(1.0)
            continue
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(2 * p * r / (p + r)) if p + r else 0.0)
    return PRF1(tuple(precision), tuple(recall), tuple(f1))


# -- Wilcoxon -------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    w_statistic: float
    p_value: float
    method: str  # "exact" or "normal_approx"

    def to_json(self) -> dict:
        return {"n_effective": self.n_effective, "w_statistic": self.w_statistic,
                "p_value": self.p_value, "method": self.method}


EXACT_MAX_N = 25


def _exact_lower_tail(doubled_ranks: list[int], w2: int) -> float:
    """P(T+ <= w) under random signs, with ranks and ``w`` doubled to integers."""
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    return int(counts[:w2 + 1].sum()) / 2.0 ** len(doubled_ranks)


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon matched-pairs signed-rank test of ``a - b``.

    Zero differences are dropped and tied ``|d|`` get mid-ranks.
    ``W = min(W+, W-)``. Up to 25 remaining pairs the p-value is exact
    (the full sign-flip distribution); beyond that a normal approximation
    with tie and continuity correction is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length samples of at least 2 values")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateTest("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal_approx"
    if method == "exact":
        doubled = [int(round(2 * r)) for r in ranks]
        p = min(1.0, 2.0 * _exact_lower_tail(doubled, int(round(2 * w))))
    elif method == "normal_approx":
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
        z = (abs(w - mean) - 0.5) / math.sqrt(var) if var > 0 else 0.0
        p = min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2.0)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(n, w, float(p), method)


# -- instance matching ----------------------------------------------------------


@dataclass(frozen=True)
class InstanceMatch:
    n_matched: int
    n_missed: int
    n_spurious: int
    mean_matched_iou: float


def iou_table(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU of every (gt instance, pred instance) pair plus their label ids."""
    pred, gt = _check_pair(pred, gt)
    g_ids = np.unique(gt[gt > 0])
    p_ids = np.unique(pred[pred > 0])
    if not len(g_ids) or not len(p_ids):
        return np.zeros((len(g_ids), len(p_ids))), g_ids, p_ids
    g_index = np.searchsorted(g_ids, gt)
    p_index = np.searchsorted(p_ids, pred)
    both = (gt > 0) & (pred > 0)
    inter = np.zeros((len(g_ids), len(p_ids)))
    np.add.at(inter, (g_index[both], p_index[both]), 1)
    g_area = np.array([(gt == i).sum() for i in g_ids], dtype=np.float64)
    p_area = np.array([(pred == i).sum() for i in p_ids], dtype=np.float64)
    union = g_area[:, None] + p_area[None, :] - inter
    return inter / union, g_ids, p_ids


def instance_match(pred, gt, iou_threshold: float = 0.5) -> InstanceMatch:
    """Greedy one-to-one matching of instances by descending IoU."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    iou, g_ids, p_ids = iou_table(pred, gt)
    pairs = sorted(((iou[i, j], i, j) for i in range(len(g_ids)) for j in range(len(p_ids))
                    if iou[i, j] >= iou_threshold), key=lambda t: (-t[0], t[1], t[2]))
    used_g, used_p, matched = set(), set(), []
    for value, i, j in pairs:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        matched.append(value)
    mean_iou = float(np.mean(matched)) if matched else 0.0
    return InstanceMatch(len(matched), len(g_ids) - len(matched), len(p_ids) - len(matched), mean_iou)


# -- reports --------------------------------------------------------------------

METRIC_FIELDS = (
    ["bde", "wdmc"]
    + [f"dice_{c}" for c in CLASS_NAMES]
    + [f"precision_{c}" for c in CLASS_NAMES]
    + [f"recall_{c}" for c in CLASS_NAMES]
    + [f"f1_{c}" for c in CLASS_NAMES]
    + ["macro_precision", "macro_recall", "macro_f1"]
)


def image_metrics(pred, gt, weights=DEFAULT_WEIGHTS, bde_source: str = "classes",
                  bde_mode: str = "symmetric") -> tuple[dict, dict]:
    """Every per-image metric plus counts of the degenerate conventions used."""
    pred, gt = _check_pair(pred, gt)
    notes = {"empty_boundary": 0, "vacuous_class": 0}
    dice = dice_per_class(pred, gt)
    scores = prf1(pred, gt)
    row = {"wdmc": wdmc_from_dice(dice, weights)}
    try:
        row["bde"] = bde(boundary_for_bde(pred, bde_source), boundary_for_bde(gt, bde_source), bde_mode)
    except EmptyBoundary:
        row["bde"] = None
        notes["empty_boundary"] = 1
    for c, name in enumerate(CLASS_NAMES):
        if not (pred == c).any() and not (gt == c).any():
            notes["vacuous_class"] += 1
        row[f"dice_{name}"] = dice[c]
        row[f"precision_{name}"] = scores.precision[c]
        row[f"recall_{name}"] = scores.recall[c]
        row[f"f1_{name}"] = scores.f1[c]
    row["macro_precision"] = scores.macro_precision
    row["macro_recall"] = scores.macro_recall
    row["macro_f1"] = scores.macro_f1
    return row, notes


def mean_std(values, ddof: int = 0) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    if len(v) <= ddof:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=ddof))


def format_cell(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"


@dataclass
class MetricsReport:
    per_image: list[dict]
    ddof: int = 0
    warnings: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        out = {}
        for name in METRIC_FIELDS:
            vals = [row[name] for row in self.per_image]
            mean, std = mean_std(vals, self.ddof)
            out[name] = {"mean": mean, "std": std, "n": sum(v is not None for v in vals),
                         "cell": format_cell(mean, std)}
        return out

    def values(self, metric: str) -> dict[str, float]:
        return {row["image_id"]: row[metric] for row in self.per_image if row[metric] is not None}

    def to_json(self) -> dict:
        return {"per_image": self.per_image, "aggregate": self.aggregate,
                "warnings": self.warnings, "std_ddof": self.ddof}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image_id"] + METRIC_FIELDS)
        for row in self.per_image:
            writer.writerow([row["image_id"]] + ["" if row[k] is None else repr(row[k]) for k in METRIC_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(list(obj["per_image"]), int(obj.get("std_ddof", 0)), dict(obj.get("warnings", {})))


def evaluate(pred_maps, gt_maps, image_ids=None, weights=DEFAULT_WEIGHTS,
             bde_source: str = "classes", bde_mode: str = "symmetric", ddof: int = 0) -> MetricsReport:
    """Per-image metrics for paired class maps, aggregated as mean and std.

    Images whose BDE is undefined (one empty boundary) are kept in the
    report with ``bde = None``, left out of the BDE aggregate and counted
    under ``warnings['empty_boundary']``.
    """
    pred_maps, gt_maps = list(pred_maps), list(gt_maps)
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"{len(pred_maps)} predictions for {len(gt_maps)} ground truths")
    if image_ids is None:
        image_ids = [str(i) for i in range(len(pred_maps))]
    check_weights(weights)
    rows, totals = [], {"empty_boundary": 0, "vacuous_class": 0}
    for image_id, p, g in zip(image_ids, pred_maps, gt_maps):
        row, notes = image_metrics(p, g, weights, bde_source, bde_mode)
        rows.append({"image_id": image_id, **row})
        for k, v in notes.items():
            totals[k] += v
    if totals["empty_boundary"]:
        warnings.warn(f"{totals['empty_boundary']} image(s) without a comparable boundary "
                      "were left out of the BDE aggregate", stacklevel=2)
    return MetricsReport(rows, ddof, totals)
