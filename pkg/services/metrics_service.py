"""Voxel overlap, instance and surface-distance metrics."""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from sklearn.neighbors import KDTree

from models.errors import InvalidInputError
from models.schemas import (
    BinaryMask, ConfusionCounts, F1Score, LabelMap, MeanStd, MetricsAggregate, MetricsReport, ToothGroup,
)
from utils.helpers import mean_std, round_to_precision, safe_divide

logger = logging.getLogger(__name__)

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)
METRIC_COLUMNS = ["precision", "sensitivity", "f1", "hd_mm", "assd_mm"]


def confusion(gt: np.ndarray, pred: np.ndarray) -> ConfusionCounts:
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise InvalidInputError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    tp = int(np.count_nonzero(gt & pred))
    return ConfusionCounts(tp=tp, fp=int(np.count_nonzero(pred)) - tp, fn=int(np.count_nonzero(gt)) - tp)


def f1(counts: ConfusionCounts) -> F1Score:
    if counts.tp + counts.fp == 0 or counts.tp + counts.fn == 0:
        raise InvalidInputError("F1 is undefined without predicted and true positives")
    precision = counts.tp / (counts.tp + counts.fp)
    sensitivity = counts.tp / (counts.tp + counts.fn)
    score = safe_divide(2 * precision * sensitivity, precision + sensitivity)
    return F1Score(precision=precision, sensitivity=sensitivity, f1=score)


# ---------------------------------------------------------------------------
# Instance matching
# ---------------------------------------------------------------------------


def _check_geometry(gt: LabelMap, pred: LabelMap) -> None:
    if gt.dims != pred.dims or not np.allclose(gt.spacing, pred.spacing) or not np.allclose(gt.origin, pred.origin):
        raise InvalidInputError("label maps must share the same geometry")


class _Contingency:
    """Instance sizes and pairwise intersections of two label maps."""

    def __init__(self, gt: np.ndarray, pred: np.ndarray):
        g = gt.ravel()
        p = pred.ravel()
        self.gt_labels = np.unique(g[g > 0])
        self.pred_labels = np.unique(p[p > 0])
        self.gt_sizes = np.array([np.count_nonzero(g == lab) for lab in self.gt_labels], dtype=np.int64)
        self.pred_sizes = np.array([np.count_nonzero(p == lab) for lab in self.pred_labels], dtype=np.int64)
        self.inter = np.zeros((len(self.gt_labels), len(self.pred_labels)), dtype=np.int64)
        both = (g > 0) & (p > 0)
        if both.any():
            gi = np.searchsorted(self.gt_labels, g[both])
            pi = np.searchsorted(self.pred_labels, p[both])
            np.add.at(self.inter, (gi, pi), 1)

    def greedy_match(self) -> List[Optional[int]]:
        """Per gt instance (label order): the unused prediction of best Jaccard, or None."""
        used = np.zeros(len(self.pred_labels), dtype=bool)
        matches: List[Optional[int]] = []
        for i in range(len(self.gt_labels)):
            overlap = self.inter[i]
            candidates = (overlap > 0) & ~used
            if not candidates.any():
                matches.append(None)
                continue
            union = self.gt_sizes[i] + self.pred_sizes - overlap
            jaccard = np.where(candidates, overlap / np.maximum(union, 1), -1.0)
            j = int(np.argmax(jaccard))
            used[j] = True
            matches.append(j)
        return matches


def aji(gt: LabelMap, pred: LabelMap) -> float:
    """Aggregated Jaccard index; unmatched predictions inflate the denominator."""
    _check_geometry(gt, pred)
    table = _Contingency(gt.data, pred.data)
    matches = table.greedy_match()
    numerator = 0
    denominator = 0
    used = set()
    for i, j in enumerate(matches):
        if j is None:
            denominator += int(table.gt_sizes[i])
            continue
        used.add(j)
        overlap = int(table.inter[i, j])
        numerator += overlap
        denominator += int(table.gt_sizes[i] + table.pred_sizes[j] - overlap)
    denominator += int(sum(size for j, size in enumerate(table.pred_sizes) if j not in used))
    if denominator == 0:
        return 1.0
    return numerator / denominator


# ---------------------------------------------------------------------------
# Surface distances
# ---------------------------------------------------------------------------


def surface_points(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Foreground voxels with a face-adjacent background voxel (grid border counts), in mm."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, 3))
    idx = np.argwhere(mask)
    lo = np.maximum(idx.min(axis=0) - 1, 0)
    hi = np.minimum(idx.max(axis=0) + 2, mask.shape)
    window = tuple(slice(a, b) for a, b in zip(lo, hi))
    sub = mask[window]
    border = sub & ~ndimage.binary_erosion(sub, structure=_FACE_STRUCTURE, border_value=0)
    return (np.argwhere(border) + lo) * np.asarray(spacing, dtype=float)


def _directed(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distance from every source point to its nearest target point."""
    dist, _ = KDTree(target).query(source, k=1)
    return dist[:, 0]


def _surface_pair(a: BinaryMask, b: BinaryMask) -> Tuple[np.ndarray, np.ndarray]:
    if a.dims != b.dims:
        raise InvalidInputError(f"mask dims differ: {a.dims} vs {b.dims}")
    sa = surface_points(a.data, a.spacing)
    sb = surface_points(b.data, b.spacing)
    if len(sa) == 0 or len(sb) == 0:
        raise InvalidInputError("surface distances need two non-empty masks")
    return _directed(sa, sb), _directed(sb, sa)


def hausdorff(a: BinaryMask, b: BinaryMask) -> float:
    ab, ba = _surface_pair(a, b)
    return float(max(ab.max(), ba.max()))


def assd(a: BinaryMask, b: BinaryMask) -> float:
    ab, ba = _surface_pair(a, b)
    return float((ab.sum() + ba.sum()) / (len(ab) + len(ba)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _mask(labels: LabelMap, value=None) -> BinaryMask:
    data = labels.data > 0 if value is None else labels.data == value
    return labels.like(data, BinaryMask)


def per_instance_report(
    gt: LabelMap,
    pred: LabelMap,
    groups: Optional[Dict[int, ToothGroup]] = None,
) -> Tuple[pd.DataFrame, MetricsReport]:
    """Per-gt-instance table plus aggregate / group-wise / integrated-teeth summary.

    A gt instance without a matching prediction scores F1 = 0 and has no
    surface distances.
    """
    _check_geometry(gt, pred)
    groups = groups or {}
    table = _Contingency(gt.data, pred.data)
    matches = table.greedy_match()
    rows = []
    for i, j in enumerate(matches):
        label = int(table.gt_labels[i])
        group = groups.get(label)
        row = {
            "instance": label,
            "matched": None if j is None else int(table.pred_labels[j]),
            "group": group.value if group is not None else None,
            "precision": 0.0, "sensitivity": 0.0, "f1": 0.0,
            "hd_mm": np.nan, "assd_mm": np.nan,
        }
        if j is not None:
            tp = int(table.inter[i, j])
            scores = f1(ConfusionCounts(tp=tp, fp=int(table.pred_sizes[j]) - tp, fn=int(table.gt_sizes[i]) - tp))
            row.update(precision=scores.precision, sensitivity=scores.sensitivity, f1=scores.f1)
            gt_mask, pred_mask = _mask(gt, label), _mask(pred, int(table.pred_labels[j]))
            row.update(hd_mm=hausdorff(gt_mask, pred_mask), assd_mm=assd(gt_mask, pred_mask))
        rows.append(row)

    frame = pd.DataFrame(rows, columns=["instance", "matched", "group"] + METRIC_COLUMNS)
    summary = {col: MeanStd(**dict(zip(("mean", "std"), mean_std(frame[col])))) for col in METRIC_COLUMNS}

    by_group: Dict[str, Dict[str, MeanStd]] = {}
    if frame["group"].notna().any():
        for name, part in frame.groupby("group"):
            by_group[str(name)] = {col: MeanStd(**dict(zip(("mean", "std"), mean_std(part[col])))) for col in METRIC_COLUMNS}

    integrated_hd = integrated_assd = None
    gt_all, pred_all = _mask(gt), _mask(pred)
    if gt_all.data.any() and pred_all.data.any():
        integrated_hd = hausdorff(gt_all, pred_all)
        integrated_assd = assd(gt_all, pred_all)

    report = MetricsReport(
        per_instance=[
            {k: (round_to_precision(v, 6) if isinstance(v, float) else v) for k, v in row.items()}
            for row in rows
        ],
        aggregate=MetricsAggregate(**summary, aji=aji(gt, pred)),
        by_group=by_group,
        integrated_hd_mm=integrated_hd,
        integrated_assd_mm=integrated_assd,
    )
    return frame, report
