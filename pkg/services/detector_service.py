"""Box algebra, NMS, anchor sampling, tooth grouping and box-level metrics."""

import logging
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from models.errors import InvalidInputError
from models.schemas import (
    AnchorGrid, Box3, Jaw, LabelMap, RpnTargets, SamplerConfig,
    SamplingStrategy, ToothGroup,
)
from services.volume_service import index_to_world

logger = logging.getLogger(__name__)

ONE_ROOTED_POSITIONS = {1, 2, 3}
OR_RESOLUTION_MM = 0.1


# ---------------------------------------------------------------------------
# FDI numbering
# ---------------------------------------------------------------------------


def validate_fdi(tooth_id: int) -> None:
    quadrant, position = divmod(int(tooth_id), 10)
    if quadrant not in (1, 2, 3, 4) or position not in range(1, 9):
        raise InvalidInputError(f"invalid FDI tooth id: {tooth_id}")


def jaw_of(tooth_id: int) -> Jaw:
    validate_fdi(tooth_id)
    return Jaw.UPPER if tooth_id // 10 in (1, 2) else Jaw.LOWER


def assign_group(tooth_id: int, is_metal: bool, grouped: bool = True) -> ToothGroup:
    """Metal overrides anatomy; positions 1-3 are one-rooted.

    grouped=False collapses everything to a single class.
    """
    validate_fdi(tooth_id)
    if not grouped:
        return ToothGroup.OTHERS
    if is_metal:
        return ToothGroup.METAL
    if tooth_id % 10 in ONE_ROOTED_POSITIONS:
        return ToothGroup.ONE_ROOTED
    return ToothGroup.OTHERS


# ---------------------------------------------------------------------------
# IoU / NMS
# ---------------------------------------------------------------------------


def _bounds(boxes: Sequence[Box3]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 2, 3))
    return np.array([[b.min_mm, b.max_mm] for b in boxes], dtype=float)


def iou_matrix(a: Sequence[Box3], b: Sequence[Box3]) -> np.ndarray:
    ba, bb = _bounds(a), _bounds(b)
    if len(ba) == 0 or len(bb) == 0:
        return np.zeros((len(ba), len(bb)))
    lo = np.maximum(ba[:, None, 0], bb[None, :, 0])
    hi = np.minimum(ba[:, None, 1], bb[None, :, 1])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    vol_a = np.prod(ba[:, 1] - ba[:, 0], axis=-1)
    vol_b = np.prod(bb[:, 1] - bb[:, 0], axis=-1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou(a: Box3, b: Box3) -> float:
    return float(iou_matrix([a], [b])[0, 0])


def _scores(boxes: Sequence[Box3]) -> np.ndarray:
    if any(b.score is None for b in boxes):
        raise InvalidInputError("every box needs a score")
    return np.array([b.score for b in boxes], dtype=float)


def nms_indices(boxes: Sequence[Box3], scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy selection by descending score; equal scores keep input order."""
    if len(boxes) == 0:
        return []
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= overlaps[idx] > iou_threshold
    return keep


def nms(boxes: Sequence[Box3], iou_threshold: float) -> List[Box3]:
    keep = nms_indices(boxes, _scores(boxes), iou_threshold)
    return [boxes[i] for i in keep]


# ---------------------------------------------------------------------------
# Anchors and RPN target sampling
# ---------------------------------------------------------------------------


def generate_anchors(grid: AnchorGrid) -> List[Box3]:
    """One cube per base size at every stride position whose centre lies in the extent."""
    stride = np.asarray(grid.stride_mm, dtype=float)
    if np.any(stride <= 0):
        raise InvalidInputError("anchor strides must be positive")
    lo, hi = grid.extent.lo, grid.extent.hi
    axes = [np.arange(lo[a] + stride[a] / 2, hi[a] + 1e-9, stride[a]) for a in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    anchors = []
    for size in grid.base_sizes_mm:
        half = 0.5 * np.asarray(size, dtype=float)
        for c in centers:
            anchors.append(Box3(min_mm=tuple(c - half), max_mm=tuple(c + half)))
    return anchors


def _gt_group(box: Box3) -> Optional[ToothGroup]:
    if box.group is not None:
        return box.group
    if box.tooth_id is not None:
        return assign_group(box.tooth_id, False)
    return None


def sample_rpn_targets(anchors: Sequence[Box3], gt: Sequence[Box3], cfg: SamplerConfig) -> RpnTargets:
    """Positive/negative anchor indices for one volume.

    "nms" keeps the candidates surviving NMS at cfg.nms_iou; "topk" keeps the
    highest-IoU candidates without suppression. Any gt box left without a
    positive gets its single best anchor, flagged as forced.
    """
    rng = np.random.default_rng(cfg.seed)
    n_anchor = len(anchors)
    overlaps = iou_matrix(anchors, gt)
    if len(gt):
        best_iou = overlaps.max(axis=1)
        best_gt = overlaps.argmax(axis=1)
    else:
        best_iou = np.zeros(n_anchor)
        best_gt = np.full(n_anchor, -1)

    candidates = np.flatnonzero(best_iou >= cfg.t_pos) if len(gt) else np.zeros(0, dtype=int)
    if cfg.strategy == SamplingStrategy.NMS:
        kept_local = nms_indices([anchors[i] for i in candidates], best_iou[candidates], cfg.nms_iou)
        positives = [int(candidates[i]) for i in kept_local]
    else:
        order = np.argsort(-best_iou[candidates], kind="stable")
        positives = [int(candidates[i]) for i in order]
    positives = positives[: cfg.max_pos]
    matched = [int(best_gt[i]) for i in positives]
    forced = [False] * len(positives)

    for g in range(len(gt)):
        if g in matched:
            continue
        anchor_idx = int(np.argmax(overlaps[:, g]))
        positives.append(anchor_idx)
        matched.append(g)
        forced.append(True)

    positive_set = set(positives)
    pool = np.array([i for i in np.flatnonzero(best_iou <= cfg.t_neg) if i not in positive_set], dtype=int)
    n_neg = min(cfg.max_neg, pool.size)
    negatives = rng.choice(pool, size=n_neg, replace=False).tolist() if n_neg else []

    return RpnTargets(
        positives=positives,
        matched_gt=matched,
        group_labels=[_gt_group(gt[g]) for g in matched],
        forced=forced,
        negatives=[int(i) for i in negatives],
    )


# ---------------------------------------------------------------------------
# Boxes from labels, dilation
# ---------------------------------------------------------------------------


def boxes_from_labels(
    labels: LabelMap,
    metal: Iterable[int] = (),
    grouped: bool = True,
) -> List[Box3]:
    """Tight box per label id: voxel-centre extremes padded by half a voxel."""
    metal = set(metal)
    half = 0.5 * np.asarray(labels.spacing)
    boxes = []
    for tooth_id in np.unique(labels.data):
        if tooth_id == 0:
            continue
        idx = np.argwhere(labels.data == tooth_id)
        lo = index_to_world(labels, idx.min(axis=0)) - half
        hi = index_to_world(labels, idx.max(axis=0)) + half
        boxes.append(Box3(
            min_mm=tuple(lo), max_mm=tuple(hi), tooth_id=int(tooth_id),
            group=assign_group(int(tooth_id), int(tooth_id) in metal, grouped),
        ))
    return boxes


def box_from_points(points: np.ndarray, pad: np.ndarray, **fields) -> Box3:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("cannot bound an empty point set")
    return Box3(min_mm=tuple(pts.min(axis=0) - pad), max_mm=tuple(pts.max(axis=0) + pad), **fields)


def dilate(b: Box3, margin_mm: float, bounds: Box3) -> Box3:
    if margin_mm < 0:
        raise InvalidInputError("margin must be non-negative")
    lo = np.maximum(b.lo - margin_mm, bounds.lo)
    hi = np.minimum(b.hi + margin_mm, bounds.hi)
    if np.any(hi <= lo):
        raise InvalidInputError(f"box {b.min_mm}/{b.max_mm} does not intersect the bounds")
    return b.with_bounds(lo, hi)


# ---------------------------------------------------------------------------
# Box-level metrics
# ---------------------------------------------------------------------------


def overlap_ratio(a: Box3, neighbors: Sequence[Box3], resolution_mm: float = OR_RESOLUTION_MM) -> float:
    """Fraction of A covered by the union of the neighbours, voxelised at resolution_mm."""
    counts = np.maximum(np.ceil(a.size / resolution_mm - 1e-9).astype(int), 1)
    step = a.size / counts
    centers = [a.lo[d] + step[d] * (np.arange(counts[d]) + 0.5) for d in range(3)]
    covered = np.zeros(tuple(counts), dtype=bool)
    for nb in neighbors:
        masks = [(centers[d] >= nb.lo[d]) & (centers[d] <= nb.hi[d]) for d in range(3)]
        if not all(m.any() for m in masks):
            continue
        covered[np.ix_(*masks)] = True
    return float(covered.mean())


def mean_overlap_ratio(boxes: Sequence[Box3]) -> float:
    """Scene OR: mean over boxes of the overlap with all other boxes."""
    boxes = list(boxes)
    if not boxes:
        return 0.0
    return float(np.mean([overlap_ratio(b, boxes[:i] + boxes[i + 1:]) for i, b in enumerate(boxes)]))


def object_include_ratio(gt_object: np.ndarray, detected: Box3) -> float:
    """gt_object: (N, 3) world coordinates of the object's voxel centres."""
    pts = np.asarray(gt_object, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("object include ratio needs a non-empty object")
    inside = np.all((pts >= detected.lo) & (pts <= detected.hi), axis=1)
    return float(inside.mean())


def object_include_ratios(labels: LabelMap, gt: Sequence[Box3], detected: Sequence[Box3]) -> List[float]:
    """OIR of every gt tooth present in `labels`.

    Each tooth is scored against the detection with its id, else the detection of
    highest IoU; a scene without detections scores 0.
    """
    ratios = []
    for g in gt:
        points = index_to_world(labels, np.argwhere(labels.data == g.tooth_id))
        if len(points) == 0:
            continue
        same = [b for b in detected if g.tooth_id is not None and b.tooth_id == g.tooth_id]
        if not same and detected:
            same = [detected[int(np.argmax(iou_matrix([g], detected)[0]))]]
        ratios.append(object_include_ratio(points, same[0]) if same else 0.0)
    return ratios


def average_precision_50(gt: Sequence[Box3], pred: Sequence[Box3], iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP with greedy one-to-one matching by descending score."""
    if not gt or not pred:
        return 0.0
    scores = _scores(pred)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(pred, gt)
    taken = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(pred))
    for rank, p in enumerate(order):
        candidates = np.where(~taken, overlaps[p], -1.0)
        g = int(np.argmax(candidates))
        if candidates[g] >= iou_threshold:
            taken[g] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(pred) + 1)
    recall = cum_tp / len(gt)

    # precision envelope, then sum over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def boxes_by_jaw(boxes: Sequence[Box3]) -> Dict[Jaw, List[Box3]]:
    grouped: Dict[Jaw, List[Box3]] = {Jaw.UPPER: [], Jaw.LOWER: []}
    for b in boxes:
        if b.tooth_id is not None:
            grouped[jaw_of(b.tooth_id)].append(b)
    return grouped
