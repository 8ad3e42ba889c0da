"""Chamfer distance maps, regression targets and instance assembly."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models.errors import InvalidInputError
from models.schemas import BinaryMask, Box3, DistanceMap, Grid3, LabelMap, RigidTransform
from services.volume_service import crop_indices, index_to_world, resample

logger = logging.getLogger(__name__)

FACE, EDGE, CORNER = 3, 4, 5
_INF = np.int64(1) << 40


def _plane_step(current: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Relax a plane against the 9 neighbours in the adjacent plane."""
    rows, cols = previous.shape
    padded = np.full((rows + 2, cols + 2), _INF, dtype=np.int64)
    padded[1:-1, 1:-1] = previous
    best = current
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            weight = (FACE, EDGE, CORNER)[abs(dr) + abs(dc)]
            shifted = padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
            best = np.minimum(best, shifted + weight)
    return best


def _row_step(current: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Relax a row against the 3 neighbours in the adjacent row."""
    best = np.minimum(current, previous + FACE)
    best[1:] = np.minimum(best[1:], previous[:-1] + EDGE)
    best[:-1] = np.minimum(best[:-1], previous[1:] + EDGE)
    return best


def _sweep(dist: np.ndarray) -> None:
    """Forward raster pass in place (planes along axis 0, rows along axis 1)."""
    n_plane, n_row, n_col = dist.shape
    ramp = FACE * np.arange(n_col, dtype=np.int64)
    for p in range(n_plane):
        if p > 0:
            dist[p] = _plane_step(dist[p], dist[p - 1])
        for r in range(n_row):
            row = dist[p, r] if r == 0 else _row_step(dist[p, r], dist[p, r - 1])
            # row[c] = min(row[c], row[c-1] + FACE) along the row
            dist[p, r] = np.minimum.accumulate(row - ramp) + ramp


def chamfer_dt(mask: BinaryMask) -> DistanceMap:
    """3-4-5 chamfer distance to the nearest background voxel, in face steps."""
    fg = mask.data.astype(bool)
    if fg.all():
        raise InvalidInputError("chamfer transform needs at least one background voxel")
    dist = np.where(fg, _INF, 0).astype(np.int64)
    _sweep(dist)
    backward = dist[::-1, ::-1, ::-1].copy()
    _sweep(backward)
    dist = backward[::-1, ::-1, ::-1]
    return DistanceMap(dims=mask.dims, spacing=mask.spacing, origin=mask.origin, data=dist / float(FACE))


def regression_target(mask: BinaryMask, d_max_vox: float) -> DistanceMap:
    """Chamfer distance clamped at d_max and scaled to [0, 1]."""
    if d_max_vox <= 0:
        raise InvalidInputError("d_max_vox must be positive")
    if not mask.data.any():
        return mask.like(np.zeros(mask.dims, dtype=np.float32), DistanceMap)
    dist = chamfer_dt(mask)
    return dist.like(np.minimum(dist.data, d_max_vox) / d_max_vox)


def mse_loss(pred: DistanceMap, target: DistanceMap, weight_norm_sq: float = 0.0, alpha: float = 0.1) -> float:
    if pred.dims != target.dims:
        raise InvalidInputError(f"prediction dims {pred.dims} != target dims {target.dims}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    return float(np.mean(diff * diff) + alpha * weight_norm_sq)


def binarize(pred: DistanceMap, tau_vox: float = 0.5) -> BinaryMask:
    if tau_vox < 0:
        raise InvalidInputError("tau must be non-negative")
    return pred.like(pred.data > tau_vox, BinaryMask)


def restore_to_box(
    crop_map: DistanceMap,
    crop_xform: RigidTransform,
    box: Box3,
    canvas: Grid3,
) -> DistanceMap:
    """Resample a standardised crop map onto the canvas voxels inside `box`.

    crop_xform maps crop world coordinates (origin 0) to canvas world coordinates.
    """
    window = crop_indices(canvas, box)
    if window is None:
        raise InvalidInputError(f"box {box.min_mm}/{box.max_mm} lies outside the canvas")
    start = np.array([s.start for s in window])
    dims = tuple(s.stop - s.start for s in window)
    return resample(
        crop_map, crop_xform.inverse(), dims, canvas.spacing,
        out_origin=tuple(index_to_world(canvas, start)), order=1,
    )


def instance_label(box: Box3, index: int, used: set) -> int:
    if box.tooth_id is not None and box.tooth_id not in used:
        return int(box.tooth_id)
    label = index + 1
    while label in used:
        label += 1
    return label


def assemble(
    instances: Sequence[Tuple[Box3, DistanceMap]],
    canvas: Grid3,
    tau_vox: float = 0.5,
) -> LabelMap:
    """Paste binarised instances; contested voxels go to the larger predicted distance."""
    labels = np.zeros(canvas.dims, dtype=np.uint16)
    best = np.full(canvas.dims, -np.inf, dtype=np.float64)
    used: set = set()
    for index, (box, dist_map) in enumerate(instances):
        window = crop_indices(canvas, box)
        if window is None:
            raise InvalidInputError(f"instance {index}: box lies outside the canvas")
        shape = tuple(s.stop - s.start for s in window)
        if tuple(dist_map.dims) != shape:
            raise InvalidInputError(
                f"instance {index}: map dims {dist_map.dims} do not match the box window {shape}"
            )
        label = instance_label(box, index, used)
        used.add(label)
        values = dist_map.data.astype(np.float64)
        wins = (values > tau_vox) & (values > best[window])
        labels[window][wins] = label
        best[window][wins] = values[wins]
    logger.debug("assembled %d instances", len(instances))
    return LabelMap(dims=canvas.dims, spacing=canvas.spacing, origin=canvas.origin, data=labels)
