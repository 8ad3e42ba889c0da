"""Training-time augmentation and per-tooth crop standardisation."""

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from models.errors import InvalidInputError
from models.schemas import (
    AffineDraw, AffineSpec, BinaryMask, Box3, CutoutRegion, CutoutSpec,
    Grid3, LabelMap, RigidTransform, Volume,
)
from services.volume_service import normalize01, resample, sample_affine

logger = logging.getLogger(__name__)

CROP_DIMS = (64, 64, 128)
# crop axis a samples source axis _AXIS_ORDER[long][a]; all cyclic, so proper rotations
_AXIS_ORDER = {0: (1, 2, 0), 1: (2, 0, 1), 2: (0, 1, 2)}


def cutout_side_range(length: int, spec: CutoutSpec) -> Tuple[int, int]:
    lo = min(length, max(1, math.ceil(length * spec.lo_frac - 1e-9)))
    hi = min(length, max(lo, math.floor(length * spec.hi_frac + 1e-9)))
    return lo, hi


def cutout(v: Volume, spec: CutoutSpec, seed: int) -> Tuple[Volume, Optional[CutoutRegion]]:
    """Zero (fill) a random box; the box may run past the grid and is clipped."""
    rng = np.random.default_rng(seed)
    if rng.random() >= spec.probability:
        return v, None
    sides, lo, hi = [], [], []
    for length in v.dims:
        s_lo, s_hi = cutout_side_range(length, spec)
        side = int(rng.integers(s_lo, s_hi + 1))
        center = int(rng.integers(0, length))
        start = center - side // 2
        sides.append(side)
        lo.append(max(0, start))
        hi.append(min(length, start + side))
    data = v.data.copy()
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = spec.fill
    region = CutoutRegion(sides=tuple(sides), lo=tuple(lo), hi=tuple(hi))
    return v.like(data), region


def draw_affine(v: Grid3, spec: AffineSpec, seed: int) -> AffineDraw:
    rng = np.random.default_rng(seed)
    if rng.random() >= spec.probability:
        return AffineDraw(applied=False)
    angles = rng.uniform(-spec.max_rotate_deg, spec.max_rotate_deg, size=3)
    scale = rng.uniform(1.0 - spec.max_scale_frac, 1.0 + spec.max_scale_frac)
    shift = rng.uniform(-spec.max_translate_frac, spec.max_translate_frac, size=3) * v.extent_mm
    return AffineDraw(applied=True, rotate_deg=tuple(angles), scale=float(scale), translate_mm=tuple(shift))


def _affine_index_map(v: Grid3, draw: AffineDraw) -> Tuple[np.ndarray, np.ndarray]:
    """Index-space pull-back of p' = c + scale * R (p - c) + t about the grid centre."""
    rot_t = Rotation.from_euler("xyz", draw.rotate_deg, degrees=True).as_matrix().T
    spacing = np.asarray(v.spacing)
    origin = np.asarray(v.origin)
    center = origin + 0.5 * v.extent_mm
    shift = np.asarray(draw.translate_mm)
    matrix = (rot_t / draw.scale) * spacing[None, :] / spacing[:, None]
    offset = (center - origin) / spacing + (rot_t @ (origin - center - shift)) / (draw.scale * spacing)
    return matrix, offset


def random_affine(
    v: Volume,
    labels: Optional[BinaryMask],
    spec: AffineSpec,
    seed: int,
) -> Tuple[Volume, Optional[BinaryMask]]:
    """Joint random rotation/scale/translation; trilinear for intensities, nearest for labels."""
    if labels is not None and labels.dims != v.dims:
        raise InvalidInputError("labels must share the volume grid")
    draw = draw_affine(v, spec, seed)
    if not draw.applied:
        return v, labels
    matrix, offset = _affine_index_map(v, draw)
    out_v = v.like(sample_affine(v.data, matrix, offset, v.dims, order=1))
    out_l = None
    if labels is not None:
        out_l = labels.like(sample_affine(labels.data, matrix, offset, labels.dims, order=0))
    return out_v, out_l


def crop_transform(box: Box3, out_dims: Sequence[int] = CROP_DIMS) -> Tuple[RigidTransform, Tuple[float, float, float]]:
    """Crop frame for a box: voxel centres span the box, its longest axis lands on z."""
    size = box.size
    long_axis = 2 if size[2] >= size.max() else int(np.argmax(size))
    order = _AXIS_ORDER[long_axis]
    rotation = np.zeros((3, 3))
    for crop_axis, source_axis in enumerate(order):
        rotation[source_axis, crop_axis] = 1.0
    dims = np.asarray(out_dims, dtype=int)
    spacing = tuple(float(size[order[a]] / max(dims[a] - 1, 1)) for a in range(3))
    return RigidTransform(rotation=rotation, translation=box.lo), spacing


def _check_overlap(grid: Grid3, box: Box3) -> None:
    lo, hi = grid.world_bounds()
    if np.any(box.hi < lo) or np.any(box.lo > hi):
        raise InvalidInputError(f"box {box.min_mm}/{box.max_mm} does not intersect the volume")


def standardize_crop(v: Volume, box: Box3, out_dims: Sequence[int] = CROP_DIMS) -> Volume:
    _check_overlap(v, box)
    xform, spacing = crop_transform(box, out_dims)
    crop = resample(v, xform, out_dims, spacing, out_origin=(0.0, 0.0, 0.0), order=1)
    return normalize01(crop)


def standardize_labels(
    labels: LabelMap,
    box: Box3,
    tooth_id: Optional[int] = None,
    out_dims: Sequence[int] = CROP_DIMS,
):
    """Nearest-neighbour label crop with the standardize_crop geometry.

    With tooth_id set, returns the BinaryMask of that tooth.
    """
    _check_overlap(labels, box)
    xform, spacing = crop_transform(box, out_dims)
    crop = resample(labels, xform, out_dims, spacing, out_origin=(0.0, 0.0, 0.0), order=0)
    if tooth_id is None:
        return crop
    return crop.like(crop.data == tooth_id, BinaryMask)
