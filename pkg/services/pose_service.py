"""Pose loss and pose-aware VOI realignment."""

import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.errors import InvalidInputError
from models.schemas import (
    Box3, Grid3, Jaw, LabelMap, PoseEstimate, PoseLossParams, RigidTransform,
    VoiFrame, VoiSpec, Volume,
)
from services.detector_service import box_from_points, boxes_from_labels, jaw_of
from services.volume_service import flip_y, resample

logger = logging.getLogger(__name__)


def pose_loss(
    truth: Sequence[PoseEstimate],
    pred: Sequence[PoseEstimate],
    params: PoseLossParams,
    weight_norm_sq: float = 0.0,
) -> float:
    """Sum of point distances (pixels) + alpha * angle differences (deg) + beta * ||W||^2."""
    if len(truth) != len(pred):
        raise InvalidInputError(f"pose lists differ in length: {len(truth)} vs {len(pred)}")
    if weight_norm_sq < 0:
        raise InvalidInputError("weight_norm_sq must be non-negative")
    point_term = 0.0
    angle_term = 0.0
    for gt, pr in zip(truth, pred):
        point_term += math.hypot(pr.point[0] - gt.point[0], pr.point[1] - gt.point[1])
        angle_term += abs(pr.angle_deg - gt.angle_deg)
    return point_term + params.alpha * angle_term + params.beta * weight_norm_sq


def rotation_about_x(angle_deg: float) -> np.ndarray:
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def pose_point_world(v: Grid3, pose: PoseEstimate) -> np.ndarray:
    """Regressed point in world mm; x is the volume's centre line."""
    u, w = pose.point
    x_mid = v.origin[0] + 0.5 * (v.dims[0] - 1) * v.spacing[0]
    return np.array([x_mid, v.origin[1] + u * v.spacing[1], v.origin[2] + w * v.spacing[2]])


def _corners(v: Grid3) -> np.ndarray:
    lo, hi = v.world_bounds()
    return np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])


def voi_frame(v: Grid3, pose: PoseEstimate, spec: VoiSpec) -> VoiFrame:
    """Geometry of the realigned slab for one jaw.

    VOI axes: x unchanged, y along the line normal (roots of the upper jaw
    point to +y), z along the regressed line.
    """
    rotation = rotation_about_x(pose.angle_deg)
    anchor = pose_point_world(v, pose)
    local = (_corners(v) - anchor) @ rotation
    if pose.jaw == Jaw.UPPER:
        y_lo, y_hi = -spec.margin_mm, spec.depth_mm
    else:
        y_lo, y_hi = -spec.depth_mm, spec.margin_mm
    if y_hi < local[:, 1].min() or y_lo > local[:, 1].max():
        raise InvalidInputError(
            f"{pose.jaw.value} slab [{y_lo}, {y_hi}] mm lies entirely outside the volume"
        )
    lo = np.array([local[:, 0].min(), y_lo, local[:, 2].min()])
    hi = np.array([local[:, 0].max(), y_hi, local[:, 2].max()])
    extent = hi - lo

    if spec.out_dims is None:
        spacing = np.asarray(v.spacing, dtype=float)
        dims = np.floor(extent / spacing + 1e-6).astype(int) + 1
    else:
        dims = np.asarray(spec.out_dims, dtype=int)
        spacing = np.where(dims > 1, extent / np.maximum(dims - 1, 1), np.maximum(extent, 1.0))

    transform = RigidTransform(rotation=rotation, translation=anchor + rotation @ lo)
    return VoiFrame(
        jaw=pose.jaw,
        transform=transform,
        dims=tuple(int(n) for n in dims),
        spacing=tuple(float(s) for s in spacing),
        flipped=pose.jaw == Jaw.LOWER,
    )


def realign_voi(v: Volume, pose: PoseEstimate, spec: VoiSpec) -> Tuple[Volume, RigidTransform]:
    """Rotate about x so the regressed line is axis-aligned and crop the jaw slab.

    The lower jaw is flipped along y afterwards so both VOIs run occlusal side
    first. The returned transform maps the un-flipped VOI (origin 0) onto the
    source world frame.
    """
    frame = voi_frame(v, pose, spec)
    return resample_to_frame(v, frame), frame.transform


def resample_to_frame(v: Volume, frame: VoiFrame) -> Volume:
    """Intensities of `v` on the VOI grid of an already computed frame."""
    voi = resample(v, frame.transform, frame.dims, frame.spacing, out_origin=(0.0, 0.0, 0.0))
    if frame.flipped:
        voi = flip_y(voi)
    logger.debug("realigned %s jaw: dims=%s spacing=%s", frame.jaw.value, frame.dims, frame.spacing)
    return voi


def apply_to_labels(
    labels: LabelMap,
    xform: RigidTransform,
    out_dims: Sequence[int],
    out_spacing: Sequence[float],
    out_origin: Optional[Sequence[float]] = None,
) -> LabelMap:
    """Nearest-neighbour label resampling under the same pull-back convention as resample."""
    return resample(labels, xform, out_dims, out_spacing, out_origin=out_origin, order=0)


def realign_labels(labels: LabelMap, frame: VoiFrame) -> LabelMap:
    out = apply_to_labels(labels, frame.transform, frame.dims, frame.spacing, out_origin=(0.0, 0.0, 0.0))
    return flip_y(out) if frame.flipped else out


def realign_points(points: np.ndarray, frame: VoiFrame) -> np.ndarray:
    """Source world points -> VOI world points (flip included)."""
    local = frame.transform.inverse().apply(np.asarray(points, dtype=float).reshape(-1, 3))
    if frame.flipped:
        local[:, 1] = (frame.dims[1] - 1) * frame.spacing[1] - local[:, 1]
    return local


def realign_box(box: Box3, frame: VoiFrame) -> Box3:
    """Axis-aligned VOI-frame box around the eight realigned corners of a source box."""
    corners = np.array([[x, y, z] for x in (box.lo[0], box.hi[0]) for y in (box.lo[1], box.hi[1]) for z in (box.lo[2], box.hi[2])])
    return box_from_points(realign_points(corners, frame), np.zeros(3), tooth_id=box.tooth_id, group=box.group, score=box.score)


def restore_labels(voi_labels: LabelMap, frame: VoiFrame, like: Grid3) -> LabelMap:
    """Map a VOI label map back onto the source grid `like`."""
    unflipped = flip_y(voi_labels) if frame.flipped else voi_labels
    unflipped = LabelMap(dims=unflipped.dims, spacing=unflipped.spacing, origin=(0.0, 0.0, 0.0), data=unflipped.data)
    return apply_to_labels(unflipped, frame.transform.inverse(), like.dims, like.spacing, out_origin=like.origin)


def realign_jaws(v: Volume, poses: Dict[Jaw, PoseEstimate], spec: VoiSpec) -> Dict[Jaw, Tuple[Volume, VoiFrame]]:
    result = {}
    for jaw, pose in poses.items():
        frame = voi_frame(v, pose, spec)
        result[jaw] = (resample_to_frame(v, frame), frame)
    return result


def realigned_boxes(labels: LabelMap, frames: Dict[Jaw, VoiFrame], metal: Iterable[int] = ()) -> Dict[Jaw, List[Box3]]:
    """Tight boxes of each jaw's teeth, measured in that jaw's VOI."""
    result = {}
    for jaw, frame in frames.items():
        voi_labels = realign_labels(labels, frame)
        result[jaw] = [b for b in boxes_from_labels(voi_labels, metal) if jaw_of(b.tooth_id) == jaw]
    return result
