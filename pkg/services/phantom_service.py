"""Procedural jaw phantom: superellipsoid teeth on parabolic arches."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid
from scipy.special import gamma
from sklearn.neighbors import KDTree

from models.errors import InvalidInputError
from models.schemas import (
    Box3, DistanceMap, Jaw, LabelMap, PhantomSpec, PhantomTruth,
    PoseEstimate, Volume,
)
from services.augment_service import CROP_DIMS, standardize_labels
from services.detector_service import ONE_ROOTED_POSITIONS, boxes_from_labels, dilate
from services.distance_service import regression_target
from services.pose_service import rotation_about_x

logger = logging.getLogger(__name__)

AIR, BONE, TOOTH, METAL = 0.0, 0.4, 0.7, 1.5

# position -> (mesio-distal width, bucco-lingual thickness, crown height, root length) in mm,
# scaled so a whole tooth fits the 12 mm root depth of a VOI
TOOTH_TABLE = {
    1: (6.4, 5.6, 4.5, 6.0),
    2: (5.2, 5.0, 4.0, 5.8),
    3: (6.0, 6.4, 4.5, 6.5),
    4: (5.6, 6.8, 4.0, 6.0),
    5: (5.4, 6.8, 4.0, 6.0),
    6: (8.0, 8.4, 4.0, 5.5),
    7: (7.4, 8.0, 4.0, 5.5),
    8: (6.8, 7.6, 3.8, 5.0),
}
LOWER_INCISOR_SCALE = 0.85
EXPONENT = 3.0
APEX_EXPONENT = 8.0
ROOT_TAPER = 0.4
FURCATION = 0.3
LOBE_OFFSET, LOBE_HALF_WIDTH = 0.55, 0.4
BONE_MARGIN_MM = 2.0
STREAK_RAYS, STREAK_DECAY_MM, STREAK_RADIUS_MM = 8, 6.0, 15.0
OVERLAP_TOLERANCE = 0.02


def _superellipse_area(half_a: np.ndarray, half_b: np.ndarray, level: np.ndarray, p: float = EXPONENT) -> np.ndarray:
    """Area of |a/A|^p + |b/B|^p <= level."""
    level = np.clip(level, 0.0, None)
    return 4.0 * half_a * half_b * level ** (2.0 / p) * gamma(1 + 1 / p) ** 2 / gamma(1 + 2 / p)


@dataclass
class ToothShape:
    tooth_id: int
    jaw: Jaw
    center_xz: np.ndarray
    tangent_xz: np.ndarray
    width: float
    thickness: float
    crown_height: float
    root_length: float
    occlusal_y: float
    two_lobed: bool

    @property
    def length(self) -> float:
        return self.crown_height + self.root_length

    @property
    def direction(self) -> float:
        """Sign of the crown-to-apex direction along y."""
        return 1.0 if self.jaw == Jaw.UPPER else -1.0

    def local(self, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Untilted world points (..., 3) -> (mesio-distal, bucco-lingual, height above the occlusal plane)."""
        dx = q[..., 0] - self.center_xz[0]
        dz = q[..., 2] - self.center_xz[1]
        tx, tz = self.tangent_xz
        a = dx * tx + dz * tz
        b = -dx * tz + dz * tx
        h = (q[..., 1] - self.occlusal_y) * self.direction
        return a, b, h

    def insideness(self, q: np.ndarray) -> np.ndarray:
        """<= 1 inside the tooth; smaller is deeper."""
        a, b, h = self.local(q)
        half_a, half_b = 0.5 * self.width, 0.5 * self.thickness
        p = EXPONENT
        value = np.full(a.shape, np.inf)

        crown = (h >= 0) & (h <= self.crown_height)
        value[crown] = (
            np.abs(a[crown] / half_a) ** p
            + np.abs(b[crown] / half_b) ** p
            + np.abs((self.crown_height - h[crown]) / self.crown_height) ** p
        )

        root = (h > self.crown_height) & (h <= self.length)
        t = (h[root] - self.crown_height) / self.root_length
        taper = 1.0 - (1.0 - ROOT_TAPER) * t
        apex = t ** APEX_EXPONENT
        trunk = np.abs(a[root] / (half_a * taper)) ** p + np.abs(b[root] / (half_b * taper)) ** p + apex
        if self.two_lobed:
            lobe_a = LOBE_HALF_WIDTH * half_a * taper
            shift = LOBE_OFFSET * half_a * taper
            lobes = np.minimum(np.abs(a[root] - shift), np.abs(a[root] + shift))
            split = np.abs(lobes / lobe_a) ** p + np.abs(b[root] / (half_b * taper)) ** p + apex
            trunk = np.where(t > FURCATION, split, trunk)
        value[root] = trunk
        return value

    def crown_mask(self, q: np.ndarray) -> np.ndarray:
        _, _, h = self.local(q)
        return (h >= 0) & (h <= self.crown_height)

    def volume_mm3(self, samples: int = 4001) -> float:
        half_a, half_b = 0.5 * self.width, 0.5 * self.thickness
        hc = np.linspace(0.0, self.crown_height, samples)
        crown = _superellipse_area(half_a, half_b, 1.0 - ((self.crown_height - hc) / self.crown_height) ** EXPONENT)
        t = np.linspace(0.0, 1.0, samples)
        taper = 1.0 - (1.0 - ROOT_TAPER) * t
        level = 1.0 - t ** APEX_EXPONENT
        root = _superellipse_area(half_a * taper, half_b * taper, level)
        if self.two_lobed:
            lobes = 2.0 * _superellipse_area(LOBE_HALF_WIDTH * half_a * taper, half_b * taper, level)
            root = np.where(t > FURCATION, lobes, root)
        return float(trapezoid(crown, hc) + trapezoid(root, t * self.root_length))


def tooth_volume_mm3(tooth: ToothShape) -> float:
    return tooth.volume_mm3()


class PhantomGenerator:
    """Builds a PhantomTruth from a PhantomSpec; deterministic under spec.seed."""

    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        self.spacing = np.asarray(spec.spacing, dtype=float)
        self.dims = np.asarray(spec.dims, dtype=int)
        self.center = 0.5 * (self.dims - 1) * self.spacing
        self.tilt = rotation_about_x(spec.tilt_deg)
        self.rng = np.random.default_rng(spec.seed)
        self.teeth: List[ToothShape] = []

    def generate(self) -> PhantomTruth:
        """Main method: place teeth, rasterise labels, paint intensities, derive boxes and poses"""
        self.teeth = self._place_teeth()
        untilted = self._untilted_coordinates()
        labels = self._rasterize_teeth(untilted)
        volume = self._paint_intensities(untilted, labels)
        label_map = LabelMap(dims=tuple(self.dims), spacing=tuple(self.spacing), data=labels)
        boxes = boxes_from_labels(label_map, metal=self.spec.metal)
        truth = PhantomTruth(
            volume=Volume(dims=tuple(self.dims), spacing=tuple(self.spacing), data=volume),
            labels=label_map,
            boxes=boxes,
            poses=self._ground_truth_poses(),
            spec=self.spec,
        )
        logger.info("phantom: %d teeth, tilt %.1f deg", len(boxes), self.spec.tilt_deg)
        return truth

    # placement ------------------------------------------------------------

    def _tooth_sizes(self, jaw: Jaw, position: int) -> Tuple[float, float, float, float]:
        width, thickness, crown, root = TOOTH_TABLE[position]
        if jaw == Jaw.LOWER and position <= 2:
            width *= LOWER_INCISOR_SCALE
        jitter = 1.0 + self.rng.uniform(-self.spec.size_jitter, self.spec.size_jitter, size=4)
        return width * jitter[0], thickness * jitter[1], crown * jitter[2], root * jitter[3]

    def _arch_table(self, x_max: float = 80.0, step: float = 0.01) -> Tuple[np.ndarray, np.ndarray]:
        x = np.arange(0.0, x_max, step)
        speed = np.sqrt(1.0 + (2.0 * self.spec.arch_coeff * x) ** 2)
        arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * step)])
        return x, arc

    def _place_teeth(self) -> List[ToothShape]:
        per_side = self.spec.teeth_per_jaw // 2
        a = self.spec.arch_coeff
        gap = self.spec.tooth_gap_mm
        x_table, arc_table = self._arch_table()
        placed: List[Tuple[int, Jaw, float, float, float, Tuple[float, float, float, float]]] = []
        for jaw, quadrants in ((Jaw.UPPER, (1, 2)), (Jaw.LOWER, (4, 3))):
            for quadrant, side in zip(quadrants, (-1.0, 1.0)):
                s = 0.5 * gap
                for position in range(1, per_side + 1):
                    sizes = self._tooth_sizes(jaw, position)
                    s_mid = s + 0.5 * sizes[0]
                    x = float(np.interp(s_mid, arc_table, x_table))
                    placed.append((quadrant * 10 + position, jaw, side * x, a * x * x, side, sizes))
                    s += sizes[0] + gap

        z_values = [p[3] for p in placed]
        z_shift = self.center[2] - 0.5 * (min(z_values) + max(z_values))
        self.arch_z0 = z_shift
        teeth = []
        for tooth_id, jaw, x, z, side, (width, thickness, crown, root) in placed:
            tangent = np.array([side * 1.0, 2.0 * a * abs(x)])
            tangent /= np.linalg.norm(tangent)
            occlusal = self.center[1] + (0.5 if jaw == Jaw.UPPER else -0.5) * self.spec.jaw_gap_mm
            teeth.append(ToothShape(
                tooth_id=tooth_id,
                jaw=jaw,
                center_xz=np.array([self.center[0] + x, z + z_shift]),
                tangent_xz=tangent,
                width=width,
                thickness=thickness,
                crown_height=crown,
                root_length=root,
                occlusal_y=occlusal,
                two_lobed=tooth_id % 10 not in ONE_ROOTED_POSITIONS,
            ))
        return teeth

    # rasterisation --------------------------------------------------------

    def _untilted_coordinates(self) -> np.ndarray:
        """World coordinates of every voxel centre, rotated back into the untilted scene."""
        axes = [np.arange(n) * s for n, s in zip(self.dims, self.spacing)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return (grid - self.center) @ self.tilt + self.center

    def _tooth_window(self, tooth: ToothShape) -> Tuple[slice, slice, slice]:
        reach = 0.5 * max(tooth.width, tooth.thickness) + 1.0
        ys = sorted([tooth.occlusal_y - tooth.direction, tooth.occlusal_y + tooth.direction * (tooth.length + 1.0)])
        corners = np.array([
            [tooth.center_xz[0] + dx, y, tooth.center_xz[1] + dz]
            for dx in (-reach, reach) for y in ys for dz in (-reach, reach)
        ])
        tilted = (corners - self.center) @ self.tilt.T + self.center
        lo = np.floor(tilted.min(axis=0) / self.spacing).astype(int) - 1
        hi = np.ceil(tilted.max(axis=0) / self.spacing).astype(int) + 2
        lo = np.clip(lo, 0, self.dims)
        hi = np.clip(hi, 0, self.dims)
        return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))

    def _rasterize_teeth(self, untilted: np.ndarray) -> np.ndarray:
        labels = np.zeros(tuple(self.dims), dtype=np.uint16)
        depth = np.full(tuple(self.dims), np.inf)
        counts: Dict[int, int] = {}
        missing = set(self.spec.missing)
        for tooth in self.teeth:
            if tooth.tooth_id in missing:
                continue
            window = self._tooth_window(tooth)
            value = tooth.insideness(untilted[window])
            inside = value <= 1.0
            counts[tooth.tooth_id] = int(inside.sum())
            if counts[tooth.tooth_id] == 0:
                raise InvalidInputError(f"tooth {tooth.tooth_id} does not fall inside the volume")

            contested = inside & np.isfinite(depth[window])
            if contested.any():
                rivals, shared = np.unique(labels[window][contested], return_counts=True)
                for rival, n_shared in zip(rivals, shared):
                    smaller = min(counts[tooth.tooth_id], counts[int(rival)])
                    if n_shared > OVERLAP_TOLERANCE * smaller:
                        raise InvalidInputError(
                            f"teeth {int(rival)} and {tooth.tooth_id} overlap in {int(n_shared)} voxels; "
                            f"increase tooth_gap_mm or reduce arch_coeff"
                        )
            wins = inside & (value < depth[window])
            labels[window][wins] = tooth.tooth_id
            depth[window][wins] = value[wins]

        for tooth_id in counts:
            labels = self._keep_largest_component(labels, tooth_id)
            voxels = np.argwhere(labels == tooth_id)
            if np.any(voxels.min(axis=0) == 0) or np.any(voxels.max(axis=0) == self.dims - 1):
                raise InvalidInputError(f"tooth {tooth_id} touches the volume border; enlarge dims or reduce tilt")
        return labels

    @staticmethod
    def _keep_largest_component(labels: np.ndarray, tooth_id: int) -> np.ndarray:
        mask = labels == tooth_id
        components, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
        if n > 1:
            sizes = np.bincount(components.ravel())[1:]
            labels[mask & (components != int(np.argmax(sizes)) + 1)] = 0
        return labels

    # intensities ----------------------------------------------------------

    def _bone_mask(self, untilted: np.ndarray) -> np.ndarray:
        bone = np.zeros(tuple(self.dims), dtype=bool)
        for jaw in (Jaw.UPPER, Jaw.LOWER):
            teeth = [t for t in self.teeth if t.jaw == jaw]
            if not teeth:
                continue
            direction = teeth[0].direction
            occlusal = teeth[0].occlusal_y
            lo = min(t.crown_height for t in teeth) - 1.0
            hi = max(t.length for t in teeth) + 1.5
            height = (untilted[..., 1] - occlusal) * direction
            band = (height >= lo) & (height <= hi)
            if not band.any():
                continue
            x_span = max(abs(t.center_xz[0] - self.center[0]) for t in teeth) + 3.0
            xs = np.arange(-x_span, x_span, 0.1)
            arch = np.column_stack([self.center[0] + xs, self.spec.arch_coeff * xs ** 2 + self.arch_z0])
            half_width = 0.5 * max(t.thickness for t in teeth) + BONE_MARGIN_MM
            dist, _ = KDTree(arch).query(untilted[band][:, [0, 2]], k=1)
            bone[band] = dist[:, 0] <= half_width
        return bone

    def _streaks(self, untilted: np.ndarray, tooth: ToothShape) -> np.ndarray:
        """Sign-alternating radial streaks in axial slices through a metal crown."""
        amplitude = self.spec.streak_gain * self.spec.noise_sigma
        height = (untilted[..., 1] - tooth.occlusal_y) * tooth.direction
        slab = (height >= 0) & (height <= tooth.crown_height)
        dx = untilted[..., 0] - tooth.center_xz[0]
        dz = untilted[..., 2] - tooth.center_xz[1]
        radius = np.hypot(dx, dz)
        rays = np.sign(np.cos(STREAK_RAYS * np.arctan2(dz, dx)))
        return np.where(slab & (radius <= STREAK_RADIUS_MM), amplitude * rays * np.exp(-radius / STREAK_DECAY_MM), 0.0)

    def _paint_intensities(self, untilted: np.ndarray, labels: np.ndarray) -> np.ndarray:
        volume = np.full(tuple(self.dims), AIR)
        volume[self._bone_mask(untilted)] = BONE
        volume[labels > 0] = TOOTH
        for tooth in self.teeth:
            if tooth.tooth_id not in self.spec.metal or tooth.tooth_id in self.spec.missing:
                continue
            crown = (labels == tooth.tooth_id) & tooth.crown_mask(untilted)
            volume += self._streaks(untilted, tooth) * ~crown
            volume[crown] = METAL
        if self.spec.noise_sigma > 0:
            volume += self.rng.normal(0.0, self.spec.noise_sigma, size=volume.shape)
        return np.minimum(volume, METAL).astype(np.float32)

    # poses ----------------------------------------------------------------

    def _ground_truth_poses(self) -> Dict[Jaw, PoseEstimate]:
        poses = {}
        for jaw, sign in ((Jaw.UPPER, 0.5), (Jaw.LOWER, -0.5)):
            anchor = self.center + np.array([0.0, sign * self.spec.jaw_gap_mm, 0.0])
            tilted = self.tilt @ (anchor - self.center) + self.center
            u, v = tilted[1] / self.spacing[1], tilted[2] / self.spacing[2]
            if not (0 <= u <= self.dims[1] - 1 and 0 <= v <= self.dims[2] - 1):
                raise InvalidInputError(f"{jaw.value} pose point falls outside the projection image")
            poses[jaw] = PoseEstimate(point=(float(u), float(v)), angle_deg=self.spec.tilt_deg, jaw=jaw)
        return poses


def generate(spec: PhantomSpec) -> PhantomTruth:
    return PhantomGenerator(spec).generate()


def oracle_distance_targets(
    truth: PhantomTruth,
    margin_mm: float = 2.0,
    d_max_vox: float = 20.0,
    crop_dims: Sequence[int] = CROP_DIMS,
) -> List[Tuple[Box3, DistanceMap]]:
    """Per tooth: dilated gt box and the regression target of its standardised mask."""
    return label_distance_targets(truth.labels, truth.boxes, margin_mm, d_max_vox, crop_dims)


def label_distance_targets(
    labels: LabelMap,
    boxes: Sequence[Box3],
    margin_mm: float = 2.0,
    d_max_vox: float = 20.0,
    crop_dims: Sequence[int] = CROP_DIMS,
) -> List[Tuple[Box3, DistanceMap]]:
    lo, hi = labels.world_bounds()
    half = 0.5 * np.asarray(labels.spacing)
    bounds = Box3(min_mm=tuple(lo - half), max_mm=tuple(hi + half))
    targets = []
    for box in boxes:
        grown = dilate(box, margin_mm, bounds)
        mask = standardize_labels(labels, grown, box.tooth_id, crop_dims)
        targets.append((grown, regression_target(mask, d_max_vox)))
    return targets
