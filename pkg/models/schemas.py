from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, Dict, Any, List, Tuple, ClassVar, FrozenSet, Literal
from datetime import datetime
from enum import Enum
import numpy as np


Vec3 = Tuple[float, float, float]
Dims3 = Tuple[int, int, int]


class Jaw(str, Enum):
    UPPER = "upper"
    LOWER = "lower"


class ToothGroup(str, Enum):
    METAL = "metal"
    ONE_ROOTED = "one_rooted"
    OTHERS = "others"


class DistanceLoss(str, Enum):
    DISTANCE = "distance"
    DICE = "dice"


class SamplingStrategy(str, Enum):
    NMS = "nms"
    TOPK = "topk"


# ---------------------------------------------------------------------------
# Sampled grids
# ---------------------------------------------------------------------------


class Grid3(BaseModel):
    """Dense 3D array on an axis-aligned grid, indexed [i, j, k] = (x, y, z)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dims: Dims3
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)
    data: np.ndarray

    dtype: ClassVar[Any] = np.float32

    @model_validator(mode="before")
    @classmethod
    def _fill_dims(cls, values: Any) -> Any:
        if isinstance(values, dict) and "dims" not in values and "data" in values:
            values = dict(values)
            values["dims"] = tuple(int(n) for n in np.shape(values["data"]))
        return values

    @field_validator("data", mode="before")
    @classmethod
    def _coerce_data(cls, value: Any) -> np.ndarray:
        return np.asarray(value, dtype=cls.dtype)

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, value: Vec3) -> Vec3:
        if any(not np.isfinite(s) or s <= 0 for s in value):
            raise ValueError(f"spacing must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _check_shape(self):
        if any(n < 1 for n in self.dims):
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if tuple(self.data.shape) != tuple(self.dims):
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.dims}")
        return self

    def like(self, data: np.ndarray, cls: Optional[type] = None):
        """Same geometry, new payload (optionally a different grid type)."""
        target = cls or type(self)
        return target(dims=self.dims, spacing=self.spacing, origin=self.origin, data=data)

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def world_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """World coordinates of the first and last voxel centres."""
        lo = np.asarray(self.origin, dtype=float)
        return lo, lo + self.extent_mm


class Volume(Grid3):
    dtype: ClassVar[Any] = np.float32


class LabelMap(Grid3):
    dtype: ClassVar[Any] = np.uint16


class BinaryMask(Grid3):
    dtype: ClassVar[Any] = np.uint8

    @field_validator("data")
    @classmethod
    def _binary(cls, value: np.ndarray) -> np.ndarray:
        if value.size and value.max() > 1:
            raise ValueError("binary mask values must be 0 or 1")
        return value


class DistanceMap(Grid3):
    """Distance to nearest background, in face-step (voxel) units."""

    dtype: ClassVar[Any] = np.float32

    @field_validator("data")
    @classmethod
    def _non_negative(cls, value: np.ndarray) -> np.ndarray:
        if value.size and not (value.min() >= 0):
            raise ValueError("distance map values must be finite and >= 0")
        return value


class Image2D(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dims: Tuple[int, int]
    spacing: Tuple[float, float] = (1.0, 1.0)
    origin: Tuple[float, float] = (0.0, 0.0)
    data: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def _fill_dims(cls, values: Any) -> Any:
        if isinstance(values, dict) and "dims" not in values and "data" in values:
            values = dict(values)
            values["dims"] = tuple(int(n) for n in np.shape(values["data"]))
        return values

    @field_validator("data", mode="before")
    @classmethod
    def _coerce_data(cls, value: Any) -> np.ndarray:
        return np.asarray(value, dtype=np.float32)

    @model_validator(mode="after")
    def _check_shape(self):
        if tuple(self.data.shape) != tuple(self.dims):
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.dims}")
        return self


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


class RigidTransform(BaseModel):
    """p_target = rotation @ p + translation (mm)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rotation: np.ndarray = Field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = Field(default_factory=lambda: np.zeros(3))

    @field_validator("rotation", mode="before")
    @classmethod
    def _rotation(cls, value: Any) -> np.ndarray:
        rot = np.asarray(value, dtype=float).reshape(3, 3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be a proper orthonormal matrix")
        return rot

    @field_validator("translation", mode="before")
    @classmethod
    def _translation(cls, value: Any) -> np.ndarray:
        return np.asarray(value, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rotation=rot_t, translation=-(rot_t @ self.translation))

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """self after inner."""
        return RigidTransform(
            rotation=self.rotation @ inner.rotation,
            translation=self.rotation @ inner.translation + self.translation,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


class Box3(BaseModel):
    model_config = ConfigDict(frozen=True, use_enum_values=False)

    min_mm: Vec3
    max_mm: Vec3
    tooth_id: Optional[int] = None
    group: Optional[ToothGroup] = None
    score: Optional[float] = Field(None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self):
        if any(not (lo < hi) for lo, hi in zip(self.min_mm, self.max_mm)):
            raise ValueError(f"box requires min < max on every axis, got {self.min_mm} / {self.max_mm}")
        return self

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min_mm, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max_mm, dtype=float)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def with_bounds(self, lo: np.ndarray, hi: np.ndarray) -> "Box3":
        return self.model_copy(update={"min_mm": tuple(float(x) for x in lo), "max_mm": tuple(float(x) for x in hi)})


class AnchorGrid(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_sizes_mm: List[Vec3] = Field(default_factory=lambda: [(6.0, 6.0, 6.0), (8.0, 8.0, 8.0), (11.0, 11.0, 11.0)])
    stride_mm: Vec3 = (2.0, 2.0, 2.0)
    extent: Box3


class RpnTargets(BaseModel):
    """Indices into the anchor list."""

    positives: List[int]
    matched_gt: List[int]
    group_labels: List[Optional[ToothGroup]]
    forced: List[bool]
    negatives: List[int]


class PoseEstimate(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    point: Tuple[float, float] = Field(..., alias="point_px")
    angle_deg: float
    jaw: Jaw

    @field_validator("angle_deg")
    @classmethod
    def _angle_range(cls, value: float) -> float:
        if not (-90.0 < value <= 90.0):
            raise ValueError(f"angle_deg must lie in (-90, 90], got {value}")
        return value


class PoseLossParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.1, ge=0.0)
    beta: float = Field(0.1, ge=0.0)


class VoiSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depth_mm: float = Field(12.0, gt=0.0)
    margin_mm: float = Field(2.0, ge=0.0)
    # None keeps the source spacing
    out_dims: Optional[Dims3] = (224, 224, 112)


class VoiFrame(BaseModel):
    """Where a realigned VOI sits: transform maps un-flipped VOI world to source world."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    jaw: Jaw
    transform: RigidTransform
    dims: Dims3
    spacing: Vec3
    flipped: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "jaw": self.jaw.value,
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing),
            "flipped": self.flipped,
            **self.transform.to_dict(),
        }


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


class CutoutSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    probability: float = Field(0.8, ge=0.0, le=1.0)
    lo_frac: float = Field(0.2, gt=0.0, lt=1.0)
    hi_frac: float = Field(0.25, gt=0.0, lt=1.0)
    fill: float = 0.0

    @model_validator(mode="after")
    def _ordered(self):
        if self.lo_frac > self.hi_frac:
            raise ValueError("lo_frac must not exceed hi_frac")
        return self


class CutoutRegion(BaseModel):
    """Applied cutout in voxel indices, half-open [lo, hi); sides are pre-clip lengths."""

    sides: Dims3
    lo: Dims3
    hi: Dims3

    @property
    def voxel_count(self) -> int:
        return int(np.prod(np.subtract(self.hi, self.lo)))


class AffineSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    probability: float = Field(0.8, ge=0.0, le=1.0)
    max_rotate_deg: float = Field(10.0, ge=0.0)
    max_scale_frac: float = Field(0.1, ge=0.0, lt=1.0)
    max_translate_frac: float = Field(0.05, ge=0.0)


class AffineDraw(BaseModel):
    applied: bool
    rotate_deg: Vec3 = (0.0, 0.0, 0.0)
    scale: float = 1.0
    translate_mm: Vec3 = (0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Detector sampling
# ---------------------------------------------------------------------------


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t_pos: float = Field(0.5, ge=0.0, le=1.0)
    t_neg: float = Field(0.1, ge=0.0, le=1.0)
    nms_iou: float = Field(0.3, ge=0.0, le=1.0)
    max_pos: int = Field(32, ge=0)
    max_neg: int = Field(32, ge=0)
    seed: int = Field(0, ge=0)
    strategy: SamplingStrategy = SamplingStrategy.NMS

    @model_validator(mode="after")
    def _thresholds(self):
        if self.t_neg >= self.t_pos:
            raise ValueError("t_neg must be below t_pos")
        return self


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


class ConfusionCounts(BaseModel):
    tp: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)


class F1Score(BaseModel):
    precision: float
    sensitivity: float
    f1: float


class MeanStd(BaseModel):
    mean: Optional[float] = None
    std: Optional[float] = None


class MetricsAggregate(BaseModel):
    """Scene-level summary: per-instance columns as mean ± std, plus the set-level scores."""

    precision: MeanStd = Field(default_factory=MeanStd)
    sensitivity: MeanStd = Field(default_factory=MeanStd)
    f1: MeanStd = Field(default_factory=MeanStd)
    hd_mm: MeanStd = Field(default_factory=MeanStd)
    assd_mm: MeanStd = Field(default_factory=MeanStd)
    aji: float
    # detection scores; filled only when boxes are evaluated
    ap50: Optional[float] = None
    oir: Optional[MeanStd] = None


class MetricsReport(BaseModel):
    per_instance: List[Dict[str, Any]]
    aggregate: MetricsAggregate
    by_group: Dict[str, Dict[str, MeanStd]] = Field(default_factory=dict)
    integrated_hd_mm: Optional[float] = None
    integrated_assd_mm: Optional[float] = None

    def with_detection(self, ap50: float, oir: MeanStd) -> "MetricsReport":
        return self.model_copy(update={"aggregate": self.aggregate.model_copy(update={"ap50": ap50, "oir": oir})})


class GradcheckEntry(BaseModel):
    name: str
    index: List[int]
    analytic: float
    numeric: float
    rel_error: float


class GradcheckReport(BaseModel):
    entries: List[GradcheckEntry]
    max_rel_error: float
    passed: bool
    floor: float


# ---------------------------------------------------------------------------
# Phantom
# ---------------------------------------------------------------------------


class PhantomSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dims: Dims3 = (176, 96, 112)
    spacing: Vec3 = (0.5, 0.5, 0.5)
    teeth_per_jaw: int = Field(14, ge=2, le=16)
    # arch follows z = arch_coeff * x**2 in the occlusal plane
    arch_coeff: float = Field(0.025, gt=0.0)
    jaw_gap_mm: float = Field(3.0, ge=0.0)
    tooth_gap_mm: float = Field(1.0, ge=0.0)
    size_jitter: float = Field(0.05, ge=0.0, lt=0.3)
    tilt_deg: float = Field(0.0, gt=-45.0, lt=45.0)
    missing: FrozenSet[int] = frozenset()
    metal: FrozenSet[int] = frozenset()
    noise_sigma: float = Field(0.02, ge=0.0)
    streak_gain: float = Field(10.0, ge=0.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _teeth_even(self):
        if self.teeth_per_jaw % 2:
            raise ValueError("teeth_per_jaw must be even (symmetric arches)")
        if min(self.dims) < 64:
            raise ValueError(f"phantom dims must be >= 64 on every axis, got {self.dims}")
        return self


class PhantomTruth(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    volume: Volume
    labels: LabelMap
    boxes: List[Box3]
    poses: Dict[Jaw, PoseEstimate]
    spec: PhantomSpec

    @property
    def tooth_ids(self) -> List[int]:
        return [b.tooth_id for b in self.boxes if b.tooth_id is not None]


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


class GridKind(str, Enum):
    VOLUME = "volume"
    LABELS = "labels"
    MASK = "mask"
    DISTANCE = "distance"
    IMAGE = "image"


class ContainerHeader(BaseModel):
    """JSON half of a raw+JSON grid container."""

    model_config = ConfigDict(extra="forbid")

    dims: List[int]
    spacing_mm: List[float]
    origin_mm: List[float]
    dtype: Literal["f32", "u16"]
    order: Literal["x-fastest"] = "x-fastest"
    endian: Literal["little"] = "little"
    kind: GridKind = GridKind.VOLUME

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.dims) not in (2, 3) or any(n < 1 for n in self.dims):
            raise ValueError(f"dims must be 2 or 3 positive sizes, got {self.dims}")
        if len(self.spacing_mm) != len(self.dims) or len(self.origin_mm) != len(self.dims):
            raise ValueError("spacing_mm and origin_mm must match dims in length")
        return self

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.dims)) * (4 if self.dtype == "f32" else 2)


class CheckpointEntry(BaseModel):
    name: str
    shape: List[int]


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["tsnet-checkpoint"] = "tsnet-checkpoint"
    dtype: Literal["f64"] = "f64"
    endian: Literal["little"] = "little"
    widths: List[int]
    groups: int
    in_channels: int = 1
    relu_head: bool = False
    arrays: List[CheckpointEntry]


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


class PipelineResult(BaseModel):
    """Per-jaw VOI outputs plus the merged label map in the source frame."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: Dict[Jaw, VoiFrame]
    boxes: Dict[Jaw, List[Box3]]
    voi_labels: Dict[Jaw, LabelMap]
    labels: LabelMap
    voi_reports: Dict[Jaw, MetricsReport] = Field(default_factory=dict)
    report: Optional[MetricsReport] = None


# ---------------------------------------------------------------------------
# CLI envelope
# ---------------------------------------------------------------------------


class CommandResult(BaseModel):
    success: bool
    data: Optional[Any] = None
    message: Optional[str] = None
    error: Optional[Dict[str, Any]] = None
    timestamp: datetime = Field(default_factory=datetime.utcnow)
