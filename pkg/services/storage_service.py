import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, Union

import numpy as np
from pydantic import ValidationError

from models.errors import InvalidInputError
from models.schemas import (
    BinaryMask, Box3, CheckpointEntry, CheckpointHeader, ContainerHeader, DistanceMap,
    Grid3, GridKind, Image2D, Jaw, LabelMap, PoseEstimate, RigidTransform, VoiFrame, Volume,
)
from services.tsnet_service import TsnetParams, init_tsnet
from utils.helpers import NumpyJSONEncoder

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_KIND_OF: Dict[type, GridKind] = {
    Volume: GridKind.VOLUME,
    LabelMap: GridKind.LABELS,
    BinaryMask: GridKind.MASK,
    DistanceMap: GridKind.DISTANCE,
    Image2D: GridKind.IMAGE,
}
_TYPE_OF: Dict[GridKind, type] = {kind: cls for cls, kind in _KIND_OF.items()}
_NUMPY_DTYPE = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


def _header_path(path: PathLike) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


def _payload_path(header: Path) -> Path:
    return header.with_suffix(".raw")


class StorageService:
    """Reads and writes the toolkit's file formats under one output directory.

    Grids are stored as a JSON header plus a raw little-endian x-fastest payload.
    """

    def __init__(self, root: Optional[PathLike] = None):
        self.root = Path(root) if root is not None else Path.cwd()

    def path(self, name: PathLike) -> Path:
        """Output location; inputs are read from the paths given."""
        name = Path(name)
        return name if name.is_absolute() else self.root / name

    # ------------------------------------------------------------------
    # JSON documents
    # ------------------------------------------------------------------

    def write_json(self, name: PathLike, payload: Any) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(payload, cls=NumpyJSONEncoder, indent=2, sort_keys=True) + "\n")
        return target

    def read_json(self, name: PathLike) -> Any:
        source = Path(name)
        if not source.is_file():
            raise InvalidInputError(f"file not found: {source}")
        try:
            return json.loads(source.read_text())
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"{source} is not valid JSON: {e}")

    # ------------------------------------------------------------------
    # Grid containers
    # ------------------------------------------------------------------

    def write_grid(self, name: PathLike, grid: Union[Grid3, Image2D]) -> Path:
        """Write header + payload; returns the header path."""
        kind = _KIND_OF.get(type(grid))
        if kind is None:
            raise InvalidInputError(f"cannot store a {type(grid).__name__}")
        dtype = "u16" if kind in (GridKind.LABELS, GridKind.MASK) else "f32"
        header = ContainerHeader(
            dims=list(grid.dims),
            spacing_mm=list(grid.spacing),
            origin_mm=list(grid.origin),
            dtype=dtype,
            kind=kind,
        )
        target = _header_path(self.path(name))
        target.parent.mkdir(parents=True, exist_ok=True)
        payload = np.asarray(grid.data).astype(_NUMPY_DTYPE[dtype]).ravel(order="F")
        _payload_path(target).write_bytes(payload.tobytes())
        target.write_text(header.model_dump_json(indent=2) + "\n")
        logger.debug("wrote %s %s to %s", kind.value, tuple(grid.dims), target)
        return target

    def read_header(self, name: PathLike) -> ContainerHeader:
        source = _header_path(Path(name))
        try:
            return ContainerHeader(**self.read_json(source))
        except (ValidationError, TypeError) as e:
            raise InvalidInputError(f"invalid container header {source}: {e}")

    def read_grid(self, name: PathLike, expect: Optional[Type] = None) -> Union[Grid3, Image2D]:
        """Validate the header, then read and reshape the payload."""
        source = _header_path(Path(name))
        header = self.read_header(source)
        cls = _TYPE_OF[header.kind]
        if expect is not None and not issubclass(cls, expect):
            raise InvalidInputError(f"{source} holds a {header.kind.value} grid, expected {expect.__name__}")
        payload = _payload_path(source)
        if not payload.is_file():
            raise InvalidInputError(f"payload file missing: {payload}")
        size = payload.stat().st_size
        if size != header.payload_bytes:
            raise InvalidInputError(f"{payload} holds {size} bytes, header promises {header.payload_bytes}")
        flat = np.fromfile(payload, dtype=_NUMPY_DTYPE[header.dtype])
        data = flat.reshape(header.dims, order="F")
        return cls(
            dims=tuple(header.dims),
            spacing=tuple(header.spacing_mm),
            origin=tuple(header.origin_mm),
            data=np.ascontiguousarray(data),
        )

    # ------------------------------------------------------------------
    # Boxes, poses, transforms
    # ------------------------------------------------------------------

    def write_boxes(self, name: PathLike, boxes: List[Box3], extra: Optional[Dict[str, Any]] = None) -> Path:
        doc = {"boxes": [b.model_dump(mode="json") for b in boxes]}
        doc.update(extra or {})
        return self.write_json(name, doc)

    def read_boxes(self, name: PathLike) -> List[Box3]:
        doc = self.read_json(name)
        items = doc.get("boxes") if isinstance(doc, dict) else doc
        if not isinstance(items, list):
            raise InvalidInputError(f"{name}: expected a list of boxes")
        try:
            return [Box3(**item) for item in items]
        except (ValidationError, TypeError) as e:
            raise InvalidInputError(f"{name}: malformed box: {e}")

    def write_poses(self, name: PathLike, poses: Dict[Jaw, PoseEstimate]) -> Path:
        doc = {
            jaw.value: {"jaw": jaw.value, "point_px": list(p.point), "angle_deg": p.angle_deg}
            for jaw, p in sorted(poses.items(), key=lambda kv: kv[0].value)
        }
        return self.write_json(name, doc)

    def read_poses(self, name: PathLike) -> Dict[Jaw, PoseEstimate]:
        doc = self.read_json(name)
        if not isinstance(doc, dict):
            raise InvalidInputError(f"{name}: expected an object keyed by jaw")
        poses = {}
        try:
            for key, value in doc.items():
                pose = PoseEstimate(**{"jaw": key, **value})
                if pose.jaw != Jaw(key):
                    raise InvalidInputError(f"{name}: pose under \"{key}\" is for the {pose.jaw.value} jaw")
                poses[pose.jaw] = pose
        except (ValidationError, TypeError, ValueError) as e:
            raise InvalidInputError(f"{name}: malformed pose: {e}")
        return poses

    def write_transforms(self, name: PathLike, frames: Dict[Jaw, VoiFrame]) -> Path:
        return self.write_json(name, {jaw.value: frame.to_dict() for jaw, frame in frames.items()})

    def read_transforms(self, name: PathLike) -> Dict[Jaw, VoiFrame]:
        doc = self.read_json(name)
        frames = {}
        try:
            for key, value in doc.items():
                frames[Jaw(key)] = VoiFrame(
                    jaw=Jaw(value["jaw"]),
                    transform=RigidTransform(rotation=value["rotation"], translation=value["translation"]),
                    dims=tuple(value["dims"]),
                    spacing=tuple(value["spacing_mm"]),
                    flipped=bool(value["flipped"]),
                )
        except (ValidationError, TypeError, ValueError, KeyError, AttributeError) as e:
            raise InvalidInputError(f"{name}: malformed transform record: {e}")
        return frames

    # ------------------------------------------------------------------
    # Network checkpoints
    # ------------------------------------------------------------------

    def save_checkpoint(self, name: PathLike, params: TsnetParams) -> Path:
        state = params.state_dict()
        header = CheckpointHeader(
            widths=list(params.widths),
            groups=params.groups,
            in_channels=params.in_channels,
            relu_head=params.relu_head,
            arrays=[CheckpointEntry(name=k, shape=list(v.shape)) for k, v in state.items()],
        )
        target = _header_path(self.path(name))
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(_payload_path(target), "wb") as handle:
            for value in state.values():
                handle.write(np.asarray(value, dtype="<f8").ravel(order="F").tobytes())
        target.write_text(header.model_dump_json(indent=2) + "\n")
        return target

    def load_checkpoint(self, name: PathLike) -> TsnetParams:
        source = _header_path(Path(name))
        try:
            header = CheckpointHeader(**self.read_json(source))
        except (ValidationError, TypeError) as e:
            raise InvalidInputError(f"invalid checkpoint header {source}: {e}")
        payload = _payload_path(source)
        if not payload.is_file():
            raise InvalidInputError(f"checkpoint payload missing: {payload}")
        flat = np.fromfile(payload, dtype="<f8")
        expected = sum(int(np.prod(entry.shape)) for entry in header.arrays)
        if flat.size != expected:
            raise InvalidInputError(f"{payload} holds {flat.size} values, header promises {expected}")
        state = {}
        offset = 0
        for entry in header.arrays:
            count = int(np.prod(entry.shape))
            state[entry.name] = flat[offset:offset + count].reshape(entry.shape, order="F")
            offset += count
        params = init_tsnet(header.widths, header.groups, 0, header.in_channels, header.relu_head)
        params.load_state_dict(state)
        return params
