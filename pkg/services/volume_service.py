"""Volume primitives: projection, normalisation, flips and resampling."""

import logging
from typing import Optional, Sequence, Tuple, TypeVar

import numpy as np
from scipy import ndimage

from models.errors import InvalidInputError
from models.schemas import BinaryMask, Box3, Grid3, Image2D, LabelMap, RigidTransform, Volume

logger = logging.getLogger(__name__)

G = TypeVar("G", bound=Grid3)

# Sample positions this close to a lattice point are taken as exact.
SNAP_TOL = 1e-6
# Output voxels per sampling block (bounds the coordinate array).
BLOCK_VOXELS = 1 << 20


def index_to_world(grid: Grid3, indices: np.ndarray) -> np.ndarray:
    idx = np.asarray(indices, dtype=float)
    return np.asarray(grid.origin) + idx * np.asarray(grid.spacing)


def world_to_index(grid: Grid3, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)


def mip_x(v: Volume) -> Image2D:
    """Maximum intensity along x; pixel (j, k) covers the (y, z) plane."""
    return Image2D(
        dims=(v.dims[1], v.dims[2]),
        spacing=(v.spacing[1], v.spacing[2]),
        origin=(v.origin[1], v.origin[2]),
        data=v.data.max(axis=0),
    )


def normalize01(v: G) -> G:
    """Min-max rescale to [0, 1]; a constant input maps to all zeros."""
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("cannot normalise non-finite intensities")
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return v.like(np.zeros_like(data))
    return v.like((data - lo) / (hi - lo))


def flip_y(v: G) -> G:
    return v.like(np.ascontiguousarray(v.data[:, ::-1, :]))


def _default_order(grid: Grid3) -> int:
    return 0 if isinstance(grid, (LabelMap, BinaryMask)) else 1


def sample_affine(
    data: np.ndarray,
    matrix: np.ndarray,
    offset: np.ndarray,
    out_dims: Sequence[int],
    order: int = 1,
) -> np.ndarray:
    """Sample `data` at index positions matrix @ out_index + offset.

    Positions outside [0, n-1] on any axis yield 0. order 1 is trilinear,
    order 0 nearest neighbour.
    """
    if any(int(n) < 1 for n in out_dims):
        raise InvalidInputError(f"output dims must be >= 1, got {tuple(out_dims)}")
    matrix = np.asarray(matrix, dtype=float)
    offset = np.asarray(offset, dtype=float)
    src_shape = np.asarray(data.shape, dtype=float)
    src = np.asarray(data, dtype=np.float64)
    nx, ny, nz = (int(n) for n in out_dims)
    out = np.zeros((nx, ny, nz), dtype=np.float64)

    jj, kk = np.meshgrid(np.arange(ny, dtype=float), np.arange(nz, dtype=float), indexing="ij")
    plane = np.stack([np.zeros_like(jj).ravel(), jj.ravel(), kk.ravel()])
    step = max(1, BLOCK_VOXELS // max(1, ny * nz))
    for start in range(0, nx, step):
        stop = min(nx, start + step)
        ii = np.arange(start, stop, dtype=float)
        grid = np.repeat(plane[:, None, :], ii.size, axis=1)
        grid[0] = ii[:, None]
        grid = grid.reshape(3, -1)
        coords = matrix @ grid + offset[:, None]
        nearest = np.rint(coords)
        snap = np.abs(coords - nearest) < SNAP_TOL
        coords[snap] = nearest[snap]
        inside = np.all((coords >= 0) & (coords <= (src_shape - 1)[:, None]), axis=0)
        values = np.zeros(coords.shape[1], dtype=np.float64)
        if inside.any():
            values[inside] = ndimage.map_coordinates(
                src, coords[:, inside], order=order, mode="nearest", prefilter=False
            )
        out[start:stop] = values.reshape(stop - start, ny, nz)
    return out


def resample(
    v: G,
    xform: RigidTransform,
    out_dims: Sequence[int],
    out_spacing: Sequence[float],
    out_origin: Optional[Sequence[float]] = None,
    order: Optional[int] = None,
) -> G:
    """Resample onto a new grid; xform maps output world points into the source world."""
    out_spacing = tuple(float(s) for s in out_spacing)
    if len(out_spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in out_spacing):
        raise InvalidInputError(f"output spacing must be positive, got {out_spacing}")
    if len(out_dims) != 3 or any(int(n) < 1 for n in out_dims):
        raise InvalidInputError(f"output dims must be >= 1, got {tuple(out_dims)}")
    origin_out = np.asarray(v.origin if out_origin is None else out_origin, dtype=float)
    s_in = np.asarray(v.spacing, dtype=float)
    s_out = np.asarray(out_spacing, dtype=float)

    matrix = xform.rotation * s_out[None, :] / s_in[:, None]
    offset = (xform.rotation @ origin_out + xform.translation - np.asarray(v.origin)) / s_in
    data = sample_affine(v.data, matrix, offset, out_dims, order=_default_order(v) if order is None else order)
    return type(v)(
        dims=tuple(int(n) for n in out_dims),
        spacing=out_spacing,
        origin=tuple(float(o) for o in origin_out),
        data=data,
    )


def crop_indices(grid: Grid3, box: Box3) -> Optional[Tuple[slice, slice, slice]]:
    """Index slices covering the voxel centres inside `box` (None if there are none)."""
    lo = np.ceil(world_to_index(grid, box.lo) - SNAP_TOL).astype(int)
    hi = np.floor(world_to_index(grid, box.hi) + SNAP_TOL).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(grid.dims) - 1)
    if np.any(hi < lo):
        return None
    return tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
