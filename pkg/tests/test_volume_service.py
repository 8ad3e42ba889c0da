import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from conftest import make_labels, make_volume
from models.errors import InvalidInputError
from models.schemas import Box3, RigidTransform, Volume
from services.volume_service import (
    crop_indices, flip_y, index_to_world, mip_x, normalize01, resample, world_to_index,
)


def trilinear_oracle(data: np.ndarray, point: np.ndarray) -> float:
    """Scalar trilinear interpolation at an index-space point; 0 outside [0, n-1]."""
    shape = np.asarray(data.shape)
    if np.any(point < -1e-9) or np.any(point > shape - 1 + 1e-9):
        return 0.0
    base = np.minimum(np.floor(point).astype(int), np.maximum(shape - 2, 0))
    frac = point - base
    total = 0.0
    for corner in np.ndindex(2, 2, 2):
        idx = np.minimum(base + np.array(corner), shape - 1)
        weight = np.prod(np.where(np.array(corner) == 1, frac, 1.0 - frac))
        if weight:
            total += weight * float(data[tuple(idx)])
    return total


small_grids = arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
                     elements=st.floats(-100, 100, width=32))


class TestIndexWorld:
    def test_round_trip_at_voxel_centres(self):
        v = make_volume(np.zeros((4, 5, 6)), spacing=(0.5, 0.25, 2.0), origin=(-3.0, 1.5, 10.0))
        idx = np.argwhere(np.ones(v.dims, dtype=bool))
        np.testing.assert_array_equal(world_to_index(v, index_to_world(v, idx)), idx)

    def test_world_of_voxel(self):
        v = make_volume(np.zeros((4, 5, 6)), spacing=(0.5, 0.25, 2.0), origin=(-3.0, 1.5, 10.0))
        np.testing.assert_allclose(index_to_world(v, [2, 4, 1]), [-2.0, 2.5, 12.0])


class TestMip:
    def test_two_slabs(self):
        data = np.empty((2, 2, 2))
        data[0], data[1] = 1.0, 3.0
        image = mip_x(make_volume(data))
        assert image.dims == (2, 2)
        assert np.all(image.data == 3.0)

    def test_constant(self):
        assert np.all(mip_x(make_volume(np.full((3, 4, 5), 2.5))).data == 2.5)

    def test_matches_per_line_max(self, rng):
        data = rng.normal(size=(8, 8, 8)).astype(np.float32)
        image = mip_x(make_volume(data))
        for j in range(8):
            for k in range(8):
                assert image.data[j, k] == max(data[i, j, k] for i in range(8))

    @given(small_grids)
    def test_dominates_every_slice(self, data):
        image = mip_x(make_volume(data))
        assert all(np.all(image.data >= data[i]) for i in range(data.shape[0]))


class TestNormalize:
    def test_two_values(self):
        out = normalize01(make_volume(np.array([2.0, 4.0]).reshape(2, 1, 1)))
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 1.0])

    def test_constant_gives_zeros(self):
        out = normalize01(make_volume(np.full((2, 3, 4), 7.0)))
        assert np.all(out.data == 0.0)

    def test_non_finite_rejected(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            normalize01(make_volume(data))

    def test_random_preserves_order(self, rng):
        data = rng.normal(size=(5, 6, 7)).astype(np.float32)
        out = normalize01(make_volume(data)).data
        assert out.min() == 0.0 and out.max() == 1.0
        order = np.argsort(data.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order]) >= 0)

    @given(small_grids)
    def test_idempotent(self, data):
        once = normalize01(make_volume(data))
        np.testing.assert_allclose(normalize01(once).data, once.data, atol=1e-6)


class TestFlip:
    def test_single_voxel(self):
        data = np.zeros((1, 4, 1))
        data[0, 0, 0] = 1.0
        out = flip_y(make_volume(data))
        assert out.data[0, 3, 0] == 1.0 and out.data.sum() == 1.0

    def test_index_oracle(self, rng):
        data = rng.normal(size=(3, 5, 4)).astype(np.float32)
        out = flip_y(make_volume(data)).data
        for i, j, k in np.ndindex(*data.shape):
            assert out[i, 4 - j, k] == data[i, j, k]

    @given(small_grids)
    def test_involution(self, data):
        v = make_volume(data)
        np.testing.assert_array_equal(flip_y(flip_y(v)).data, v.data)


class TestResample:
    def test_identity_is_bit_exact(self, rng):
        v = make_volume(rng.normal(size=(6, 7, 8)), spacing=(0.5, 0.7, 1.3), origin=(1.0, -2.0, 0.5))
        out = resample(v, RigidTransform.identity(), v.dims, v.spacing)
        np.testing.assert_array_equal(out.data, v.data)
        assert out.origin == v.origin

    def test_linear_ramp_upsample(self):
        ramp = np.broadcast_to(np.arange(5.0)[:, None, None], (5, 3, 3))
        v = make_volume(ramp)
        out = resample(v, RigidTransform.identity(), (9, 3, 3), (0.5, 1.0, 1.0))
        expected = np.broadcast_to((np.arange(9) * 0.5)[:, None, None], (9, 3, 3))
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_random_rigid_matches_scalar_oracle(self, rng):
        data = rng.random(size=(8, 8, 8)).astype(np.float32)
        v = make_volume(data, spacing=(1.0, 0.8, 1.2), origin=(0.3, -0.2, 0.1))
        rotation = Rotation.random(random_state=7).as_matrix()
        xform = RigidTransform(rotation=rotation, translation=[3.5, 3.0, 4.0])
        out_dims, out_spacing, out_origin = (6, 7, 5), (0.9, 1.1, 1.0), (-2.5, -3.0, -2.0)
        out = resample(v, xform, out_dims, out_spacing, out_origin=out_origin)
        for idx in np.ndindex(*out_dims):
            world = np.asarray(out_origin) + np.asarray(idx) * np.asarray(out_spacing)
            source = (xform.apply(world) - np.asarray(v.origin)) / np.asarray(v.spacing)
            assert out.data[idx] == pytest.approx(trilinear_oracle(data, source), abs=1e-6)

    def test_outside_samples_are_zero(self):
        v = make_volume(np.ones((4, 4, 4)))
        shifted = RigidTransform(translation=[100.0, 0.0, 0.0])
        assert np.all(resample(v, shifted, v.dims, v.spacing).data == 0.0)

    def test_labels_use_nearest(self, rng):
        labels = make_labels(rng.integers(0, 4, size=(6, 6, 6)) * 11)
        xform = RigidTransform(rotation=Rotation.from_euler("x", 20, degrees=True).as_matrix(), translation=[0, 1.0, -0.5])
        out = resample(labels, xform, (7, 7, 7), (0.8, 0.8, 0.8))
        assert set(np.unique(out.data)) <= set(np.unique(labels.data))
        assert out.data.dtype == np.uint16

    def test_bad_spacing_rejected(self):
        v = make_volume(np.zeros((2, 2, 2)))
        with pytest.raises(InvalidInputError):
            resample(v, RigidTransform.identity(), (2, 2, 2), (1.0, 0.0, 1.0))


class TestCropIndices:
    def test_covers_centres_inside_box(self):
        v = make_volume(np.zeros((10, 10, 10)), spacing=(0.5, 0.5, 0.5))
        window = crop_indices(v, Box3(min_mm=(0.9, 1.0, 0.0), max_mm=(2.1, 2.0, 0.4)))
        assert window == (slice(2, 5), slice(2, 5), slice(0, 1))

    def test_outside_is_none(self):
        v = make_volume(np.zeros((4, 4, 4)))
        assert crop_indices(v, Box3(min_mm=(10, 10, 10), max_mm=(12, 12, 12))) is None


def test_volume_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        Volume(dims=(2, 2, 2), data=np.zeros((2, 2, 3)))
