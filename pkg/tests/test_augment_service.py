import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import make_labels, make_volume
from models.errors import InvalidInputError
from models.schemas import AffineSpec, BinaryMask, Box3, CutoutSpec, PhantomSpec
from services.augment_service import (
    CROP_DIMS, crop_transform, cutout, cutout_side_range, draw_affine, random_affine,
    standardize_crop, standardize_labels,
)
from services.phantom_service import PhantomGenerator, tooth_volume_mm3
from services.volume_service import normalize01


class TestCutout:
    def test_probability_zero_is_noop(self, rng):
        v = make_volume(rng.random((16, 16, 16)))
        out, region = cutout(v, CutoutSpec(probability=0.0), seed=5)
        assert region is None
        np.testing.assert_array_equal(out.data, v.data)

    def test_side_bounds_for_64(self):
        assert cutout_side_range(64, CutoutSpec()) == (13, 16)
        assert cutout_side_range(128, CutoutSpec()) == (26, 32)

    @pytest.mark.parametrize("seed", range(20))
    def test_sides_in_range_and_only_region_changes(self, seed):
        v = make_volume(np.ones(CROP_DIMS))
        out, region = cutout(v, CutoutSpec(probability=1.0), seed=seed)
        assert 13 <= region.sides[0] <= 16 and 13 <= region.sides[1] <= 16
        assert 26 <= region.sides[2] <= 32

        inside = np.zeros(CROP_DIMS, dtype=bool)
        inside[tuple(slice(a, b) for a, b in zip(region.lo, region.hi))] = True
        changed = out.data != v.data
        np.testing.assert_array_equal(changed, inside)
        assert region.voxel_count <= int(np.prod(region.sides))

    def test_interior_mask_zeroes_full_box(self):
        v = make_volume(np.ones(CROP_DIMS))
        for seed in range(200):
            out, region = cutout(v, CutoutSpec(probability=1.0), seed=seed)
            if tuple(np.subtract(region.hi, region.lo)) == region.sides:
                break
        else:
            pytest.fail("no interior cutout in 200 seeds")
        assert int(np.sum(out.data == 0.0)) == int(np.prod(region.sides))

    def test_deterministic(self, rng):
        v = make_volume(rng.random((20, 20, 20)))
        a, ra = cutout(v, CutoutSpec(probability=1.0), seed=9)
        b, rb = cutout(v, CutoutSpec(probability=1.0), seed=9)
        assert ra == rb
        np.testing.assert_array_equal(a.data, b.data)

    def test_fill_value(self):
        v = make_volume(np.ones((10, 10, 10)))
        out, _ = cutout(v, CutoutSpec(probability=1.0, fill=-1.0), seed=2)
        assert set(np.unique(out.data)) == {-1.0, 1.0}

    def test_fractions_validated(self):
        with pytest.raises(ValueError):
            CutoutSpec(lo_frac=0.3, hi_frac=0.2)

    @pytest.mark.parametrize("fracs", [(0.2, 1.0), (1.0, 1.0)])
    def test_full_side_fraction_rejected(self, fracs):
        with pytest.raises(ValueError):
            CutoutSpec(lo_frac=fracs[0], hi_frac=fracs[1])


def blob_scene(center, shape=(32, 32, 32), sigma=2.5):
    grid = np.indices(shape).astype(float)
    r2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
    return make_volume(np.exp(-r2 / (2 * sigma ** 2))), BinaryMask(data=(r2 <= 16.0).astype(np.uint8))


class TestRandomAffine:
    def test_probability_zero_is_identity(self, rng):
        v = make_volume(rng.random((8, 8, 8)))
        out, labels = random_affine(v, None, AffineSpec(probability=0.0), seed=1)
        assert out is v and labels is None

    def test_zero_magnitudes_are_exact_identity(self, rng):
        v = make_volume(rng.random((8, 9, 10)))
        mask = BinaryMask(data=(rng.random((8, 9, 10)) > 0.5).astype(np.uint8))
        spec = AffineSpec(probability=1.0, max_rotate_deg=0.0, max_scale_frac=0.0, max_translate_frac=0.0)
        out, out_mask = random_affine(v, mask, spec, seed=4)
        np.testing.assert_array_equal(out.data, v.data)
        np.testing.assert_array_equal(out_mask.data, mask.data)

    def test_same_seed_same_output(self, rng):
        v = make_volume(rng.random((12, 12, 12)))
        spec = AffineSpec(probability=1.0)
        a, _ = random_affine(v, None, spec, seed=11)
        b, _ = random_affine(v, None, spec, seed=11)
        np.testing.assert_array_equal(a.data, b.data)

    def test_mask_follows_intensities(self):
        v, mask = blob_scene((13.0, 17.0, 15.0))
        spec = AffineSpec(probability=1.0, max_rotate_deg=20.0, max_scale_frac=0.1, max_translate_frac=0.05)
        seed = 21
        out_v, out_mask = random_affine(v, mask, spec, seed=seed)

        weights = out_v.data.astype(float)
        grid = np.indices(v.dims).reshape(3, -1)
        blob_centroid = (grid * weights.ravel()).sum(axis=1) / weights.sum()
        mask_centroid = np.argwhere(out_mask.data).mean(axis=0)
        np.testing.assert_allclose(mask_centroid, blob_centroid, atol=1.0)

        draw = draw_affine(v, spec, seed)
        rot = Rotation.from_euler("xyz", draw.rotate_deg, degrees=True).as_matrix()
        center = 0.5 * v.extent_mm
        expected = center + draw.scale * rot @ (np.array([13.0, 17.0, 15.0]) - center) + draw.translate_mm
        np.testing.assert_allclose(blob_centroid, expected, atol=1.0)

    def test_label_grid_must_match(self, rng):
        v = make_volume(rng.random((4, 4, 4)))
        mask = BinaryMask(data=np.zeros((4, 4, 5), dtype=np.uint8))
        with pytest.raises(InvalidInputError):
            random_affine(v, mask, AffineSpec(), seed=0)


class TestStandardizeCrop:
    def test_native_region_is_identity_then_normalised(self, rng):
        v = make_volume(rng.random((70, 70, 140)))
        box = Box3(min_mm=(2.0, 3.0, 4.0), max_mm=(65.0, 66.0, 131.0))
        out = standardize_crop(v, box)
        expected = normalize01(make_volume(v.data[2:66, 3:67, 4:132])).data
        assert out.dims == CROP_DIMS
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    @pytest.mark.parametrize("size", [(4.0, 6.0, 11.0), (12.0, 5.0, 7.0), (3.0, 9.0, 2.0)])
    def test_output_dims_and_long_axis(self, rng, size):
        v = make_volume(rng.random((20, 20, 20)))
        box = Box3(min_mm=(1.0, 1.0, 1.0), max_mm=tuple(1.0 + s for s in size))
        out = standardize_crop(v, box)
        assert out.dims == CROP_DIMS
        xform, spacing = crop_transform(box)
        assert spacing[2] == pytest.approx(max(size) / 127)
        np.testing.assert_allclose(xform.translation, box.lo)
        assert np.linalg.det(xform.rotation) == pytest.approx(1.0)

    def test_disjoint_box_rejected(self, rng):
        v = make_volume(rng.random((8, 8, 8)))
        with pytest.raises(InvalidInputError):
            standardize_crop(v, Box3(min_mm=(50, 50, 50), max_mm=(60, 60, 60)))

    def test_labels_crop_binary_for_tooth(self):
        data = np.zeros((10, 10, 20))
        data[3:7, 3:7, 2:18] = 31
        labels = make_labels(data)
        box = Box3(min_mm=(2.5, 2.5, 1.5), max_mm=(6.5, 6.5, 17.5))
        mask = standardize_labels(labels, box, tooth_id=31)
        assert isinstance(mask, BinaryMask)
        assert mask.dims == CROP_DIMS and mask.data.any()
        assert set(np.unique(standardize_labels(labels, box).data)) <= {0, 31}

    def test_phantom_tooth_fraction_matches_analytic_volume(self):
        generator = PhantomGenerator(PhantomSpec(noise_sigma=0.0))
        truth = generator.generate()
        shapes = {t.tooth_id: t for t in generator.teeth}
        for box in truth.boxes[:6]:
            mask = standardize_labels(truth.labels, box, tooth_id=box.tooth_id)
            fraction = float(mask.data.mean())
            expected = tooth_volume_mm3(shapes[box.tooth_id]) / box.volume
            assert fraction == pytest.approx(expected, rel=0.1), box.tooth_id
