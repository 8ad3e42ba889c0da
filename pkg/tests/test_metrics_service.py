import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage
from scipy.spatial.distance import cdist

from conftest import make_labels
from models.errors import InvalidInputError
from models.schemas import BinaryMask, ConfusionCounts, ToothGroup
from services.metrics_service import (
    aji, assd, confusion, f1, hausdorff, per_instance_report, surface_points,
)


def mask_of(data, spacing=(1.0, 1.0, 1.0)) -> BinaryMask:
    return BinaryMask(spacing=spacing, data=np.asarray(data, dtype=np.uint8))


def brute_surface(mask, spacing):
    padded = np.pad(mask.astype(bool), 1)
    eroded = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1))
    return (np.argwhere(padded & ~eroded) - 1) * np.asarray(spacing)


def brute_distances(a, b, spacing):
    d = cdist(brute_surface(a, spacing), brute_surface(b, spacing))
    return d.min(axis=1), d.min(axis=0)


def random_blob(rng, shape=(14, 14, 14)):
    blob = ndimage.binary_dilation(rng.random(shape) < 0.02, iterations=2)
    blob[7, 7, 7] = True
    return blob


def box_scene(rng, cells=2, cell=9):
    """One box per cell, at least two voxels off the cell walls."""
    data = np.zeros((cells * cell,) * 3, dtype=np.uint16)
    for label, corner in enumerate(np.ndindex(cells, cells, cells), start=1):
        ext = rng.integers(2, 5, size=3)
        lo = np.asarray(corner) * cell + 2 + np.array([rng.integers(0, 6 - e) for e in ext])
        data[tuple(slice(a, a + e) for a, e in zip(lo, ext))] = label
    return data


def jittered(rng, data):
    """Every instance shifted by up to a voxel, one dropped, one stray prediction added."""
    labels = [int(lab) for lab in np.unique(data) if lab]
    dropped = rng.choice(labels)
    pred = np.zeros_like(data)
    for lab in labels:
        if lab != dropped:
            pred[np.roll(data == lab, rng.integers(-1, 2, size=3), axis=(0, 1, 2))] = lab
    pred[0, 0, 0] = max(labels) + 1
    return pred


label_grids = arrays(np.uint16, (5, 5, 5), elements=st.integers(0, 3))


class TestVoxelF1:
    def test_worked_example(self):
        scores = f1(ConfusionCounts(tp=6, fp=2, fn=3))
        assert scores.precision == pytest.approx(0.75)
        assert scores.sensitivity == pytest.approx(2 / 3)
        assert scores.f1 == pytest.approx(0.7059, abs=1e-4)

    def test_confusion_counts(self):
        gt = np.zeros((4, 4, 4), dtype=bool)
        pred = np.zeros_like(gt)
        gt[:2] = True
        pred[1:3] = True
        assert confusion(gt, pred) == ConfusionCounts(tp=16, fp=16, fn=16)

    def test_identical_masks(self, rng):
        gt = rng.random((6, 6, 6)) > 0.5
        assert f1(confusion(gt, gt)).f1 == pytest.approx(1.0)

    @pytest.mark.parametrize("counts", [ConfusionCounts(tp=0, fp=0, fn=4), ConfusionCounts(tp=0, fp=3, fn=0)])
    def test_undefined(self, counts):
        with pytest.raises(InvalidInputError):
            f1(counts)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestAji:
    def test_identical_with_renumbered_ids(self):
        data = np.zeros((8, 8, 8))
        data[1:3, 1:3, 1:3] = 11
        data[5:7, 5:7, 5:7] = 21
        renumbered = np.where(data == 11, 3, np.where(data == 21, 9, 0))
        assert aji(make_labels(data), make_labels(renumbered)) == pytest.approx(1.0)

    def test_partial_overlap(self):
        gt = np.zeros((6, 6, 6))
        pred = np.zeros((6, 6, 6))
        gt[0:2, 0:2, 0:2] = 1
        pred[1:3, 0:2, 0:2] = 1
        assert aji(make_labels(gt), make_labels(pred)) == pytest.approx(4 / 12)

    def test_unmatched_prediction_inflates_union(self):
        gt = np.zeros((6, 6, 6))
        gt[0:2, 0:2, 0:2] = 1
        pred = gt.copy()
        pred[4:6, 4:6, 4:6] = 2
        assert aji(make_labels(gt), make_labels(pred)) == pytest.approx(0.5)

    def test_missed_instance(self):
        gt = np.zeros((6, 6, 6))
        gt[0:2, 0:2, 0:2] = 1
        gt[4:6, 4:6, 4:6] = 2
        pred = np.where(gt == 1, 1, 0)
        assert aji(make_labels(gt), make_labels(pred)) == pytest.approx(0.5)

    def test_both_empty(self):
        empty = make_labels(np.zeros((3, 3, 3)))
        assert aji(empty, empty) == 1.0

    def test_geometry_must_match(self):
        with pytest.raises(InvalidInputError):
            aji(make_labels(np.zeros((3, 3, 3))), make_labels(np.zeros((3, 3, 3)), spacing=(0.5, 0.5, 0.5)))


class TestSurfaceDistances:
    def test_surface_of_cube(self):
        assert len(surface_points(np.ones((3, 3, 3)))) == 26
        single = np.zeros((5, 5, 5))
        single[1, 2, 3] = 1
        np.testing.assert_allclose(surface_points(single, (0.5, 1.0, 2.0)), [[0.5, 2.0, 6.0]])

    def test_identical_masks_are_zero(self, rng):
        blob = mask_of(random_blob(rng))
        assert hausdorff(blob, blob) == 0.0
        assert assd(blob, blob) == 0.0

    def test_shifted_cube(self):
        a = np.zeros((10, 10, 10))
        b = np.zeros((10, 10, 10))
        a[2:6, 2:6, 2:6] = 1
        b[3:7, 2:6, 2:6] = 1
        assert hausdorff(mask_of(a), mask_of(b)) == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        spacing = (0.4, 0.5, 0.6)
        a, b = random_blob(rng), random_blob(rng)
        ab, ba = brute_distances(a, b, spacing)
        hd = hausdorff(mask_of(a, spacing), mask_of(b, spacing))
        mean = assd(mask_of(a, spacing), mask_of(b, spacing))
        assert hd == pytest.approx(max(ab.max(), ba.max()), abs=1e-9)
        assert mean == pytest.approx((ab.sum() + ba.sum()) / (len(ab) + len(ba)), abs=1e-9)

    def test_symmetric(self, rng):
        a, b = mask_of(random_blob(rng)), mask_of(random_blob(rng))
        assert hausdorff(a, b) == pytest.approx(hausdorff(b, a))
        assert assd(a, b) == pytest.approx(assd(b, a))

    def test_empty_rejected(self):
        empty = mask_of(np.zeros((3, 3, 3)))
        full = mask_of(np.ones((3, 3, 3)))
        with pytest.raises(InvalidInputError):
            hausdorff(empty, full)


class TestPerInstanceReport:
    @pytest.fixture
    def scene(self):
        data = np.zeros((12, 12, 12))
        data[1:4, 1:4, 1:4] = 11
        data[7:10, 7:10, 7:10] = 21
        return make_labels(data)

    def test_identical_prediction(self, scene):
        frame, report = per_instance_report(scene, scene)
        assert list(frame["instance"]) == [11, 21]
        assert np.all(frame["f1"] == 1.0)
        assert np.all(frame["hd_mm"] == 0.0)
        assert report.aggregate.aji == pytest.approx(1.0)
        assert report.aggregate.f1.mean == pytest.approx(1.0)
        assert report.integrated_hd_mm == 0.0 and report.integrated_assd_mm == 0.0

    def test_missing_instance_scores_zero(self, scene):
        pred = make_labels(np.where(scene.data == 11, 11, 0))
        frame, report = per_instance_report(scene, pred)
        row = frame.set_index("instance").loc[21]
        assert row["f1"] == 0.0 and np.isnan(row["hd_mm"]) and pd.isna(row["matched"])
        assert report.aggregate.f1.mean == pytest.approx(0.5)
        assert report.aggregate.f1.std == pytest.approx(0.5)
        assert report.aggregate.hd_mm.mean == 0.0

    def test_group_breakdown(self, scene):
        groups = {11: ToothGroup.ONE_ROOTED, 21: ToothGroup.OTHERS}
        _, report = per_instance_report(scene, scene, groups)
        assert set(report.by_group) == {"one_rooted", "others"}
        assert report.by_group["others"]["f1"].mean == pytest.approx(1.0)

    def test_phantom_against_itself(self, phantom):
        frame, report = per_instance_report(phantom.labels, phantom.labels)
        assert len(frame) == len(phantom.tooth_ids)
        assert report.aggregate.aji == pytest.approx(1.0)


class TestMetricProperties:
    @given(label_grids, label_grids)
    def test_aji_bounded_by_pooled_jaccard(self, gt, pred):
        union = np.count_nonzero((gt > 0) | (pred > 0))
        pooled = np.count_nonzero((gt > 0) & (pred > 0)) / union if union else 1.0
        assert 0.0 <= aji(make_labels(gt), make_labels(pred)) <= pooled + 1e-12

    @given(label_grids, label_grids)
    def test_monotone_relabel_keeps_aji(self, gt, pred):
        lut = np.array([0, 5, 17, 40], dtype=np.uint16)
        expected = aji(make_labels(gt), make_labels(pred))
        assert aji(make_labels(lut[gt]), make_labels(lut[pred])) == pytest.approx(expected)

    @given(label_grids, label_grids)
    def test_hausdorff_bounds_assd(self, a, b):
        assume(a.any() and b.any())
        spacing = (0.4, 0.5, 0.6)
        hd = hausdorff(mask_of(a > 0, spacing), mask_of(b > 0, spacing))
        mean = assd(mask_of(a > 0, spacing), mask_of(b > 0, spacing))
        assert hd >= mean - 1e-12
        assert mean >= 0.0

    @pytest.mark.parametrize("seed", range(4))
    def test_same_relabel_of_both_maps(self, seed):
        rng = np.random.default_rng(seed)
        gt = box_scene(rng)
        pred = jittered(rng, gt)
        lut = np.zeros(int(pred.max()) + 1, dtype=np.uint16)
        lut[1:] = 100 + rng.permutation(len(lut) - 1)
        frame, report = per_instance_report(make_labels(gt), make_labels(pred))
        frame_r, report_r = per_instance_report(make_labels(lut[gt]), make_labels(lut[pred]))

        assert report_r.aggregate.aji == pytest.approx(report.aggregate.aji)
        for col in ("f1", "hd_mm", "assd_mm"):
            before = frame.assign(instance=lut[frame["instance"].to_numpy()]).set_index("instance")[col]
            after = frame_r.set_index("instance")[col]
            np.testing.assert_allclose(after.sort_index(), before.sort_index())
            assert getattr(report_r.aggregate, col).mean == pytest.approx(getattr(report.aggregate, col).mean)
        assert report_r.integrated_hd_mm == pytest.approx(report.integrated_hd_mm)

    @pytest.mark.parametrize("seed", range(4))
    def test_one_voxel_dilation(self, seed):
        rng = np.random.default_rng(seed)
        spacing = tuple(rng.uniform(0.3, 1.0, size=3))
        gt = box_scene(rng)
        pred = ndimage.grey_dilation(gt, footprint=ndimage.generate_binary_structure(3, 1))
        frame, _ = per_instance_report(make_labels(gt, spacing), make_labels(pred, spacing))
        diagonal = float(np.linalg.norm(spacing))
        assert frame["matched"].notna().all()
        assert ((frame["assd_mm"] >= 0.0) & (frame["assd_mm"] <= diagonal)).all()
        assert (frame["hd_mm"] <= max(spacing) + 1e-9).all()
