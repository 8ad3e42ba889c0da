import json

import numpy as np
import pytest

from conftest import make_labels, make_volume
from models.errors import InvalidInputError
from models.schemas import (
    BinaryMask, Box3, DistanceMap, Image2D, Jaw, LabelMap, PoseEstimate, RigidTransform,
    ToothGroup, VoiFrame, Volume,
)
from services.storage_service import StorageService
from services.tsnet_service import init_tsnet


@pytest.fixture
def storage(tmp_path):
    return StorageService(tmp_path)


class TestGridContainers:
    def test_volume_round_trip_is_bit_exact(self, storage, rng):
        v = make_volume(rng.normal(size=(5, 6, 7)), spacing=(0.5, 0.25, 1.0), origin=(1.0, -2.0, 3.5))
        header = storage.write_grid("vol", v)
        assert header.suffix == ".json" and header.with_suffix(".raw").is_file()
        back = storage.read_grid(header, expect=Volume)
        assert isinstance(back, Volume)
        assert back.dims == v.dims and back.spacing == v.spacing and back.origin == v.origin
        np.testing.assert_array_equal(back.data, v.data)

    def test_payload_is_x_fastest(self, storage):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        header = storage.write_grid("ramp", make_volume(data))
        flat = np.fromfile(header.with_suffix(".raw"), dtype="<f4")
        np.testing.assert_array_equal(flat[:3], [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]])

    @pytest.mark.parametrize("cls", [LabelMap, BinaryMask, DistanceMap])
    def test_kinds_round_trip(self, storage, rng, cls):
        data = rng.integers(0, 2, size=(4, 4, 4))
        grid = cls(data=data)
        back = storage.read_grid(storage.write_grid(cls.__name__, grid))
        assert type(back) is cls
        np.testing.assert_array_equal(back.data, grid.data)

    def test_image_round_trip(self, storage, rng):
        image = Image2D(data=rng.random((6, 5)).astype(np.float32), spacing=(0.5, 0.5))
        back = storage.read_grid(storage.write_grid("mip", image))
        assert isinstance(back, Image2D) and back.dims == (6, 5)
        np.testing.assert_array_equal(back.data, image.data)

    def test_header_validated_before_payload(self, storage, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"dims": [2, 2], "dtype": "f64"}))
        with pytest.raises(InvalidInputError, match="header"):
            storage.read_grid(tmp_path / "bad.json")

    def test_payload_size_mismatch(self, storage, rng):
        header = storage.write_grid("vol", make_volume(rng.random((3, 3, 3))))
        header.with_suffix(".raw").write_bytes(b"\x00" * 8)
        with pytest.raises(InvalidInputError, match="bytes"):
            storage.read_grid(header)

    def test_missing_payload(self, storage, rng):
        header = storage.write_grid("vol", make_volume(rng.random((3, 3, 3))))
        header.with_suffix(".raw").unlink()
        with pytest.raises(InvalidInputError):
            storage.read_grid(header)

    def test_wrong_kind_rejected(self, storage):
        header = storage.write_grid("labels", make_labels(np.zeros((2, 2, 2))))
        with pytest.raises(InvalidInputError):
            storage.read_grid(header, expect=Volume)

    def test_missing_file(self, storage, tmp_path):
        with pytest.raises(InvalidInputError, match="not found"):
            storage.read_grid(tmp_path / "nope.json")


class TestDocuments:
    def test_boxes_round_trip(self, storage):
        boxes = [
            Box3(min_mm=(0, 0, 0), max_mm=(1, 2, 3), tooth_id=11, group=ToothGroup.METAL, score=0.9),
            Box3(min_mm=(5, 5, 5), max_mm=(6, 7, 8)),
        ]
        path = storage.write_boxes("boxes.json", boxes, {"ap50": 1.0})
        assert storage.read_boxes(path) == boxes
        assert json.loads(path.read_text())["ap50"] == 1.0

    def test_malformed_box(self, storage, tmp_path):
        path = tmp_path / "boxes.json"
        path.write_text(json.dumps({"boxes": [{"min_mm": [1, 1, 1], "max_mm": [0, 2, 2]}]}))
        with pytest.raises(InvalidInputError):
            storage.read_boxes(path)

    def test_poses_round_trip(self, storage):
        poses = {
            Jaw.UPPER: PoseEstimate(point=(40.0, 55.5), angle_deg=12.0, jaw=Jaw.UPPER),
            Jaw.LOWER: PoseEstimate(point=(30.0, 55.5), angle_deg=-3.0, jaw=Jaw.LOWER),
        }
        path = storage.write_poses("poses.json", poses)
        assert json.loads(path.read_text())["upper"]["point_px"] == [40.0, 55.5]
        assert storage.read_poses(path) == poses

    def test_pose_under_wrong_key(self, storage, tmp_path):
        path = tmp_path / "poses.json"
        path.write_text(json.dumps({"upper": {"jaw": "lower", "point_px": [1, 2], "angle_deg": 0}}))
        with pytest.raises(InvalidInputError):
            storage.read_poses(path)

    def test_transforms_round_trip(self, storage):
        rotation = np.array([[1.0, 0, 0], [0, 0.6, -0.8], [0, 0.8, 0.6]])
        frames = {
            Jaw.LOWER: VoiFrame(
                jaw=Jaw.LOWER, transform=RigidTransform(rotation=rotation, translation=[1.0, 2.0, 3.0]),
                dims=(10, 20, 30), spacing=(0.5, 0.5, 0.5), flipped=True,
            ),
        }
        back = storage.read_transforms(storage.write_transforms("xf.json", frames))
        frame = back[Jaw.LOWER]
        np.testing.assert_allclose(frame.transform.rotation, rotation)
        np.testing.assert_allclose(frame.transform.translation, [1.0, 2.0, 3.0])
        assert frame.dims == (10, 20, 30) and frame.flipped

    def test_invalid_json(self, storage, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(InvalidInputError, match="JSON"):
            storage.read_json(path)


class TestCheckpoints:
    def test_round_trip(self, storage):
        params = init_tsnet((4, 8, 16, 32), 4, seed=3)
        loaded = storage.load_checkpoint(storage.save_checkpoint("ckpt", params))
        assert loaded.widths == params.widths and loaded.groups == params.groups
        for (name, a), b in zip(params.state_dict().items(), loaded.state_dict().values()):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_truncated_payload(self, storage):
        header = storage.save_checkpoint("ckpt", init_tsnet((4, 8, 16, 32), 4))
        raw = header.with_suffix(".raw")
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(InvalidInputError):
            storage.load_checkpoint(header)
