import json
import struct

import numpy as np
import pytest

from scisplat.core import Intrinsics, Pose, look_at
from scisplat.errors import FileFormatError
from scisplat.gaussians import GaussianCloud
from scisplat.init_protocol import SparsePoints
from scisplat.io import (
    Manifest,
    config_hash,
    load_manifest,
    quantize,
    read_checkpoint,
    read_cloud,
    read_points,
    read_poses,
    read_tensor,
    write_checkpoint,
    write_cloud,
    write_manifest,
    write_points,
    write_poses,
    write_tensor,
)


def some_cloud(n=5, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    return GaussianCloud.from_attributes(
        rng.normal(size=(n, 3)), rng.uniform(0.01, 0.3, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
        rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, (n, 3)),
    )


class TestTensor:
    @pytest.mark.parametrize("shape", [(3,), (4, 5), (2, 3, 4, 3), (0, 3)])
    def test_round_trip_is_float32_exact(self, tmp_path, shape):
        a = np.random.default_rng(0).normal(size=shape)
        write_tensor(tmp_path / "a.scit", a)
        b = read_tensor(tmp_path / "a.scit")
        assert b.dtype == np.float64 and b.shape == shape
        np.testing.assert_array_equal(b, quantize(a))

    def test_layout(self, tmp_path):
        write_tensor(tmp_path / "a.scit", np.array([[1.0, 2.0]]))
        raw = (tmp_path / "a.scit").read_bytes()
        assert raw[:4] == b"SCIT"
        assert struct.unpack("<IIII", raw[4:20]) == (1, 2, 1, 2)
        assert struct.unpack("<2f", raw[20:]) == (1.0, 2.0)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.scit").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FileFormatError):
            read_tensor(tmp_path / "a.scit")

    def test_truncated(self, tmp_path):
        write_tensor(tmp_path / "a.scit", np.zeros((4, 4)))
        raw = (tmp_path / "a.scit").read_bytes()
        (tmp_path / "a.scit").write_bytes(raw[:-4])
        with pytest.raises(FileFormatError):
            read_tensor(tmp_path / "a.scit")

    def test_wrong_version(self, tmp_path):
        (tmp_path / "a.scit").write_bytes(b"SCIT" + struct.pack("<III", 2, 1, 0))
        with pytest.raises(FileFormatError):
            read_tensor(tmp_path / "a.scit")


class TestPoses:
    def test_round_trip(self, tmp_path):
        poses = [look_at([0.1 * i, 0.2, -3.0], [0.0, 0.0, 0.0]) for i in range(4)]
        write_poses(tmp_path / "p.json", poses)
        back = read_poses(tmp_path / "p.json")
        for a, b in zip(poses, back):
            assert a.allclose(b, atol=1e-15)

    def test_sorted_by_frame_index(self, tmp_path):
        entries = [
            {"frame_index": 1, "rotation": np.eye(3).ravel().tolist(), "translation": [1, 0, 0]},
            {"frame_index": 0, "rotation": np.eye(3).ravel().tolist(), "translation": [0, 0, 0]},
        ]
        (tmp_path / "p.json").write_text(json.dumps(entries))
        back = read_poses(tmp_path / "p.json")
        assert back[1].translation[0] == 1

    def test_near_rotation_is_reprojected(self, tmp_path):
        rot = np.eye(3) + 1e-5
        entries = [{"frame_index": 0, "rotation": rot.ravel().tolist(), "translation": [0, 0, 0]}]
        (tmp_path / "p.json").write_text(json.dumps(entries))
        assert read_poses(tmp_path / "p.json")[0].is_valid()

    @pytest.mark.parametrize(
        "entries",
        [
            [],
            [{"frame_index": 0, "rotation": [1, 0, 0], "translation": [0, 0, 0]}],
            [{"frame_index": 0, "rotation": np.diag([1, 1, -1]).ravel().tolist(), "translation": [0, 0, 0]}],
            [{"frame_index": 0, "translation": [0, 0, 0]}],
            [{"frame_index": 0, "rotation": np.eye(3).ravel().tolist(), "translation": [0, 0, 0]}] * 2,
        ],
    )
    def test_invalid(self, tmp_path, entries):
        (tmp_path / "p.json").write_text(json.dumps(entries))
        with pytest.raises(FileFormatError):
            read_poses(tmp_path / "p.json")

    def test_not_json(self, tmp_path):
        (tmp_path / "p.json").write_text("{")
        with pytest.raises(FileFormatError):
            read_poses(tmp_path / "p.json")


class TestPoints:
    def test_round_trip(self, tmp_path):
        pts = SparsePoints(np.random.default_rng(0).normal(size=(6, 3)), np.full((6, 3), 0.5))
        write_points(tmp_path / "q.json", pts)
        back = read_points(tmp_path / "q.json")
        np.testing.assert_array_equal(back.positions, pts.positions)
        np.testing.assert_array_equal(back.colors, pts.colors)

    def test_without_colors(self, tmp_path):
        write_points(tmp_path / "q.json", SparsePoints(np.zeros((2, 3))))
        assert read_points(tmp_path / "q.json").colors is None

    def test_mixed_colors_rejected(self, tmp_path):
        (tmp_path / "q.json").write_text(json.dumps([{"xyz": [0, 0, 0], "rgb": [1, 1, 1]}, {"xyz": [1, 0, 0]}]))
        with pytest.raises(FileFormatError):
            read_points(tmp_path / "q.json")

    def test_color_range(self, tmp_path):
        (tmp_path / "q.json").write_text(json.dumps([{"xyz": [0, 0, 0], "rgb": [2, 1, 1]}]))
        with pytest.raises(FileFormatError):
            read_points(tmp_path / "q.json")


def test_cloud_round_trip(tmp_path):
    cloud = some_cloud()
    write_cloud(tmp_path / "c.scit", cloud)
    back = read_cloud(tmp_path / "c.scit")
    np.testing.assert_allclose(back.means, cloud.means, rtol=1e-7)
    np.testing.assert_allclose(back.colors, cloud.colors, atol=1e-6)
    assert back.is_valid()


def test_checkpoint_round_trip(tmp_path):
    cloud = some_cloud(7)
    poses = [look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0]), Pose.identity()]
    k = Intrinsics(50.0, 50.0, 32.0, 32.0)
    write_checkpoint(tmp_path / "ck", cloud, poses, k, {"iteration": 12, "seed": 3})
    c2, p2, k2, header = read_checkpoint(tmp_path / "ck")
    assert len(c2) == 7 and k2 == k
    assert header["iteration"] == 12 and header["n_gaussians"] == 7
    np.testing.assert_allclose(c2.opacities, cloud.opacities, atol=1e-6)
    assert p2[0].allclose(poses[0], atol=1e-12)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileFormatError):
        read_checkpoint(tmp_path)


def make_dataset(root, h=8, w=6, cr=4, mask_shape=None):
    write_tensor(root / "y.scit", np.zeros((h, w, 3)))
    write_tensor(root / "m.scit", np.zeros(mask_shape or (cr, h, w)))
    man = Manifest("y.scit", "m.scit", {"fx": 10.0, "fy": 10.0, "cx": 3.0, "cy": 4.0}, h, w, cr, 0.25)
    write_manifest(root, man)
    return man


class TestManifest:
    def test_round_trip(self, tmp_path):
        man = make_dataset(tmp_path)
        loaded, root = load_manifest(tmp_path)
        assert loaded == man and root == tmp_path
        assert loaded.get_intrinsics() == Intrinsics(10.0, 10.0, 3.0, 4.0)

    def test_shape_disagreement(self, tmp_path):
        make_dataset(tmp_path, mask_shape=(3, 8, 6))
        with pytest.raises(FileFormatError):
            load_manifest(tmp_path)

    def test_missing_reference(self, tmp_path):
        make_dataset(tmp_path)
        (tmp_path / "m.scit").unlink()
        with pytest.raises(FileFormatError):
            load_manifest(tmp_path / "manifest.json")

    def test_wrong_version(self, tmp_path):
        make_dataset(tmp_path)
        data = json.loads((tmp_path / "manifest.json").read_text())
        data["format_version"] = 9
        (tmp_path / "manifest.json").write_text(json.dumps(data))
        with pytest.raises(FileFormatError):
            load_manifest(tmp_path)

    def test_unknown_field(self, tmp_path):
        make_dataset(tmp_path)
        data = json.loads((tmp_path / "manifest.json").read_text())
        data["bogus"] = 1
        (tmp_path / "manifest.json").write_text(json.dumps(data))
        with pytest.raises(FileFormatError):
            load_manifest(tmp_path)


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
