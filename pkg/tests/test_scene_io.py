import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import K100, random_camera
from mvspl.fusion_render import PointCloud, TriangleMesh
from mvspl.geometry import Camera, DepthMap
from mvspl.scene_io import (Config, FormatError, ValidationError, SceneManifest, area_downsample,
                            format_config, load_camera, load_config, load_depth_pfm, load_mesh_ply,
                            load_pair_file, load_pfm, load_ply, load_pointcloud_ply, load_scene,
                            parse_config_value, save_camera, save_config, save_depth_pfm,
                            save_mesh_ply, save_pair_file, save_pfm, save_pointcloud_ply,
                            save_scene)

IDENTITY_CAM = """extrinsic
1 0 0 0
0 1 0 0
0 0 1 0
0 0 0 1

intrinsic
100 0 50
0 100 50
0 0 1

2.0 0.05
"""


class TestCamera:
    def test_identity_file(self, tmp_path):
        p = tmp_path / "cam.txt"
        p.write_text(IDENTITY_CAM)
        cam = load_camera(p)
        np.testing.assert_array_equal(cam.R, np.eye(3))
        np.testing.assert_array_equal(cam.t, 0)
        np.testing.assert_array_equal(cam.K, K100)
        assert cam.d_min == 2.0
        # two-number range: d_max = d_min + interval * 191
        assert cam.d_max == pytest.approx(2.0 + 0.05 * 191)

    def test_three_by_three_extrinsic(self, tmp_path):
        lines = IDENTITY_CAM.splitlines()
        bad = [lines[0]] + [" ".join(r.split()[:3]) for r in lines[1:4]] + lines[5:]
        p = tmp_path / "cam.txt"
        p.write_text("\n".join(bad))
        with pytest.raises(FormatError, match=":2:"):
            load_camera(p)

    def test_non_orthonormal(self, tmp_path):
        p = tmp_path / "cam.txt"
        p.write_text(IDENTITY_CAM.replace("1 0 0 0", "1.1 0 0 0", 1))
        with pytest.raises(ValidationError):
            load_camera(p)

    def test_missing_word(self, tmp_path):
        p = tmp_path / "cam.txt"
        p.write_text(IDENTITY_CAM.replace("intrinsic", "intrinsics"))
        with pytest.raises(FormatError, match="intrinsic"):
            load_camera(p)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, tmp_path_factory, seed):
        cam = random_camera(np.random.default_rng(seed))
        p = tmp_path_factory.mktemp("cam") / "c.txt"
        save_camera(cam, p)
        back = load_camera(p)
        for a, b in ((cam.K, back.K), (cam.R, back.R), (cam.t, back.t)):
            np.testing.assert_allclose(b, a, atol=1e-9, rtol=0)
        assert back.d_min == pytest.approx(cam.d_min, abs=1e-9)
        assert back.d_max == pytest.approx(cam.d_max, abs=1e-9)


class TestPfm:
    def test_all_valid(self, tmp_path):
        save_pfm(np.ones((2, 2)), tmp_path / "d.pfm")
        d = load_depth_pfm(tmp_path / "d.pfm")
        assert d.mask.all()

    def test_negative_sentinel(self, tmp_path):
        save_pfm(np.array([[1.0, -1.0], [2.0, 3.0]]), tmp_path / "d.pfm")
        d = load_depth_pfm(tmp_path / "d.pfm")
        assert d.mask.tolist() == [[True, False], [True, True]]

    def test_bad_header(self, tmp_path):
        (tmp_path / "d.pfm").write_bytes(b"P6\n2 2\n-1\n" + b"\0" * 16)
        with pytest.raises(FormatError):
            load_pfm(tmp_path / "d.pfm")

    def test_truncated(self, tmp_path):
        (tmp_path / "d.pfm").write_bytes(b"Pf\n2 2\n-1\n" + b"\0" * 12)
        with pytest.raises(FormatError, match="truncated"):
            load_pfm(tmp_path / "d.pfm")

    def test_big_endian(self, tmp_path):
        data = np.array([[1.5, 2.5]], dtype=">f4")
        (tmp_path / "d.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + data.tobytes())
        np.testing.assert_array_equal(load_pfm(tmp_path / "d.pfm"), [[1.5, 2.5]])

    def test_rows_stored_bottom_up(self, tmp_path):
        arr = np.array([[1.0], [2.0]], dtype=np.float32)
        save_pfm(arr, tmp_path / "d.pfm")
        payload = (tmp_path / "d.pfm").read_bytes()[-8:]
        assert np.frombuffer(payload, "<f4").tolist() == [2.0, 1.0]

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_round_trip_bit_exact(self, tmp_path_factory, arr):
        p = tmp_path_factory.mktemp("pfm") / "d.pfm"
        save_pfm(arr, p)
        np.testing.assert_array_equal(load_pfm(p).view(np.uint32), arr.view(np.uint32))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, (4, 5), elements=st.floats(-2, 5, width=32)))
    def test_mask_survives(self, tmp_path_factory, arr):
        p = tmp_path_factory.mktemp("pfm") / "d.pfm"
        d = DepthMap.from_array(arr)
        save_depth_pfm(d, p)
        back = load_depth_pfm(p)
        np.testing.assert_array_equal(back.mask, d.mask)
        np.testing.assert_array_equal(back.values[back.mask], d.values[d.mask])


class TestPly:
    @pytest.mark.parametrize("binary", [True, False])
    def test_empty_cloud(self, tmp_path, binary):
        save_pointcloud_ply(PointCloud(np.zeros((0, 3)), [], np.zeros((0, 2))), tmp_path / "c.ply", binary)
        assert b"element vertex 0" in (tmp_path / "c.ply").read_bytes()
        assert len(load_pointcloud_ply(tmp_path / "c.ply")) == 0

    @pytest.mark.parametrize("binary", [True, False])
    def test_one_triangle(self, tmp_path, binary):
        mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
        save_mesh_ply(mesh, tmp_path / "m.ply", binary)
        data = load_ply(tmp_path / "m.ply")
        assert len(data["vertex"]["x"]) == 3
        assert data["faces"].tolist() == [[0, 1, 2]]

    def test_nan_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            save_pointcloud_ply(PointCloud([[0, np.nan, 1]], [0], [[0, 0]]), tmp_path / "c.ply")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ply").write_bytes(b"plx\n")
        with pytest.raises(FormatError):
            load_ply(tmp_path / "c.ply")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 50), st.booleans())
    def test_cloud_round_trip(self, tmp_path_factory, seed, n, binary):
        rng = np.random.default_rng(seed)
        cloud = PointCloud(rng.normal(scale=10, size=(n, 3)), rng.integers(0, 5, n),
                           rng.integers(0, 640, (n, 2)))
        p = tmp_path_factory.mktemp("ply") / "c.ply"
        save_pointcloud_ply(cloud, p, binary)
        back = load_pointcloud_ply(p)
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-6)
        np.testing.assert_array_equal(back.view_ids, cloud.view_ids)
        np.testing.assert_array_equal(back.pixels, cloud.pixels)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_mesh_round_trip(self, tmp_path_factory, seed, binary):
        rng = np.random.default_rng(seed)
        mesh = TriangleMesh(rng.normal(size=(10, 3)), rng.integers(0, 10, (7, 3)))
        p = tmp_path_factory.mktemp("ply") / "m.ply"
        save_mesh_ply(mesh, p, binary)
        back = load_mesh_ply(p)
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_array_equal(back.faces, mesh.faces)


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = Config(r_max=0.01, iterations=2, vote_strict=False)
        save_config(cfg, tmp_path / "c.txt")
        assert load_config(tmp_path / "c.txt") == cfg

    def test_auto_is_none(self):
        assert parse_config_value("r_max", "auto") is None
        assert "r_max = auto" in format_config(Config())

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.txt").write_text("bogus = 1\n")
        with pytest.raises((FormatError, ValidationError)):
            load_config(tmp_path / "c.txt")

    @pytest.mark.parametrize("changes", [
        {"softmax_temperature": 0}, {"r_max": 0.0}, {"n_min": 0}, {"hypotheses_fine": 7},
        {"pyramid_levels_fine": 1}, {"iterations": -1}, {"alpha_g": -0.1}])
    def test_invalid(self, changes):
        with pytest.raises(ValidationError):
            Config(**changes)


class TestScene:
    def test_manifest_rejects_bad_pair(self):
        views = [("a", "b"), ("c", "d")]
        with pytest.raises(ValidationError):
            SceneManifest("s", views, [[1], [2]], (2, 2), (4, 4))

    def test_manifest_rejects_single_view(self):
        with pytest.raises(ValidationError):
            SceneManifest("s", [("a", "b")], [[]], (2, 2), (4, 4))

    def test_manifest_rejects_low_above_high(self):
        with pytest.raises(ValidationError):
            SceneManifest("s", [("a", "b"), ("c", "d")], [[1], [0]], (8, 8), (4, 4))

    def test_pair_file_round_trip(self, tmp_path):
        pairs = [[2, 1], [0, 2], [1, 0]]
        save_pair_file(pairs, tmp_path / "pair.txt")
        assert load_pair_file(tmp_path / "pair.txt") == pairs

    def test_area_downsample(self):
        img = np.arange(16.0).reshape(4, 4)
        np.testing.assert_array_equal(area_downsample(img, 2), [[2.5, 4.5], [10.5, 12.5]])
        with pytest.raises(ValidationError):
            area_downsample(np.zeros((3, 4)), 2)

    def test_scene_round_trip(self, tmp_path, plane_noise):
        save_scene(plane_noise, tmp_path / "scene")
        back = load_scene(tmp_path / "scene")
        assert back.n_views == plane_noise.n_views
        assert back.resolution_low == plane_noise.resolution_low
        assert back.pairs == plane_noise.pairs
        # 8-bit quantization bounds the image error
        assert np.abs(back.images_high[0] - plane_noise.images_high[0]).max() <= 0.5 / 255 + 1e-12
        for a, b in zip(back.cameras_high, plane_noise.cameras_high):
            np.testing.assert_allclose(a.K, b.K, atol=1e-12)
            np.testing.assert_allclose(a.t, b.t, atol=1e-12)
        np.testing.assert_allclose(back.gt_depths_low[1].values, plane_noise.gt_depths_low[1].values,
                                   rtol=1e-6)

    def test_missing_scene(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_scene(tmp_path / "nope")
