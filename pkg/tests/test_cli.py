import subprocess
import sys

import numpy as np
import pytest

from mvspl.cli import dispatch
from mvspl.scene_io import load_depth_pfm, load_scene, save_depth_pfm, save_pointcloud_ply, view_name
from mvspl.fusion_render import PointCloud
from mvspl.geometry import DepthMap

SMALL = ["--height", "64", "--width", "80"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "scene"
    assert dispatch(["synth", "--surface", "plane", "--views", "5", *SMALL, "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def iterated(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = dispatch(["iterate", str(scene_dir), "-T", "2", "--keep-intermediate", "--jobs", "2",
                     "--out", str(out)])
    assert code == 0
    return out


def same_tree(a, b, pattern="*"):
    files = sorted(p.relative_to(a) for p in a.rglob(pattern) if p.is_file())
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


class TestSmoke:
    def test_synth_layout(self, scene_dir):
        assert len(list((scene_dir / "images").glob("*.png"))) == 5
        assert len(list((scene_dir / "cams").glob("*_cam.txt"))) == 5
        assert (scene_dir / "pair.txt").is_file()
        scene = load_scene(scene_dir)
        assert scene.resolution_low == (64, 80) and scene.resolution_high == (128, 160)

    def test_iterate(self, iterated, capsys):
        assert len(list((iterated / "labels").glob("*.pfm"))) == 5
        assert (iterated / "config.txt").is_file()
        assert (iterated / "iter2" / "fuse" / "mesh.ply").is_file()

    def test_kv_output(self, scene_dir, tmp_path, capsys):
        dispatch(["infer", str(scene_dir), "--format", "kv", "--out", str(tmp_path / "d")])
        lines = capsys.readouterr().out.strip().splitlines()
        assert all("=" in ln for ln in lines) and len(lines) == 5

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "mvspl", "--version"], capture_output=True, text=True)
        assert r.returncode == 0 and r.stdout.strip()


class TestExitCodes:
    def test_missing_scene(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert dispatch(["infer", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_non_positive_r_max(self, scene_dir, iterated, tmp_path):
        code = dispatch(["filter", str(scene_dir), "--depths", str(iterated / "iter1" / "refine"),
                         "--r-max", "0", "--out", str(tmp_path / "f")])
        assert code == 1

    def test_unknown_command(self, capsys):
        assert dispatch(["teleport"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_command(self):
        assert dispatch([]) == 1

    def test_non_empty_output(self, scene_dir, iterated):
        assert dispatch(["infer", str(scene_dir), "--out", str(iterated)]) == 2

    def test_wrong_resolution(self, scene_dir, iterated, tmp_path):
        code = dispatch(["filter", str(scene_dir), "--depths", str(iterated / "iter1" / "infer"),
                         "--out", str(tmp_path / "f")])
        assert code == 1

    def test_stage_failure(self, scene_dir, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        for v in range(5):
            save_depth_pfm(DepthMap.empty((128, 160)), empty / f"{view_name(v)}.pfm")
        assert dispatch(["fuse", str(scene_dir), "--depths", str(empty), "--out", str(tmp_path / "o")]) == 3
        assert "stage=fuse" in capsys.readouterr().err

    def test_bad_config_file(self, scene_dir, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("softmax_temperature = -1\n")
        assert dispatch(["infer", str(scene_dir), "--config", str(cfg), "--out", str(tmp_path / "o")]) in (1, 2)

    def test_eval_needs_pairs(self, tmp_path):
        assert dispatch(["eval", "--cloud", str(tmp_path / "x.ply")]) == 1


class TestComposition:
    def test_manual_chain_matches_iterate(self, scene_dir, iterated, tmp_path):
        s, w = str(scene_dir), tmp_path
        assert dispatch(["infer", s, "--gate", "--out", str(w / "init")]) == 0
        same_tree(iterated / "iter0" / "init", w / "init")
        labels = w / "init"
        for t in (1, 2):
            d = w / f"t{t}"
            assert dispatch(["infer", s, "--labels", str(labels), "--out", str(d / "infer")]) == 0
            assert dispatch(["refine", s, "--depths", str(d / "infer"), "--out", str(d / "refine")]) == 0
            assert dispatch(["filter", s, "--depths", str(d / "refine"), "--out", str(d / "filter")]) == 0
            assert dispatch(["fuse", s, "--depths", str(d / "filter"), "--out", str(d / "fuse")]) == 0
            assert dispatch(["render", s, "--mesh", str(d / "fuse" / "mesh.ply"), "--out", str(d / "render")]) == 0
            for stage in ("infer", "refine", "render"):
                same_tree(iterated / f"iter{t}" / stage, d / stage)
            same_tree(iterated / f"iter{t}" / "filter", d / "filter", "0*.pfm")
            same_tree(iterated / f"iter{t}" / "fuse", d / "fuse")
            labels = d / "render"
        same_tree(iterated / "labels", labels)

    def test_overwrite_idempotent(self, scene_dir, iterated, tmp_path):
        args = ["filter", str(scene_dir), "--depths", str(iterated / "iter1" / "refine"), "--out", str(tmp_path / "f")]
        assert dispatch(args) == 0
        first = {p.name: p.read_bytes() for p in (tmp_path / "f").glob("*.pfm")}
        assert dispatch(args + ["--overwrite"]) == 0
        assert first == {p.name: p.read_bytes() for p in (tmp_path / "f").glob("*.pfm")}


class TestScoreAndEval:
    def test_score(self, scene_dir, capsys):
        assert dispatch(["score", str(scene_dir), "--format", "kv"]) == 0
        out = dict(ln.split("=", 1) for ln in capsys.readouterr().out.split())
        b = {k.split(".")[1]: float(v) for k, v in out.items() if k.startswith("view0.")}
        assert b["l_syn"] == pytest.approx(0.8 * b["l_g"] + 0.2 * b["l_ssim"] + 0.05 * b["l_p"] + 0.05 * b["l_s"],
                                           rel=1e-6)

    def test_eval_depths(self, scene_dir, iterated, capsys):
        code = dispatch(["eval", "--depths", str(iterated / "labels"), "--gt", str(scene_dir / "depths_gt"),
                         "--tolerance", "0.05", "--format", "kv"])
        assert code == 0
        out = dict(ln.split("=", 1) for ln in capsys.readouterr().out.split())
        assert float(out["view0.mae"]) < 0.05

    def test_eval_clouds(self, tmp_path, capsys):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        for name in ("a", "b"):
            save_pointcloud_ply(PointCloud(pts, np.zeros(20), np.zeros((20, 2))), tmp_path / f"{name}.ply")
        code = dispatch(["eval", "--cloud", str(tmp_path / "a.ply"), "--reference", str(tmp_path / "b.ply"),
                         "--threshold", "0.1", "--format", "kv"])
        assert code == 0
        out = dict(ln.split("=", 1) for ln in capsys.readouterr().out.split())
        assert float(out["f_score"]) == 1.0 and float(out["accuracy"]) == 0.0


def test_labels_round_trip_through_files(iterated):
    d = load_depth_pfm(iterated / "labels" / f"{view_name(0)}.pfm")
    assert d.shape == (64, 80) and d.mask.any()
