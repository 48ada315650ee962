import json
from pathlib import Path

import numpy as np
import pytest

from auggs.cli import main
from auggs.rasterizer import render
from auggs.scene_io import camera_to_dict, load_dataset, load_image, load_ply, save_image


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "scene"
    code = main(["make-fixture", "--out", str(root), "--seed", "3",
                 "--train-views", "3", "--heldout-views", "2", "--size", "24"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained_dir(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "out"
    config = {
        "coarse_iters": 30,
        "fine_iters": 30,
        "eval_every": 15,
        "seed": 0,
        "pseudo_views": 4,
        "init": {"n_points": 200, "radius_scale": 0.4},
        "masks": {"point_gap": 12, "patch_gap": 12, "min_points": 40},
        "densify": {"start_iteration": 10, "interval": 10, "reset_interval": 1000000},
    }
    cfg_path = out.parent / "config.json"
    cfg_path.write_text(json.dumps(config))
    code = main(["train", "--scene", str(fixture_dir), "--config", str(cfg_path),
                 "--out", str(out)])
    assert code == 0
    return out


class TestMakeFixture:
    def test_writes_loadable_scene(self, fixture_dir):
        train, heldout = load_dataset(fixture_dir)
        assert len(train) == 3 and len(heldout) == 2
        assert (fixture_dir / "gt.ply").is_file()

    def test_deterministic_for_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["make-fixture", "--out", str(a), "--seed", "9",
                     "--train-views", "2", "--heldout-views", "0", "--size", "16"]) == 0
        assert main(["make-fixture", "--out", str(b), "--seed", "9",
                     "--train-views", "2", "--heldout-views", "0", "--size", "16"]) == 0
        img_a = (a / "images" / "train_000.png").read_bytes()
        img_b = (b / "images" / "train_000.png").read_bytes()
        assert img_a == img_b


class TestTrain:
    def test_artifacts_written(self, trained_dir):
        for name in ("coarse.ply", "fine.ply", "fine_best.ply", "report.json"):
            assert (trained_dir / name).is_file(), name
        pseudo = sorted((trained_dir / "pseudo").iterdir())
        assert len(pseudo) == 4

    def test_report_contains_config_and_metrics(self, trained_dir):
        report = json.loads((trained_dir / "report.json").read_text())
        cfg = report["config"]
        assert cfg["coarse_iters"] == 30 and cfg["fine_iters"] == 30
        assert cfg["init"]["n_points"] == 200
        assert cfg["masks"]["point_gap"] == 12
        assert cfg["weights"]["lambda_ssim"] == 0.2
        assert cfg["optimizer"]["opacity_lr"] == 0.05
        assert "rows" in report["stages"]["coarse"]
        assert report["final"]["train"]["mean_psnr"] > 0
        assert report["final"]["heldout"] is not None
        assert report["timings"]["total_s"] > 0

    def test_bad_config_is_user_error(self, fixture_dir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"not_a_field": 1}))
        code = main(["train", "--scene", str(fixture_dir), "--config", str(bad),
                     "--out", str(tmp_path / "o")])
        assert code == 1

    def test_missing_scene_is_user_error(self, tmp_path):
        code = main(["train", "--scene", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")])
        assert code == 1


class TestRender:
    def test_reproduces_library_render_bit_exactly(self, fixture_dir, trained_dir, tmp_path):
        train, _ = load_dataset(fixture_dir)
        cam = train.records[0].camera
        cam_path = tmp_path / "cam.json"
        cam_path.write_text(json.dumps(camera_to_dict(cam)))
        out_png = tmp_path / "render.png"
        code = main(["render", "--ply", str(trained_dir / "fine.ply"),
                     "--camera", str(cam_path), "--out", str(out_png)])
        assert code == 0
        cloud = load_ply(trained_dir / "fine.ply")
        direct = render(cloud, cam, np.array([1.0, 1.0, 1.0]))
        expected = tmp_path / "expected.png"
        save_image(direct.color, expected)
        assert out_png.read_bytes() == expected.read_bytes()

    def test_bad_background_is_user_error(self, trained_dir, tmp_path):
        code = main(["render", "--ply", str(trained_dir / "fine.ply"),
                     "--camera", "nope.json", "--out", str(tmp_path / "x.png"),
                     "--background", "1,2"])
        assert code == 1


class TestEvaluate:
    def test_prints_per_view_scores(self, fixture_dir, trained_dir, capsys):
        code = main(["evaluate", "--ply", str(trained_dir / "fine.ply"),
                     "--scene", str(fixture_dir)])
        assert code == 0
        out = capsys.readouterr().out
        assert "heldout[0]" in out and "heldout[1]" in out
        assert "mean psnr" in out

    def test_falls_back_to_train_when_no_heldout(self, tmp_path, trained_dir, capsys):
        scene = tmp_path / "scene"
        assert main(["make-fixture", "--out", str(scene), "--seed", "3",
                     "--train-views", "2", "--heldout-views", "0", "--size", "24"]) == 0
        code = main(["evaluate", "--ply", str(trained_dir / "fine.ply"),
                     "--scene", str(scene)])
        assert code == 0
        out = capsys.readouterr().out
        assert "train[0]" in out

    def test_gt_cloud_scores_high_on_own_scene(self, fixture_dir, capsys):
        code = main(["evaluate", "--ply", str(fixture_dir / "gt.ply"),
                     "--scene", str(fixture_dir), "--split", "all"])
        assert code == 0
        out = capsys.readouterr().out
        scores = [float(line.split("psnr=")[1].split()[0])
                  for line in out.splitlines() if "psnr=" in line and "mean" not in line]
        # Only 8-bit quantization separates the GT render from the files.
        assert min(scores) > 45.0


class TestUsage:
    def test_unknown_flag_exits_one(self, capsys):
        assert main(["train", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_command_exits_one(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_exits_one(self):
        assert main(["render", "--ply", "x.ply"]) == 1
