"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The directional and ablation criteria share one experiment matrix (module
fixture) so the expensive training runs happen once.
"""

import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from auggs.augment import (
    build_fine_viewset,
    geometry_augment,
    perceptual_augment,
    sample_novel_cameras,
)
from auggs.cli import main
from auggs.fixture import make_fixture_scene, write_fixture
from auggs.losses import DepthMap, loss_depth, loss_dssim, psnr
from auggs.masking import MaskSchedule, fps, knn_patch, patch_mask, point_mask
from auggs.pipeline import (
    InitConfig,
    TrainingConfig,
    _final_metrics,
    run_pipeline,
    train_coarse,
    train_fine,
)
from auggs.scene_io import load_dataset, load_ply, save_ply

from conftest import make_cloud
from oracles import fps_reference
from test_gradcheck import gradcheck_scenes


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion} {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


class TestCriterion1Gradients:
    def test_gradient_oracle_50_scenes(self):
        start = time.perf_counter()
        total_checked = 0
        worst_abs = worst_rel = 0.0
        for n_checked, scene_abs, scene_rel in gradcheck_scenes(50, start_seed=1000):
            total_checked += n_checked
            worst_abs = max(worst_abs, scene_abs)
            worst_rel = max(worst_rel, scene_rel)
        elapsed = time.perf_counter() - start
        detail = (f"{total_checked} partials over 50 scenes match central differences "
                  f"(worst abs {worst_abs:.2e}); {elapsed:.0f}s < 120s")
        report(1, elapsed < 120.0 and total_checked > 0, detail)


class TestCriterion2Losses:
    def test_loss_correctness(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        dssim_self = loss_dssim(x, x)[0]

        worst_depth = 0.0
        base = rng.uniform(0.5, 4.0, (12, 12))
        for _ in range(100):
            a = rng.uniform(0.1, 10.0)
            b = rng.uniform(-5.0, 5.0)
            value, _ = loss_depth(DepthMap.full(a * base + b), DepthMap.full(base))
            worst_depth = max(worst_depth, value)

        psnr_value = psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1))
        ok = (dssim_self <= 1e-9 and worst_depth <= 1e-6
              and abs(psnr_value - 20.0) <= 1e-9)
        report(2, ok, f"dssim(x,x)={dssim_self:.1e}; worst affine depth loss "
                      f"{worst_depth:.1e}; psnr(mse=.01)={psnr_value:.12f}")


class TestCriterion3Masking:
    def test_masking_oracles(self, rng):
        # fps equals exhaustive max-min selection on fixtures covering every
        # point count up to 64.
        for p in range(2, 65):
            positions = rng.normal(size=(p, 3))
            count = int(rng.integers(1, p + 1))
            start = int(rng.integers(p))
            got = fps(positions, count, start)
            want = fps_reference(positions, count, start)
            assert list(got) == list(want), f"fps mismatch at P={p}"

        cloud = make_cloud(rng, count=100)
        removed = point_mask(cloud, 0.25, np.random.default_rng(5), min_points=1)
        assert len(removed.cloud) == 100 - round(0.25 * 100)

        # Patch mask removes exactly the union of the selected patches on a
        # constructed disjoint-cluster fixture.
        clusters = [np.array([cx, cy, 0.0]) + 0.01 * np.arange(5)[:, None] * np.array([1.0, 0, 0])
                    for cx, cy in ((0, 0), (50, 0), (0, 50), (50, 50))]
        cloud4 = make_cloud(rng, count=20)
        cloud4.centers[:] = np.concatenate(clusters)
        schedule = MaskSchedule(patch_ratio=0.5, patch_count=4, patch_size=5, min_points=1)
        result = patch_mask(cloud4, schedule, np.random.default_rng(3))
        assert result.removed.size == 10 and len(result.cloud) == 10

        # Bit-reproducibility under a fixed seed.
        for fn in (lambda: point_mask(cloud, 0.3, np.random.default_rng(17), min_points=1).removed,
                   lambda: patch_mask(cloud4, schedule, np.random.default_rng(17)).removed):
            first = fn()
            assert all(np.array_equal(first, fn()) for _ in range(2))
        report(3, True, "fps exhaustive oracle (P=2..64), point/patch mask counts, "
                        "seeded reproducibility")


class TestCriterion4Overfit:
    def test_overfit_synthetic_scene(self):
        scene = make_fixture_scene(seed=0, train_views=8, heldout_views=0, size=64,
                                   n_gaussians=20)
        cfg = TrainingConfig(coarse_iters=2000, eval_every=2000, seed=0)
        start = time.perf_counter()
        cloud, stage = train_coarse(scene.train, cfg)
        elapsed = time.perf_counter() - start
        train_psnr = stage.rows[-1].train_psnr
        ok = train_psnr >= 30.0 and elapsed < 180.0
        report(4, ok, f"train PSNR {train_psnr:.2f} dB >= 30 after 2000 coarse "
                      f"iterations; {elapsed:.0f}s < 180s")


@pytest.fixture(scope="module")
def directional_matrix():
    """Shared 3-seed experiment: equal-budget baseline, full pipeline, ablations."""
    scene = make_fixture_scene(seed=0, train_views=4, heldout_views=4, size=64,
                               n_gaussians=50)
    background = scene.background

    def heldout_psnr(cloud):
        return _final_metrics(cloud, scene.heldout, background)["mean_psnr"]

    results = {k: [] for k in ("baseline", "full", "no_pv", "no_mask")}
    timings = {"criterion5": 0.0}
    for seed in (0, 1, 2):
        cfg = TrainingConfig(coarse_iters=1000, fine_iters=2500, eval_every=10**9,
                             seed=seed, coarse_sh_degree=1, fine_sh_degree=3,
                             init=InitConfig(n_points=3000, radius_scale=0.4))
        total_budget = cfg.coarse_iters + cfg.fine_iters

        # Criterion 5 pieces: coarse-only baseline at equal total budget, and
        # the full pipeline (geometry + perceptual augmentation + both masks).
        t0 = time.perf_counter()
        baseline, _ = train_coarse(scene.train, replace(cfg, coarse_iters=total_budget))
        coarse, _ = train_coarse(scene.train, cfg)
        points = geometry_augment(coarse)
        cams = sample_novel_cameras(scene.train.cameras(), 3 * len(scene.train), seed)
        pseudos = perceptual_augment(coarse, cams, background)
        fine, _, _ = train_fine(points, build_fine_viewset(scene.train, pseudos), cfg)
        timings["criterion5"] += time.perf_counter() - t0
        results["baseline"].append(heldout_psnr(baseline))
        results["full"].append(heldout_psnr(fine))

        # Criterion 6 ablations.
        fine_np, _, _ = train_fine(points, build_fine_viewset(scene.train, []), cfg)
        results["no_pv"].append(heldout_psnr(fine_np))

        cfg_nm = replace(cfg, masks=replace(cfg.masks, point_ratio=0.0, patch_ratio=0.0))
        coarse_nm, _ = train_coarse(scene.train, cfg_nm)
        pseudos_nm = perceptual_augment(coarse_nm, cams, background)
        fine_nm, _, _ = train_fine(geometry_augment(coarse_nm),
                                   build_fine_viewset(scene.train, pseudos_nm), cfg_nm)
        results["no_mask"].append(heldout_psnr(fine_nm))

    means = {k: float(np.mean(v)) for k, v in results.items()}
    return results, means, timings


class TestCriterion5Directional:
    def test_full_pipeline_beats_coarse_baseline(self, directional_matrix):
        results, means, timings = directional_matrix
        gap = means["full"] - means["baseline"]
        ok = gap >= 0.5 and timings["criterion5"] < 600.0
        report(5, ok, f"heldout PSNR full {means['full']:.2f} vs coarse-only "
                      f"{means['baseline']:.2f} (gap {gap:+.2f} dB >= +0.5, 3 seeds); "
                      f"{timings['criterion5']:.0f}s < 600s")


class TestCriterion6Ablations:
    def test_full_pipeline_dominates_single_ablations(self, directional_matrix):
        results, means, _ = directional_matrix
        no_pv_margin = means["full"] - means["no_pv"]
        no_mask_margin = means["full"] - means["no_mask"]
        ok = no_pv_margin >= 0.0 and no_mask_margin >= -0.1
        report(6, ok, f"full {means['full']:.2f} vs no-perceptual {means['no_pv']:.2f} "
                      f"({no_pv_margin:+.2f} >= 0) and no-masks {means['no_mask']:.2f} "
                      f"({no_mask_margin:+.2f} >= -0.1), 3 seeds")


class TestCriterion7Determinism:
    def test_thread_count_invariance(self, tmp_path, monkeypatch):
        write_fixture(tmp_path / "scene", seed=4, train_views=3, heldout_views=2, size=32)
        cfg = TrainingConfig(
            coarse_iters=150, fine_iters=150, eval_every=75, seed=11, pseudo_views=6,
            init=InitConfig(n_points=400, radius_scale=0.5),
            masks=MaskSchedule(point_gap=60, patch_gap=60, min_points=100,
                               patch_count=16),
        )
        digests = []
        for threads in ("1", "4"):
            monkeypatch.setenv("AUGGS_THREADS", threads)
            out = tmp_path / f"out{threads}"
            run_pipeline(tmp_path / "scene", cfg, out)
            digests.append(((out / "coarse.ply").read_bytes(),
                            (out / "fine.ply").read_bytes()))
        ok = digests[0] == digests[1]
        report(7, ok, "coarse.ply and fine.ply bit-identical for AUGGS_THREADS=1 vs 4")


class TestCriterion8Persistence:
    def test_round_trips_and_interrupted_write(self, tmp_path, rng, monkeypatch):
        # PLY round trip is exact at file precision.
        cloud = make_cloud(rng, count=6, sh_degree=3)
        for arr in (cloud.centers, cloud.rotations, cloud.log_scales,
                    cloud.opacity_logits, cloud.sh):
            arr[...] = arr.astype(np.float32)
        save_ply(cloud, tmp_path / "c.ply")
        loaded = load_ply(tmp_path / "c.ply")
        ply_ok = all(np.array_equal(getattr(loaded, n), getattr(cloud, n))
                     for n in ("centers", "rotations", "log_scales", "opacity_logits", "sh"))

        # Fixture round trip: everything the files can represent comes back.
        scene = write_fixture(tmp_path / "scene", seed=2, train_views=2,
                              heldout_views=1, size=24)
        train, heldout = load_dataset(tmp_path / "scene")
        fixture_ok = len(train) == 2 and len(heldout) == 1
        for loaded_rec, original in zip(train, scene.train):
            expected = np.clip(np.floor(original.image * 255 + 0.5), 0, 255) / 255.0
            fixture_ok &= np.array_equal(loaded_rec.image, expected)
            fixture_ok &= np.array_equal(loaded_rec.depth.valid, original.depth.valid)

        # Interrupted write: target never truncated, no temp debris.
        target = tmp_path / "artifact.ply"
        save_ply(cloud, target)
        before = target.read_bytes()
        real_replace = os.replace
        monkeypatch.setattr(os, "replace",
                            lambda *a: (_ for _ in ()).throw(OSError("crash")))
        with pytest.raises(OSError):
            save_ply(make_cloud(rng, count=3), target)
        monkeypatch.setattr(os, "replace", real_replace)
        atomic_ok = (target.read_bytes() == before
                     and [p.name for p in tmp_path.iterdir() if p.suffix == ".tmp"] == [])
        report(8, ply_ok and fixture_ok and atomic_ok,
               "PLY and fixture round trips exact; interrupted write left no "
               "truncated artifact")


class TestCriterion9EndToEnd:
    def test_cli_end_to_end_default_budgets(self, tmp_path, capsys):
        start = time.perf_counter()
        scene_dir = tmp_path / "scene"
        out_dir = tmp_path / "out"
        assert main(["make-fixture", "--out", str(scene_dir), "--seed", "0"]) == 0

        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({"seed": 0}))  # default budgets 5000/6000
        assert main(["train", "--scene", str(scene_dir), "--config", str(cfg_path),
                     "--out", str(out_dir)]) == 0
        assert main(["evaluate", "--ply", str(out_dir / "fine.ply"),
                     "--scene", str(scene_dir)]) == 0
        elapsed = time.perf_counter() - start

        report_data = json.loads((out_dir / "report.json").read_text())
        budgets = (report_data["config"]["coarse_iters"], report_data["config"]["fine_iters"])
        ok = elapsed < 900.0 and budgets == (5000, 6000)
        report(9, ok, f"make-fixture -> train (budgets {budgets[0]}/{budgets[1]}) -> "
                      f"evaluate in {elapsed:.0f}s < 900s")
