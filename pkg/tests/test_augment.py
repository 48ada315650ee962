import numpy as np
import pytest

from auggs.augment import (
    PSEUDO,
    REFERENCE,
    ViewRecord,
    ViewSet,
    build_fine_viewset,
    geometry_augment,
    perceptual_augment,
    sample_novel_cameras,
    slerp_arc_point,
)
from auggs.core import Camera, SH_C0
from auggs.errors import ContractViolationError, EmptyCloudError, InvalidParameterError
from auggs.fixture import make_fixture_scene
from auggs.losses import psnr
from auggs.rasterizer import render

from conftest import make_cloud


def ring_camera(azimuth, radius=1.0, size=16):
    position = (radius * np.cos(azimuth), radius * np.sin(azimuth), 0.0)
    return Camera.look_at(position=position, target=(0, 0, 0), up=(0, 0, 1),
                          width=size, height=size, fx=20.0, fy=20.0)


class TestGeometryAugment:
    def test_point_count_preserved(self, rng):
        cloud = make_cloud(rng, count=17, sh_degree=2)
        points = geometry_augment(cloud)
        assert points.positions.shape == (17, 3)
        assert points.colors.shape == (17, 3)

    def test_zero_dc_gives_gray(self, rng):
        cloud = make_cloud(rng, count=3, sh_degree=1)
        cloud.sh[:] = 0.0
        cloud.sh[:, 1:, :] = rng.uniform(-1, 1, (3, 3, 3))  # higher orders ignored
        points = geometry_augment(cloud)
        np.testing.assert_allclose(points.colors, 0.5, atol=1e-12)

    def test_uses_only_dc_term(self, rng):
        cloud = make_cloud(rng, count=5, sh_degree=3)
        expected = np.clip(0.5 + SH_C0 * cloud.sh[:, 0, :], 0.0, 1.0)
        points = geometry_augment(cloud)
        np.testing.assert_allclose(points.colors, expected, atol=1e-12)
        np.testing.assert_array_equal(points.positions, cloud.centers)

    def test_colors_clamped(self, rng):
        cloud = make_cloud(rng, count=4, sh_degree=0)
        cloud.sh[:, 0, :] = 50.0
        points = geometry_augment(cloud)
        np.testing.assert_array_equal(points.colors, np.ones((4, 3)))

    def test_six_scalars_per_point(self, rng):
        points = geometry_augment(make_cloud(rng, count=9))
        assert points.positions.shape[1] + points.colors.shape[1] == 6

    def test_empty_cloud_rejected(self):
        from auggs.core import GaussianCloud

        with pytest.raises(EmptyCloudError):
            geometry_augment(GaussianCloud.empty(1))


class TestSlerp:
    def test_endpoints(self):
        start = np.array([1.0, 0.0, 0.0])
        end = np.array([0.0, 1.0, 0.0])
        centroid = np.zeros(3)
        np.testing.assert_allclose(slerp_arc_point(start, end, centroid, 0.0), start, atol=1e-9)
        np.testing.assert_allclose(slerp_arc_point(start, end, centroid, 1.0), end, atol=1e-9)

    def test_unit_circle_midpoint(self):
        start = np.array([1.0, 0.0, 0.0])
        end = np.array([0.0, 1.0, 0.0])
        mid = slerp_arc_point(start, end, np.zeros(3), 0.5)
        assert np.linalg.norm(mid) == pytest.approx(1.0, abs=1e-6)
        assert np.arctan2(mid[1], mid[0]) == pytest.approx(np.pi / 4, abs=1e-6)

    def test_radius_interpolates(self):
        start = np.array([2.0, 0.0, 0.0])
        end = np.array([0.0, 4.0, 0.0])
        mid = slerp_arc_point(start, end, np.zeros(3), 0.5)
        assert np.linalg.norm(mid) == pytest.approx(3.0, abs=1e-9)


class TestSampleNovelCameras:
    def test_zero_requested(self):
        cams = [ring_camera(0.0), ring_camera(np.pi / 2)]
        assert sample_novel_cameras(cams, 0, seed=0) == []

    def test_two_cameras_midpoint(self):
        cams = [ring_camera(0.0), ring_camera(np.pi / 2)]
        novel = sample_novel_cameras(cams, 2, seed=0)
        assert len(novel) == 2
        center = novel[0].center
        radius = np.linalg.norm(center - np.mean([c.center for c in cams], axis=0))
        azimuth = np.arctan2(center[1], center[0])
        assert azimuth == pytest.approx(np.pi / 4, abs=1e-6) or \
            azimuth == pytest.approx(np.pi / 4 - np.pi, abs=1e-6)

    def test_cameras_are_valid_and_aimed(self, rng):
        cams = [ring_camera(a, radius=3.0) for a in np.linspace(0, 2 * np.pi, 6, endpoint=False)]
        novel = sample_novel_cameras(cams, 13, seed=3)
        assert len(novel) == 13
        centroid = np.mean([c.center for c in cams], axis=0)
        for cam in novel:
            assert np.max(np.abs(cam.rotation @ cam.rotation.T - np.eye(3))) < 1e-6
            forward = cam.rotation[2]
            to_centroid = centroid - cam.center
            to_centroid /= np.linalg.norm(to_centroid)
            np.testing.assert_allclose(forward, to_centroid, atol=1e-9)

    def test_intrinsics_copied(self):
        cams = [ring_camera(0.0), ring_camera(np.pi)]
        novel = sample_novel_cameras(cams, 4, seed=0)
        for cam in novel:
            assert cam.fx == cams[0].fx and cam.width == cams[0].width

    def test_single_camera_rejected(self):
        with pytest.raises(ContractViolationError):
            sample_novel_cameras([ring_camera(0.0)], 3, seed=0)

    def test_deterministic_for_seed(self):
        cams = [ring_camera(a) for a in (0.0, 1.0, 2.5, 4.0)]
        a = sample_novel_cameras(cams, 7, seed=9)
        b = sample_novel_cameras(cams, 7, seed=9)
        assert all(np.array_equal(x.rotation, y.rotation) for x, y in zip(a, b))
        assert all(np.array_equal(x.translation, y.translation) for x, y in zip(a, b))


class TestPerceptualAugment:
    def test_records_tagged_and_unmasked(self, rng):
        cloud = make_cloud(rng, count=8)
        cams = [ring_camera(a, radius=4.0) for a in (0.2, 1.2, 2.2)]
        records = perceptual_augment(cloud, cams, np.array([1.0, 1.0, 1.0]))
        assert len(records) == 3
        for record in records:
            assert record.origin == PSEUDO
            assert record.object_mask is None
            assert record.depth is None

    def test_image_matches_direct_render(self, rng):
        cloud = make_cloud(rng, count=8)
        cam = ring_camera(0.7, radius=4.0)
        background = np.array([0.3, 0.3, 0.3])
        records = perceptual_augment(cloud, [cam], background)
        direct = render(cloud, cam, background)
        assert records[0].image.tobytes() == direct.color.tobytes()

    def test_pseudo_view_close_to_ground_truth_at_novel_pose(self, tmp_path):
        # A coarse model overfit to the synthetic scene (seeded from the GT
        # point positions and briefly trained) must produce pseudo views that
        # match the true scene's renders at interpolated poses.
        from auggs.pipeline import InitConfig, TrainingConfig, train_coarse
        from auggs.scene_io import save_ply

        scene = make_fixture_scene(seed=3, train_views=4, heldout_views=0, size=32)
        seed_ply = tmp_path / "seed_points.ply"
        save_ply(scene.cloud, seed_ply)
        cfg = TrainingConfig(coarse_iters=250, eval_every=10**9, seed=0,
                             init=InitConfig(points_file=str(seed_ply)))
        coarse, _ = train_coarse(scene.train, cfg)
        cams = sample_novel_cameras(scene.train.cameras(), 4, seed=1)
        records = perceptual_augment(coarse, cams, scene.background)
        for cam, record in zip(cams, records):
            gt = render(scene.cloud, cam, scene.background)
            assert psnr(record.image, gt.color) > 25.0

    def test_empty_model_rejected(self):
        from auggs.core import GaussianCloud

        with pytest.raises(EmptyCloudError):
            perceptual_augment(GaussianCloud.empty(1), [], np.zeros(3))


class TestViewSets:
    def _record(self, origin=REFERENCE, size=8):
        cam = ring_camera(0.3, size=size)
        return ViewRecord(image=np.zeros((size, size, 3)), camera=cam, origin=origin)

    def test_union_preserves_order_and_counts(self):
        refs = ViewSet(records=[self._record() for _ in range(4)])
        pseudos = [self._record(origin=PSEUDO) for _ in range(12)]
        fine = build_fine_viewset(refs, pseudos)
        assert len(fine) == 16
        assert fine.n_reference == 4
        assert fine.n_pseudo == 12
        assert all(r.origin == REFERENCE for r in fine.records[:4])

    def test_empty_pseudo_list(self):
        refs = ViewSet(records=[self._record()])
        fine = build_fine_viewset(refs, [])
        assert len(fine) == 1 and fine.n_pseudo == 0

    def test_duplicate_poses_preserved(self):
        record = self._record()
        fine = build_fine_viewset(ViewSet(records=[record]), [
            ViewRecord(image=record.image, camera=record.camera, origin=PSEUDO)])
        assert len(fine) == 2

    def test_pseudo_with_mask_rejected(self):
        cam = ring_camera(0.1, size=8)
        with pytest.raises(InvalidParameterError):
            ViewRecord(image=np.zeros((8, 8, 3)), camera=cam,
                       object_mask=np.ones((8, 8), bool), origin=PSEUDO)

    def test_image_camera_shape_mismatch_rejected(self):
        cam = ring_camera(0.1, size=8)
        with pytest.raises(InvalidParameterError):
            ViewRecord(image=np.zeros((9, 8, 3)), camera=cam)
