"""Synthetic ground-truth scene generator for tests and the CLI.

The fixture is a seeded cloud of anisotropic Gaussians near the origin,
observed from an orbit of cameras: train cameras at evenly spaced azimuths
and held-out cameras rotated half a step between them. Train and held-out
images are renders of the ground-truth cloud, and each view carries the
renderer's own expected depth as its monocular-depth stand-in, so the depth
objective can be exercised without a depth network.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import REFERENCE, ViewRecord, ViewSet
from .core import Camera, GaussianCloud, inverse_sigmoid, rgb_to_sh_dc
from .losses import DepthMap
from .rasterizer import render
from .scene_io import camera_to_dict, save_depth, save_image, save_ply

#: Alpha level above which a rendered pixel is considered to have depth.
DEPTH_VALID_ALPHA = 0.5


@dataclass
class FixtureScene:
    """In-memory synthetic scene: ground truth cloud plus posed renders."""

    cloud: GaussianCloud
    train: ViewSet
    heldout: ViewSet
    background: np.ndarray


def make_gt_cloud(rng: np.random.Generator, n_gaussians: int = 20,
                  sh_degree: int = 1, view_dependence: float = 0.06) -> GaussianCloud:
    """Seeded ground-truth cloud inside the unit-ish ball with mild view dependence."""
    direction = rng.normal(size=(n_gaussians, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    centers = direction * rng.uniform(size=(n_gaussians, 1)) ** (1.0 / 3.0)

    k = (sh_degree + 1) ** 2
    sh = np.zeros((n_gaussians, k, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.15, 0.85, size=(n_gaussians, 3)))
    if k > 1:
        sh[:, 1:, :] = rng.uniform(-view_dependence, view_dependence,
                                   size=(n_gaussians, k - 1, 3))

    return GaussianCloud(
        centers=centers,
        rotations=rng.normal(size=(n_gaussians, 4)),
        log_scales=np.log(rng.uniform(0.08, 0.22, size=(n_gaussians, 3))),
        opacity_logits=inverse_sigmoid(rng.uniform(0.55, 0.95, size=n_gaussians)),
        sh=sh,
        sh_degree=sh_degree,
    )


def orbit_camera(azimuth: float, size: int, radius: float = 3.6,
                 elevation: float = 0.9) -> Camera:
    position = (radius * np.cos(azimuth), radius * np.sin(azimuth), elevation)
    return Camera.look_at(position=position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
                          width=size, height=size, fx=1.1 * size, fy=1.1 * size)


#: Elevation cycle for the orbit cameras. Held-out poses sit between train
#: azimuths at different heights, so evaluation extrapolates both angles.
ELEVATIONS = (0.4, 1.1, 1.8)


def make_fixture_scene(seed: int = 0, n_gaussians: int = 20, train_views: int = 8,
                       heldout_views: int = 4, size: int = 64, sh_degree: int = 1,
                       view_dependence: float = 0.06) -> FixtureScene:
    """Build the synthetic scene in memory (no files written)."""
    rng = np.random.default_rng([seed, 2024])
    cloud = make_gt_cloud(rng, n_gaussians=n_gaussians, sh_degree=sh_degree,
                          view_dependence=view_dependence)
    background = np.array([1.0, 1.0, 1.0])

    def make_views(count: int, offset: float, phase: int, radius: float) -> ViewSet:
        views = ViewSet()
        for i in range(count):
            azimuth = offset + 2.0 * np.pi * i / max(count, 1)
            cam = orbit_camera(azimuth, size, radius=radius,
                               elevation=ELEVATIONS[(i + phase) % len(ELEVATIONS)])
            out = render(cloud, cam, background)
            depth = DepthMap(values=out.depth, valid=out.alpha > DEPTH_VALID_ALPHA)
            views.records.append(ViewRecord(image=out.color, camera=cam,
                                            depth=depth, origin=REFERENCE))
        return views

    train = make_views(train_views, 0.0, phase=0, radius=3.6)
    # Held-out cameras probe genuinely novel viewpoints: between the train
    # azimuths, at different heights, and closer in.
    heldout_offset = np.pi / train_views if train_views else 0.0
    heldout = make_views(heldout_views, heldout_offset, phase=1, radius=2.9)
    return FixtureScene(cloud=cloud, train=train, heldout=heldout, background=background)


def write_fixture(out_dir, seed: int = 0, n_gaussians: int = 20, train_views: int = 8,
                  heldout_views: int = 4, size: int = 64, sh_degree: int = 1) -> FixtureScene:
    """Generate the fixture and persist it as a loadable scene directory."""
    scene = make_fixture_scene(seed=seed, n_gaussians=n_gaussians, train_views=train_views,
                               heldout_views=heldout_views, size=size, sh_degree=sh_degree)
    out_dir = Path(out_dir)
    manifest_views = []
    for split, views in (("train", scene.train), ("heldout", scene.heldout)):
        for i, record in enumerate(views):
            stem = f"{split}_{i:03d}"
            save_image(record.image, out_dir / "images" / f"{stem}.png")
            entry = {
                "image": f"images/{stem}.png",
                "split": split,
                "camera": camera_to_dict(record.camera),
            }
            if record.depth is not None:
                save_depth(record.depth, out_dir / "depth" / f"{stem}.dpth")
                entry["depth"] = f"depth/{stem}.dpth"
            manifest_views.append(entry)
    save_ply(scene.cloud, out_dir / "gt.ply")
    from .scene_io import save_report

    save_report({"views": manifest_views}, out_dir / "scene.json")
    return scene
