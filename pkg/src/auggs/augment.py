"""Self-augmentation between the coarse and fine stages.

Geometry augmentation keeps only each coarse Gaussian's position and its
view-independent color (the DC spherical-harmonics term); opacity, scale,
rotation, and higher-order coefficients are deliberately dropped so that the
fine stage re-learns them from scratch. Perceptual view augmentation renders
the coarse model from novel cameras interpolated between the calibrated
reference poses and feeds those images back as pseudo supervision; since the
renders carry no real-world background, they need no object masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SH_C0, Camera, GaussianCloud
from .errors import ContractViolationError, EmptyCloudError, InvalidParameterError
from .losses import DepthMap
from .parallel import ordered_map
from .rasterizer import render

REFERENCE = "reference"
PSEUDO = "pseudo"


@dataclass
class ViewRecord:
    """One posed image, optionally with an object mask and a depth map."""

    image: np.ndarray
    camera: Camera
    object_mask: np.ndarray | None = None
    depth: DepthMap | None = None
    origin: str = REFERENCE

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise InvalidParameterError(
                f"image shape {self.image.shape} does not match camera "
                f"{(self.camera.height, self.camera.width, 3)}")
        if self.object_mask is not None:
            self.object_mask = np.asarray(self.object_mask, dtype=bool)
            if self.object_mask.shape != self.image.shape[:2]:
                raise InvalidParameterError("object mask shape does not match image")
        if self.depth is not None and self.depth.values.shape != self.image.shape[:2]:
            raise InvalidParameterError("depth shape does not match image")
        if self.origin not in (REFERENCE, PSEUDO):
            raise InvalidParameterError(f"unknown view origin {self.origin!r}")
        if self.origin == PSEUDO and self.object_mask is not None:
            raise InvalidParameterError("pseudo views never carry object masks")


@dataclass
class ViewSet:
    """Ordered view collection; references first, pseudo views appended."""

    records: list[ViewRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_reference(self) -> int:
        return sum(1 for r in self.records if r.origin == REFERENCE)

    @property
    def n_pseudo(self) -> int:
        return sum(1 for r in self.records if r.origin == PSEUDO)

    def cameras(self) -> list[Camera]:
        return [r.camera for r in self.records]


@dataclass
class PointSet:
    """Positions plus RGB colors: the geometry handed to the fine stage."""

    positions: np.ndarray
    colors: np.ndarray


def geometry_augment(coarse: GaussianCloud) -> PointSet:
    """Extract position + DC color per coarse Gaussian, dropping everything else."""
    if len(coarse) == 0:
        raise EmptyCloudError("geometry augmentation needs a nonempty coarse cloud")
    colors = np.clip(0.5 + SH_C0 * coarse.sh[:, 0, :], 0.0, 1.0)
    return PointSet(positions=coarse.centers.copy(), colors=colors)


def slerp_arc_point(start: np.ndarray, end: np.ndarray, centroid: np.ndarray,
                    t: float) -> np.ndarray:
    """Point at parameter t on the great-circle arc between two orbit positions.

    Directions from the centroid are spherically interpolated; the radius is
    interpolated linearly. t = 0 reproduces ``start`` and t = 1 ``end``.
    """
    u = np.asarray(start, dtype=np.float64) - centroid
    v = np.asarray(end, dtype=np.float64) - centroid
    ru = np.linalg.norm(u)
    rv = np.linalg.norm(v)
    if ru < 1e-12 or rv < 1e-12:
        raise InvalidParameterError("camera center coincides with the orbit centroid")
    u_hat, v_hat = u / ru, v / rv
    dot = float(np.clip(u_hat @ v_hat, -1.0, 1.0))
    omega = np.arccos(dot)
    if omega < 1e-8:
        direction = (1.0 - t) * u_hat + t * v_hat
        direction /= np.linalg.norm(direction)
    elif omega > np.pi - 1e-8:
        # Antipodal endpoints: the great circle is ambiguous, so rotate
        # through a deterministic perpendicular axis.
        axis = np.zeros(3)
        axis[int(np.argmin(np.abs(u_hat)))] = 1.0
        perp = np.cross(u_hat, axis)
        perp /= np.linalg.norm(perp)
        direction = np.cos(np.pi * t) * u_hat + np.sin(np.pi * t) * perp
    else:
        direction = (np.sin((1.0 - t) * omega) * u_hat + np.sin(t * omega) * v_hat) / np.sin(omega)
    radius = (1.0 - t) * ru + t * rv
    return centroid + radius * direction


def sample_novel_cameras(ref_cams: list[Camera], n_prime: int, seed: int) -> list[Camera]:
    """Novel cameras along the arcs between azimuth-consecutive reference poses.

    Positions are spherically interpolated about the centroid of the
    reference camera centers at evenly spaced parameters (endpoints
    excluded); each camera is re-aimed at the centroid with the up vector and
    intrinsics of the nearest arc endpoint. ``seed`` only picks which arcs
    absorb the remainder when ``n_prime`` does not divide evenly.
    """
    if len(ref_cams) < 2:
        raise ContractViolationError("need at least 2 reference cameras to interpolate")
    if n_prime == 0:
        return []
    centers = np.stack([c.center for c in ref_cams])
    centroid = centers.mean(axis=0)
    rel = centers - centroid
    azimuth = np.arctan2(rel[:, 1], rel[:, 0])
    ring = np.argsort(azimuth, kind="stable")

    n_arcs = len(ref_cams)
    per_arc = np.full(n_arcs, n_prime // n_arcs, dtype=np.int64)
    remainder = n_prime % n_arcs
    if remainder:
        rng = np.random.default_rng(seed)
        per_arc[rng.choice(n_arcs, size=remainder, replace=False)] += 1

    novel = []
    for a in range(n_arcs):
        cam0 = ref_cams[ring[a]]
        cam1 = ref_cams[ring[(a + 1) % n_arcs]]
        m = int(per_arc[a])
        for j in range(1, m + 1):
            t = j / (m + 1)
            pos = slerp_arc_point(cam0.center, cam1.center, centroid, t)
            src = cam0 if t <= 0.5 else cam1
            novel.append(Camera.look_at(
                position=pos, target=centroid, up=src.up_world,
                width=src.width, height=src.height,
                fx=src.fx, fy=src.fy, cx=src.cx, cy=src.cy,
            ))
    return novel


def perceptual_augment(coarse_model: GaussianCloud, novel_cams: list[Camera],
                       background) -> list[ViewRecord]:
    """Render the coarse model at the novel cameras as pseudo reference views."""
    if len(coarse_model) == 0:
        raise EmptyCloudError("perceptual augmentation needs a trained coarse model")

    def render_one(cam: Camera) -> ViewRecord:
        out = render(coarse_model, cam, background)
        return ViewRecord(image=out.color, camera=cam, origin=PSEUDO)

    return ordered_map(render_one, novel_cams)


def build_fine_viewset(refs: ViewSet, pseudos: list[ViewRecord]) -> ViewSet:
    """Union of reference and pseudo views, references first, order preserved."""
    return ViewSet(records=list(refs.records) + list(pseudos))
