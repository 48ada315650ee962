"""Gaussian primitive, parameter activations, SH color, and camera projection.

Conventions used throughout the package:

* World and camera frames are right-handed. ``world_to_camera`` maps world
  points into a frame with +x right, +y down, +z forward, so a point is in
  front of the camera when its camera-space z is positive.
* Pixel ``(row r, col c)`` samples the continuous image plane at
  ``(x=c, y=r)``; the principal point ``(cx, cy)`` lives in the same units.
* Stored Gaussian parameters are unconstrained: opacity through a sigmoid,
  per-axis scale through an exp, and the rotation quaternion is renormalized
  on every use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidParameterError

# Real spherical harmonics constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
)

#: Default near-plane distance for projection culling, world units.
NEAR_PLANE = 0.01
#: Default 2D covariance low-pass dilation, squared pixels.
LOWPASS_2D = 0.3


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def inverse_sigmoid(p):
    """Logit; inverse of :func:`sigmoid` on (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions; raises if any input has (near-)zero norm."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(q)) or np.any(norm < 1e-12):
        raise InvalidParameterError("quaternion with non-finite entries or zero norm")
    return q / norm


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) as (w, x, y, z) to rotation matrices (..., 3, 3)."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[..., 0, 1] = 2.0 * (x * y - w * z)
    rot[..., 0, 2] = 2.0 * (x * z + w * y)
    rot[..., 1, 0] = 2.0 * (x * y + w * z)
    rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[..., 1, 2] = 2.0 * (y * z - w * x)
    rot[..., 2, 0] = 2.0 * (x * z - w * y)
    rot[..., 2, 1] = 2.0 * (y * z + w * x)
    rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def covariance_from_params(quaternion, scale) -> np.ndarray:
    """Build the 3x3 world covariance R diag(s^2) R^T of one Gaussian.

    ``quaternion`` is renormalized before use. The result is symmetric
    positive semi-definite with eigenvalues equal to the squared scales.
    """
    quaternion = np.asarray(quaternion, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if quaternion.shape != (4,) or scale.shape != (3,):
        raise InvalidParameterError("expected quaternion (4,) and scale (3,)")
    if not (np.all(np.isfinite(quaternion)) and np.all(np.isfinite(scale))):
        raise InvalidParameterError("non-finite quaternion or scale")
    if np.any(scale <= 0.0):
        raise InvalidParameterError("scale components must be strictly positive")
    rot = quaternions_to_rotations(quaternion)
    cov = (rot * scale[np.newaxis, :] ** 2) @ rot.T
    return 0.5 * (cov + cov.T)


def sh_degree_from_count(count: int) -> int:
    """Map a coefficient count (d+1)^2 back to its degree d in 0..3."""
    degree = int(round(np.sqrt(count))) - 1
    if degree < 0 or degree > 3 or (degree + 1) ** 2 != count:
        raise InvalidParameterError(f"sh coefficient count {count} is not (d+1)^2 for d in 0..3")
    return degree


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values Y_l at unit directions (N, 3) -> (N, (d+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    count = (degree + 1) ** 2
    basis = np.empty((n, count), dtype=np.float64)
    basis[:, 0] = SH_C0
    if degree < 1:
        return basis
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis[:, 1] = -SH_C1 * y
    basis[:, 2] = SH_C1 * z
    basis[:, 3] = -SH_C1 * x
    if degree < 2:
        return basis
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    basis[:, 4] = SH_C2[0] * xy
    basis[:, 5] = SH_C2[1] * yz
    basis[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    basis[:, 7] = SH_C2[3] * xz
    basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return basis
    basis[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    basis[:, 10] = SH_C3[1] * xy * z
    basis[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    basis[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    basis[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    basis[:, 14] = SH_C3[5] * z * (xx - yy)
    basis[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return basis


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d(basis)/d(dir) at unit directions: (N, 3) -> (N, (d+1)^2, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    count = (degree + 1) ** 2
    grad = np.zeros((n, count, 3), dtype=np.float64)
    if degree < 1:
        return grad
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    grad[:, 1, 1] = -SH_C1
    grad[:, 2, 2] = SH_C1
    grad[:, 3, 0] = -SH_C1
    if degree < 2:
        return grad
    grad[:, 4, 0] = SH_C2[0] * y
    grad[:, 4, 1] = SH_C2[0] * x
    grad[:, 5, 1] = SH_C2[1] * z
    grad[:, 5, 2] = SH_C2[1] * y
    grad[:, 6, 0] = SH_C2[2] * (-2.0 * x)
    grad[:, 6, 1] = SH_C2[2] * (-2.0 * y)
    grad[:, 6, 2] = SH_C2[2] * (4.0 * z)
    grad[:, 7, 0] = SH_C2[3] * z
    grad[:, 7, 2] = SH_C2[3] * x
    grad[:, 8, 0] = SH_C2[4] * (2.0 * x)
    grad[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree < 3:
        return grad
    xx, yy, zz = x * x, y * y, z * z
    grad[:, 9, 0] = SH_C3[0] * 6.0 * x * y
    grad[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    grad[:, 10, 0] = SH_C3[1] * y * z
    grad[:, 10, 1] = SH_C3[1] * x * z
    grad[:, 10, 2] = SH_C3[1] * x * y
    grad[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
    grad[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    grad[:, 11, 2] = SH_C3[2] * 8.0 * y * z
    grad[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
    grad[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
    grad[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    grad[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    grad[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
    grad[:, 13, 2] = SH_C3[4] * 8.0 * x * z
    grad[:, 14, 0] = SH_C3[5] * 2.0 * x * z
    grad[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
    grad[:, 14, 2] = SH_C3[5] * (xx - yy)
    grad[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    grad[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return grad


def eval_sh_colors(sh: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch color evaluation: 0.5 + sum_l c_l Y_l(dir), clamped to [0, 1].

    Returns ``(colors (N, 3), clamped (N, 3) bool)``; the clamp mask marks
    channels whose raw value fell outside [0, 1] (their gradient is zero).
    """
    degree = sh_degree_from_count(sh.shape[1])
    basis = sh_basis(degree, dirs)
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, sh)
    clamped = (raw < 0.0) | (raw > 1.0)
    return np.clip(raw, 0.0, 1.0), clamped


def sh_to_rgb(sh, view_dir) -> np.ndarray:
    """Color of one SH coefficient stack (K, 3) seen from a unit direction."""
    sh = np.asarray(sh, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if sh.ndim != 2 or sh.shape[1] != 3:
        raise InvalidParameterError(f"sh must have shape (K, 3), got {sh.shape}")
    sh_degree_from_count(sh.shape[0])
    if view_dir.shape != (3,) or abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise InvalidParameterError("view_dir must be a unit 3-vector")
    colors, _ = eval_sh_colors(sh[np.newaxis], view_dir[np.newaxis])
    return colors[0]


def rgb_to_sh_dc(rgb) -> np.ndarray:
    """Inverse of the DC color convention: coefficients so that color == rgb."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid world-to-camera pose.

    ``rotation`` (3x3) and ``translation`` (3,) map world points ``p`` to the
    camera frame via ``rotation @ p + translation``; +z looks forward.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("camera dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidParameterError("rotation must be (3, 3) and translation (3,)")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidParameterError("non-finite camera pose")
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
            raise InvalidParameterError("camera rotation is not orthonormal within 1e-6")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def up_world(self) -> np.ndarray:
        """World direction of the camera's up axis (image y points down)."""
        return -self.rotation[1]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @staticmethod
    def look_at(position, target, up, width, height, fx, fy, cx=None, cy=None) -> "Camera":
        """Camera at ``position`` aimed at ``target`` with a preferred up vector."""
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise InvalidParameterError("look_at position coincides with target")
        forward = forward / norm
        down = -np.asarray(up, dtype=np.float64)
        right = np.cross(down, forward)
        if np.linalg.norm(right) < 1e-8:
            # Up is collinear with the view direction; pick any safe fallback.
            alt = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
            right = np.cross(-alt, forward)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return Camera(
            width=int(width),
            height=int(height),
            fx=float(fx),
            fy=float(fy),
            cx=float(cx) if cx is not None else (width - 1) / 2.0,
            cy=float(cy) if cy is not None else (height - 1) / 2.0,
            rotation=rot,
            translation=-rot @ position,
        )


@dataclass
class Gaussian:
    """One anisotropic Gaussian in unconstrained parameterization."""

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass(frozen=True)
class ScreenGaussian:
    """Screen-space footprint of a projected Gaussian."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def project_gaussian(g: Gaussian, cam: Camera, lowpass: float = LOWPASS_2D,
                     near: float = NEAR_PLANE) -> ScreenGaussian | None:
    """Project one Gaussian; returns None when culled by the near plane."""
    center = np.asarray(g.center, dtype=np.float64)
    t = cam.rotation @ center + cam.translation
    if t[2] <= near:
        return None
    tx, ty, tz = t
    mean2d = np.array([cam.cx + cam.fx * tx / tz, cam.cy + cam.fy * ty / tz])
    jac = np.array([
        [cam.fx / tz, 0.0, -cam.fx * tx / tz ** 2],
        [0.0, cam.fy / tz, -cam.fy * ty / tz ** 2],
    ])
    cov3d = covariance_from_params(np.asarray(g.rotation), np.exp(np.asarray(g.log_scale)))
    cov_cam = cam.rotation @ cov3d @ cam.rotation.T
    cov2d = jac @ cov_cam @ jac.T + lowpass * np.eye(2)
    return ScreenGaussian(mean2d=mean2d, cov2d=0.5 * (cov2d + cov2d.T), depth=float(tz))


class GaussianCloud:
    """Ordered set of Gaussians stored as parallel parameter arrays.

    Arrays are float64 and owned by the cloud: ``centers (P, 3)``,
    ``rotations (P, 4)`` unnormalized quaternions, ``log_scales (P, 3)``,
    ``opacity_logits (P,)``, ``sh (P, (d+1)^2, 3)``.
    """

    __slots__ = ("centers", "rotations", "log_scales", "opacity_logits", "sh", "sh_degree")

    def __init__(self, centers, rotations, log_scales, opacity_logits, sh, sh_degree: int):
        self.centers = np.array(centers, dtype=np.float64).reshape(-1, 3)
        p = self.centers.shape[0]
        self.rotations = np.array(rotations, dtype=np.float64).reshape(p, 4)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(p, 3)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(p)
        count = (int(sh_degree) + 1) ** 2
        self.sh = np.array(sh, dtype=np.float64).reshape(p, count, 3)
        self.sh_degree = int(sh_degree)
        if not 0 <= self.sh_degree <= 3:
            raise InvalidParameterError(f"sh_degree must be in 0..3, got {sh_degree}")

    @classmethod
    def empty(cls, sh_degree: int) -> "GaussianCloud":
        count = (sh_degree + 1) ** 2
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0,)), np.zeros((0, count, 3)), sh_degree)

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int) -> "GaussianCloud":
        if not gaussians:
            return cls.empty(sh_degree)
        return cls(
            np.stack([np.asarray(g.center, dtype=np.float64) for g in gaussians]),
            np.stack([np.asarray(g.rotation, dtype=np.float64) for g in gaussians]),
            np.stack([np.asarray(g.log_scale, dtype=np.float64) for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            np.stack([np.asarray(g.sh, dtype=np.float64) for g in gaussians]),
            sh_degree,
        )

    def __len__(self) -> int:
        return self.centers.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            center=self.centers[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(),
        )

    def gaussians(self) -> list[Gaussian]:
        return [self.gaussian(i) for i in range(len(self))]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.centers.copy(), self.rotations.copy(),
                             self.log_scales.copy(), self.opacity_logits.copy(),
                             self.sh.copy(), self.sh_degree)

    def select(self, indices) -> "GaussianCloud":
        """New cloud containing the given rows, in the given order."""
        return GaussianCloud(self.centers[indices], self.rotations[indices],
                             self.log_scales[indices], self.opacity_logits[indices],
                             self.sh[indices], self.sh_degree)

    @staticmethod
    def concatenate(clouds) -> "GaussianCloud":
        clouds = list(clouds)
        if not clouds:
            raise ContractViolationError("concatenate needs at least one cloud")
        degree = clouds[0].sh_degree
        if any(c.sh_degree != degree for c in clouds):
            raise ContractViolationError("all clouds must share sh_degree")
        return GaussianCloud(
            np.concatenate([c.centers for c in clouds]),
            np.concatenate([c.rotations for c in clouds]),
            np.concatenate([c.log_scales for c in clouds]),
            np.concatenate([c.opacity_logits for c in clouds]),
            np.concatenate([c.sh for c in clouds]),
            degree,
        )

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)
