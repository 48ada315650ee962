"""Differentiable software rasterizer for Gaussian clouds.

Forward pass: every Gaussian is projected to a screen-space ellipse, culled
against the near plane, and splatted front-to-back. At a pixel with offset
``d`` from the projected mean, a Gaussian contributes

    alpha = min(0.99, opacity * exp(-0.5 * d^T conic d))

restricted to its exact 3-sigma ellipse (``d^T conic d <= 9``). Contributions
with ``alpha < 1/255`` are skipped entirely (no color, no attenuation), and a
pixel stops compositing once its transmittance drops below 1e-4. Color is
``sum c_i alpha_i T_i + background * T_final`` with ``T_i`` the product of
``(1 - alpha_j)`` over nearer processed Gaussians; depth is the analogous
unnormalized expected depth ``sum z_i alpha_i T_i``.

Backward pass: exact reverse-mode differentiation of the forward compositing
through the 2D falloff, projection, covariance construction, activations, and
SH color, using per-pixel suffix sums. Work is partitioned into fixed row
bands whose partial gradient buffers are merged in band index order, so the
result is bit-identical for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Camera,
    GaussianCloud,
    eval_sh_colors,
    quaternions_to_rotations,
    sigmoid,
    LOWPASS_2D,
    NEAR_PLANE,
)
from .errors import ContractViolationError, RenderError
from .parallel import band_edges, ordered_map

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_CUTOFF = 1e-4
MAX_MAHAL_SQ = 9.0


@dataclass
class GradientBuffer:
    """Per-Gaussian loss partials, shaped like the cloud's parameter arrays.

    ``mean2d`` holds the screen-space positional gradient of each Gaussian
    (zeros when invisible); densification statistics consume it.
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray

    @classmethod
    def zeros(cls, point_count: int, sh_count: int) -> "GradientBuffer":
        return cls(
            centers=np.zeros((point_count, 3)),
            rotations=np.zeros((point_count, 4)),
            log_scales=np.zeros((point_count, 3)),
            opacity_logits=np.zeros(point_count),
            sh=np.zeros((point_count, sh_count, 3)),
            mean2d=np.zeros((point_count, 2)),
        )


@dataclass
class RenderCache:
    """Screen-space state retained by the forward pass for the backward pass."""

    point_count: int
    sh_count: int
    width: int
    height: int
    background: np.ndarray
    lowpass: float
    near: float
    # Per visible Gaussian, in front-to-back compositing order.
    rows: np.ndarray        # cloud row index
    mean2d: np.ndarray      # (V, 2)
    conic: np.ndarray       # (V, 3) upper triangle (a, b, c) of inv cov2d
    cov2d: np.ndarray       # (V, 3) upper triangle of cov2d
    depth: np.ndarray       # (V,) camera-space z
    color: np.ndarray       # (V, 3)
    clamped: np.ndarray     # (V, 3) bool, color channels pinned by the clamp
    radius: np.ndarray      # (V,) 3-sigma screen radius, pixels
    # Flat splat list, sorted by pixel id then compositing order.
    pair_pix: np.ndarray    # (Q,) row * width + col
    pair_vis: np.ndarray    # (Q,) index into the per-visible arrays
    pair_alpha: np.ndarray  # (Q,) clipped alpha
    pair_tb: np.ndarray     # (Q,) transmittance before this splat
    pair_processed: np.ndarray  # (Q,) bool
    pair_clipped: np.ndarray    # (Q,) bool, alpha hit the 0.99 clip
    band_slices: list       # [(start, end)] into the pair arrays per row band


@dataclass
class RenderOutput:
    """Rendered color/depth/alpha images plus the backward-pass cache."""

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    cache: RenderCache


def _validate_cloud_finite(cloud: GaussianCloud) -> None:
    for name, arr in (("center", cloud.centers), ("rotation", cloud.rotations),
                      ("log_scale", cloud.log_scales), ("opacity", cloud.opacity_logits),
                      ("sh", cloud.sh)):
        finite = np.isfinite(arr)
        if not finite.all():
            row = int(np.argwhere(~finite.reshape(len(cloud), -1).all(axis=1))[0, 0])
            raise RenderError(f"non-finite {name} parameter in gaussian {row}")


def _camera_cov(cloud: GaussianCloud, cam: Camera, rows: np.ndarray):
    """World covariances of the given rows, rotated into the camera frame."""
    rot = quaternions_to_rotations(cloud.rotations[rows])
    s2 = np.exp(2.0 * cloud.log_scales[rows])
    cov3d = np.matmul(rot * s2[:, None, :], rot.transpose(0, 2, 1))
    return rot, s2, np.matmul(np.matmul(cam.rotation, cov3d), cam.rotation.T)


def _jacobian_terms(cam: Camera, t: np.ndarray):
    """Nonzero entries (j00, j02, j11, j12) of the perspective Jacobian."""
    z = t[:, 2]
    return cam.fx / z, -cam.fx * t[:, 0] / z**2, cam.fy / z, -cam.fy * t[:, 1] / z**2


def _project_visible(cloud: GaussianCloud, cam: Camera, lowpass: float, near: float):
    """Project the cloud; returns per-visible arrays in front-to-back order."""
    centers = cloud.centers
    t = centers @ cam.rotation.T + cam.translation
    opac = sigmoid(cloud.opacity_logits)
    vis = (t[:, 2] > near) & (opac >= ALPHA_MIN)
    rows = np.flatnonzero(vis)
    if rows.size == 0:
        return None
    t = t[rows]
    z = t[:, 2]

    mean2d = np.empty((rows.size, 2))
    mean2d[:, 0] = cam.cx + cam.fx * t[:, 0] / z
    mean2d[:, 1] = cam.cy + cam.fy * t[:, 1] / z

    _, _, cov_cam = _camera_cov(cloud, cam, rows)

    # cov2d = J V J^T exploiting the sparsity of J = [[j00,0,j02],[0,j11,j12]].
    j00, j02, j11, j12 = _jacobian_terms(cam, t)
    v00, v01, v02 = cov_cam[:, 0, 0], cov_cam[:, 0, 1], cov_cam[:, 0, 2]
    v11, v12, v22 = cov_cam[:, 1, 1], cov_cam[:, 1, 2], cov_cam[:, 2, 2]
    a = j00 * j00 * v00 + 2.0 * j00 * j02 * v02 + j02 * j02 * v22 + lowpass
    b = j11 * (j00 * v01 + j02 * v12) + j12 * (j00 * v02 + j02 * v22)
    c = j11 * j11 * v11 + 2.0 * j11 * j12 * v12 + j12 * j12 * v22 + lowpass

    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

    x0 = np.ceil(mean2d[:, 0] - radius).astype(np.int64)
    x1 = np.floor(mean2d[:, 0] + radius).astype(np.int64)
    y0 = np.ceil(mean2d[:, 1] - radius).astype(np.int64)
    y1 = np.floor(mean2d[:, 1] + radius).astype(np.int64)
    np.clip(x0, 0, cam.width - 1, out=x0)
    np.clip(x1, 0, cam.width - 1, out=x1)
    np.clip(y0, 0, cam.height - 1, out=y0)
    np.clip(y1, 0, cam.height - 1, out=y1)
    on_screen = ((mean2d[:, 0] + radius >= 0.0) & (mean2d[:, 0] - radius <= cam.width - 1)
                 & (mean2d[:, 1] + radius >= 0.0) & (mean2d[:, 1] - radius <= cam.height - 1)
                 & (det > 0.0))
    keep = np.flatnonzero(on_screen)
    if keep.size == 0:
        return None

    order = keep[np.argsort(z[keep], kind="stable")]
    inv_det = 1.0 / det[order]
    conic = np.stack([c[order] * inv_det, -b[order] * inv_det, a[order] * inv_det], axis=1)

    dirs = centers[rows[order]] - cam.center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    color, clamped = eval_sh_colors(cloud.sh[rows[order]], dirs)

    return {
        "rows": rows[order],
        "t": t[order],
        "z": z[order],
        "mean2d": mean2d[order],
        "cov2d": np.stack([a[order], b[order], c[order]], axis=1),
        "conic": conic,
        "radius": radius[order],
        "bbox": np.stack([x0[order], x1[order], y0[order], y1[order]], axis=1),
        "opacity": opac[rows[order]],
        "color": color,
        "clamped": clamped,
        "dirs": dirs,
    }


def _build_pairs(proj, width: int):
    """Flatten (gaussian, pixel) pairs inside each 3-sigma ellipse.

    Returns arrays sorted by pixel id, preserving front-to-back order within
    a pixel, plus the per-pair alpha and clip mask.
    """
    bbox = proj["bbox"]
    heights = (bbox[:, 3] - bbox[:, 2] + 1).astype(np.int64)
    n_rows = int(heights.sum())
    if n_rows == 0:
        return None

    # Scanline pass: per (gaussian, image row), solve the 3-sigma ellipse for
    # its column extent. The exact Mahalanobis test below stays authoritative;
    # this only avoids enumerating bounding-box corners.
    row_g = np.repeat(np.arange(len(heights), dtype=np.int32), heights)
    row_off = np.concatenate([[0], np.cumsum(heights)[:-1]])
    row_y = (np.repeat(bbox[:, 2], heights)
             + (np.arange(n_rows, dtype=np.int64) - np.repeat(row_off, heights))).astype(np.int32)
    conic = proj["conic"]
    ca, cb, cc = conic[row_g, 0], conic[row_g, 1], conic[row_g, 2]
    mx, my = proj["mean2d"][row_g, 0], proj["mean2d"][row_g, 1]
    yoff = row_y - my
    disc = MAX_MAHAL_SQ * ca - (ca * cc - cb * cb) * yoff * yoff
    ok = disc > 0.0
    if not ok.any():
        return None
    row_g, row_y, ca, cb, mx, yoff, disc = (
        row_g[ok], row_y[ok], ca[ok], cb[ok], mx[ok], yoff[ok], disc[ok])
    sq = np.sqrt(disc)
    x_lo = np.maximum(np.ceil(mx + (-cb * yoff - sq) / ca), 0.0).astype(np.int32)
    x_hi = np.minimum(np.floor(mx + (-cb * yoff + sq) / ca), width - 1).astype(np.int32)
    counts = (x_hi - x_lo + 1).astype(np.int64)
    ok = counts > 0
    if not ok.any():
        return None
    row_g, row_y, x_lo, counts = row_g[ok], row_y[ok], x_lo[ok], counts[ok]

    total = int(counts.sum())
    pair_off = np.concatenate([[0], np.cumsum(counts)[:-1]])
    px = (np.repeat(x_lo.astype(np.int64), counts)
          + (np.arange(total, dtype=np.int64) - np.repeat(pair_off, counts))).astype(np.int32)
    vis_idx = np.repeat(row_g, counts)
    py = np.repeat(row_y, counts)

    dx = px - proj["mean2d"][vis_idx, 0]
    dy = py - proj["mean2d"][vis_idx, 1]
    mahal = (conic[vis_idx, 0] * dx * dx + 2.0 * conic[vis_idx, 1] * dx * dy
             + conic[vis_idx, 2] * dy * dy)
    alpha = proj["opacity"][vis_idx] * np.exp(-0.5 * mahal)
    keep = (mahal <= MAX_MAHAL_SQ) & (alpha >= ALPHA_MIN)
    if not keep.all():
        vis_idx, px, py, alpha = vis_idx[keep], px[keep], py[keep], alpha[keep]
        if vis_idx.size == 0:
            return None
    pix = py * np.int32(width) + px
    clipped = alpha > ALPHA_MAX
    alpha = np.minimum(alpha, ALPHA_MAX)

    sort = np.argsort(pix, kind="stable")
    return pix[sort], vis_idx[sort], alpha[sort], clipped[sort]


def _segment_starts(pix: np.ndarray) -> np.ndarray:
    starts = np.empty(pix.shape[0], dtype=bool)
    starts[0] = True
    np.not_equal(pix[1:], pix[:-1], out=starts[1:])
    return np.flatnonzero(starts)


def _segment_cumsum(values: np.ndarray, starts: np.ndarray, seg_id: np.ndarray):
    """Inclusive per-segment cumulative sum plus per-segment totals."""
    cs = np.cumsum(values)
    base = np.concatenate([[0.0], cs[starts[1:] - 1]])
    incl = cs - base[seg_id]
    ends = np.concatenate([starts[1:] - 1, [values.shape[0] - 1]])
    totals = incl[ends]
    return incl, totals


def render(cloud: GaussianCloud, cam: Camera, background,
           lowpass: float = LOWPASS_2D, near: float = NEAR_PLANE) -> RenderOutput:
    """Render a cloud to color/depth/alpha images over a constant background."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    _validate_cloud_finite(cloud)
    height, width = cam.height, cam.width
    color_img = np.broadcast_to(background, (height, width, 3)).copy()
    depth_img = np.zeros((height, width))
    alpha_img = np.zeros((height, width))

    cache = RenderCache(
        point_count=len(cloud), sh_count=cloud.sh.shape[1],
        width=width, height=height, background=background,
        lowpass=lowpass, near=near,
        rows=np.zeros(0, dtype=np.int64), mean2d=np.zeros((0, 2)),
        conic=np.zeros((0, 3)), cov2d=np.zeros((0, 3)), depth=np.zeros(0),
        color=np.zeros((0, 3)), clamped=np.zeros((0, 3), dtype=bool),
        radius=np.zeros(0),
        pair_pix=np.zeros(0, dtype=np.int64), pair_vis=np.zeros(0, dtype=np.int64),
        pair_alpha=np.zeros(0), pair_tb=np.zeros(0),
        pair_processed=np.zeros(0, dtype=bool), pair_clipped=np.zeros(0, dtype=bool),
        band_slices=[],
    )

    proj = _project_visible(cloud, cam, lowpass, near) if len(cloud) else None
    pairs = _build_pairs(proj, width) if proj is not None else None
    if pairs is None:
        return RenderOutput(color=color_img, depth=depth_img, alpha=alpha_img, cache=cache)

    pix, vis_idx, alpha, clipped = pairs
    cache.rows = proj["rows"]
    cache.mean2d = proj["mean2d"]
    cache.conic = proj["conic"]
    cache.cov2d = proj["cov2d"]
    cache.depth = proj["z"]
    cache.color = proj["color"]
    cache.clamped = proj["clamped"]
    cache.radius = proj["radius"]
    cache.pair_pix = pix
    cache.pair_vis = vis_idx
    cache.pair_alpha = alpha
    cache.pair_tb = np.empty(pix.shape[0])
    cache.pair_processed = np.empty(pix.shape[0], dtype=bool)
    cache.pair_clipped = clipped

    slices = []
    for row0, row1 in band_edges(height):
        s = np.searchsorted(pix, row0 * width, side="left")
        e = np.searchsorted(pix, row1 * width, side="left")
        slices.append((int(s), int(e)))
    cache.band_slices = slices

    pair_color = proj["color"][vis_idx]
    pair_z = proj["z"][vis_idx]

    def forward_band(bounds):
        s, e = bounds
        if s == e:
            return None
        bpix = pix[s:e]
        balpha = alpha[s:e]
        starts = _segment_starts(bpix)
        seg_id = np.cumsum(np.diff(bpix, prepend=bpix[0] - 1) != 0) - 1
        incl, _ = _segment_cumsum(np.log1p(-balpha), starts, seg_id)
        excl = incl - np.log1p(-balpha)
        tb = np.exp(excl)
        processed = tb >= T_CUTOFF
        cache.pair_tb[s:e] = tb
        cache.pair_processed[s:e] = processed
        weight = np.where(processed, balpha * tb, 0.0)

        seg_pix = bpix[starts]
        seg_color = np.empty((starts.size, 3))
        for ch in range(3):
            seg_color[:, ch] = np.add.reduceat(weight * pair_color[s:e, ch], starts)
        seg_depth = np.add.reduceat(weight * pair_z[s:e], starts)
        log_t_final = np.minimum.reduceat(np.where(processed, incl, np.inf), starts)
        return seg_pix, seg_color, seg_depth, np.exp(log_t_final)

    for result in ordered_map(forward_band, slices):
        if result is None:
            continue
        seg_pix, seg_color, seg_depth, t_final = result
        r, c = np.divmod(seg_pix, width)
        color_img[r, c] = seg_color + background * t_final[:, None]
        depth_img[r, c] = seg_depth
        alpha_img[r, c] = 1.0 - t_final

    return RenderOutput(color=color_img, depth=depth_img, alpha=alpha_img, cache=cache)


def render_backward(cloud: GaussianCloud, cam: Camera, output: RenderOutput,
                    grad_color: np.ndarray, grad_depth: np.ndarray | None = None) -> GradientBuffer:
    """Chain upstream color/depth gradients back to every Gaussian parameter.

    ``output`` must come from a :func:`render` call on the same cloud and
    camera. The reduction order is fixed, so results do not depend on the
    worker count.
    """
    cache = output.cache
    if cache.point_count != len(cloud) or cache.sh_count != cloud.sh.shape[1]:
        raise ContractViolationError("render cache does not match the cloud (count or shape)")
    grad_color = np.asarray(grad_color, dtype=np.float64)
    if grad_color.shape != (cache.height, cache.width, 3):
        raise ContractViolationError(f"grad_color must have shape {(cache.height, cache.width, 3)}")
    if grad_depth is not None:
        grad_depth = np.asarray(grad_depth, dtype=np.float64)
        if grad_depth.shape != (cache.height, cache.width):
            raise ContractViolationError(f"grad_depth must have shape {(cache.height, cache.width)}")

    buf = GradientBuffer.zeros(len(cloud), cloud.sh.shape[1])
    nvis = cache.rows.shape[0]
    if nvis == 0 or cache.pair_pix.shape[0] == 0:
        return buf

    width = cache.width
    uc_flat = grad_color.reshape(-1, 3)
    ud_flat = grad_depth.reshape(-1) if grad_depth is not None else None
    bg_dot = uc_flat @ cache.background
    t_final_flat = (1.0 - output.alpha).reshape(-1)

    pix = cache.pair_pix
    vis = cache.pair_vis
    alpha = cache.pair_alpha
    tb = cache.pair_tb
    processed = cache.pair_processed
    live = processed & ~cache.pair_clipped

    pair_color = cache.color[vis]
    pair_z = cache.depth[vis]
    pair_opac = sigmoid(cloud.opacity_logits[cache.rows])[vis]

    def backward_band(bounds):
        s, e = bounds
        if s == e:
            return None
        bpix = pix[s:e]
        bvis = vis[s:e]
        balpha = alpha[s:e]
        btb = tb[s:e]
        bproc = processed[s:e]
        starts = _segment_starts(bpix)
        seg_id = np.cumsum(np.diff(bpix, prepend=bpix[0] - 1) != 0) - 1

        buc = uc_flat[bpix]
        bcol = pair_color[s:e]
        q_val = buc[:, 0] * bcol[:, 0] + buc[:, 1] * bcol[:, 1] + buc[:, 2] * bcol[:, 2]
        if ud_flat is not None:
            q_val = q_val + ud_flat[bpix] * pair_z[s:e]
        q_val = q_val * btb
        contrib = np.where(bproc, q_val * balpha, 0.0)
        incl, totals = _segment_cumsum(contrib, starts, seg_id)
        suffix = totals[seg_id] - incl
        dalpha = np.where(
            bproc,
            q_val - (suffix + bg_dot[bpix] * t_final_flat[bpix]) / (1.0 - balpha),
            0.0,
        )

        blive = live[s:e]
        dsigma = np.where(blive, dalpha * balpha / pair_opac[s:e], 0.0)
        dg = np.where(blive, dalpha * pair_opac[s:e], 0.0)

        col = bpix % width
        row = bpix // width
        dx = col - cache.mean2d[bvis, 0]
        dy = row - cache.mean2d[bvis, 1]
        conic = cache.conic[bvis]
        vx = conic[:, 0] * dx + conic[:, 1] * dy
        vy = conic[:, 1] * dx + conic[:, 2] * dy
        g_val = balpha / pair_opac[s:e]
        dg_g = dg * g_val
        half = 0.5 * dg_g

        weight = np.where(bproc, balpha * btb, 0.0)
        parts = np.empty((10, bvis.shape[0]))
        parts[0] = buc[:, 0] * weight
        parts[1] = buc[:, 1] * weight
        parts[2] = buc[:, 2] * weight
        parts[3] = (ud_flat[bpix] * weight) if ud_flat is not None else 0.0
        parts[4] = dsigma
        parts[5] = dg_g * vx
        parts[6] = dg_g * vy
        parts[7] = half * vx * vx
        parts[8] = half * vx * vy
        parts[9] = half * vy * vy
        out = np.empty((10, nvis))
        for k in range(10):
            out[k] = np.bincount(bvis, weights=parts[k], minlength=nvis)
        return out

    acc = np.zeros((10, nvis))
    for partial in ordered_map(backward_band, cache.band_slices):
        if partial is not None:
            acc += partial
    dcolor = acc[0:3].T
    dz = acc[3]
    dsigma = acc[4]
    dmean = acc[5:7].T
    g2 = np.empty((nvis, 2, 2))
    g2[:, 0, 0] = acc[7]
    g2[:, 0, 1] = acc[8]
    g2[:, 1, 0] = acc[8]
    g2[:, 1, 1] = acc[9]

    rows = cache.rows
    # Recompute projection intermediates for the visible subset.
    t = cloud.centers[rows] @ cam.rotation.T + cam.translation
    z = t[:, 2]
    rot, s2, v_cam = _camera_cov(cloud, cam, rows)
    j00, j02, j11, j12 = _jacobian_terms(cam, t)

    # mean2d and expected-depth terms into camera-space position.
    dt = np.empty((nvis, 3))
    dt[:, 0] = dmean[:, 0] * j00
    dt[:, 1] = dmean[:, 1] * j11
    dt[:, 2] = dmean[:, 0] * j02 + dmean[:, 1] * j12 + dz

    # cov2d = J V J^T: gradient into J (which depends on t) and into V,
    # written out against the sparse J = [[j00,0,j02],[0,j11,j12]].
    v00, v01, v02 = v_cam[:, 0, 0], v_cam[:, 0, 1], v_cam[:, 0, 2]
    v11, v12, v22 = v_cam[:, 1, 1], v_cam[:, 1, 2], v_cam[:, 2, 2]
    g00, g01, g11 = g2[:, 0, 0], g2[:, 0, 1], g2[:, 1, 1]
    b00 = j00 * v00 + j02 * v02
    b01 = j00 * v01 + j02 * v12
    b02 = j00 * v02 + j02 * v22
    b10 = j11 * v01 + j12 * v02
    b11 = j11 * v11 + j12 * v12
    b12 = j11 * v12 + j12 * v22
    dj00 = 2.0 * (g00 * b00 + g01 * b10)
    dj02 = 2.0 * (g00 * b02 + g01 * b12)
    dj11 = 2.0 * (g01 * b01 + g11 * b11)
    dj12 = 2.0 * (g01 * b02 + g11 * b12)
    dt[:, 0] += dj02 * (-cam.fx / z**2)
    dt[:, 1] += dj12 * (-cam.fy / z**2)
    dt[:, 2] += (dj00 * (-cam.fx / z**2) + dj11 * (-cam.fy / z**2)
                 + dj02 * (2.0 * cam.fx * t[:, 0] / z**3)
                 + dj12 * (2.0 * cam.fy * t[:, 1] / z**3))

    # dV = J^T G2 J (symmetric), then G3 = W^T dV W.
    dv = np.empty((nvis, 3, 3))
    dv[:, 0, 0] = j00 * j00 * g00
    dv[:, 0, 1] = dv[:, 1, 0] = j00 * j11 * g01
    dv[:, 0, 2] = dv[:, 2, 0] = j00 * (g00 * j02 + g01 * j12)
    dv[:, 1, 1] = j11 * j11 * g11
    dv[:, 1, 2] = dv[:, 2, 1] = j11 * (g01 * j02 + g11 * j12)
    dv[:, 2, 2] = j02 * j02 * g00 + 2.0 * j02 * j12 * g01 + j12 * j12 * g11
    g3 = np.matmul(np.matmul(cam.rotation.T, dv), cam.rotation)

    dmu = dt @ cam.rotation

    # Spherical-harmonics color chain (and its view-direction term).
    draw = np.where(cache.clamped, 0.0, dcolor)
    degree = int(round(np.sqrt(cache.sh_count))) - 1
    from .core import sh_basis, sh_basis_grad  # local import avoids cycle at module load

    dirs = cloud.centers[rows] - cam.center
    dist = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs_hat = dirs / dist
    basis = sh_basis(degree, dirs_hat)
    buf.sh[rows] = basis[:, :, None] * draw[:, None, :]
    if degree > 0:
        dbasis = sh_basis_grad(degree, dirs_hat)
        per_basis = np.matmul(cloud.sh[rows], draw[:, :, None])  # (V, K, 1)
        ddir = np.matmul(dbasis.transpose(0, 2, 1), per_basis)[:, :, 0]
        dmu += (ddir - dirs_hat * np.sum(dirs_hat * ddir, axis=1, keepdims=True)) / dist

    # Sigma = R D R^T with D = diag(s^2): scale and quaternion chains.
    g3_rot = np.matmul(g3, rot)
    dlog_scale = 2.0 * s2 * np.sum(rot * g3_rot, axis=1)

    d_rot = 2.0 * g3_rot * s2[:, None, :]
    qn = cloud.rotations[rows]
    q_hat = qn / np.linalg.norm(qn, axis=1, keepdims=True)
    w, x, y, zq = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    a01, a02, a10 = d_rot[:, 0, 1], d_rot[:, 0, 2], d_rot[:, 1, 0]
    a12, a20, a21 = d_rot[:, 1, 2], d_rot[:, 2, 0], d_rot[:, 2, 1]
    a00, a11, a22 = d_rot[:, 0, 0], d_rot[:, 1, 1], d_rot[:, 2, 2]
    dq_hat = np.empty((nvis, 4))
    dq_hat[:, 0] = 2.0 * (-a01 * zq + a02 * y + a10 * zq - a12 * x - a20 * y + a21 * x)
    dq_hat[:, 1] = 2.0 * (a01 * y + a02 * zq + a10 * y - 2.0 * a11 * x
                          - a12 * w + a20 * zq + a21 * w - 2.0 * a22 * x)
    dq_hat[:, 2] = 2.0 * (-2.0 * a00 * y + a01 * x + a02 * w + a10 * x
                          + a12 * zq - a20 * w + a21 * zq - 2.0 * a22 * y)
    dq_hat[:, 3] = 2.0 * (-2.0 * a00 * zq - a01 * w + a02 * x + a10 * w
                          - 2.0 * a11 * zq + a12 * y + a20 * x + a21 * y)
    qnorm = np.linalg.norm(qn, axis=1, keepdims=True)
    dq = (dq_hat - q_hat * np.sum(q_hat * dq_hat, axis=1, keepdims=True)) / qnorm

    opac = sigmoid(cloud.opacity_logits[rows])

    buf.centers[rows] = dmu
    buf.rotations[rows] = dq
    buf.log_scales[rows] = dlog_scale
    buf.opacity_logits[rows] = dsigma * opac * (1.0 - opac)
    buf.mean2d[rows] = dmean
    return buf
