"""Training losses and evaluation metrics.

Color supervision combines a mean absolute difference with a structural
dissimilarity term (1 - SSIM, 11x11 Gaussian window, sigma 1.5, constants
C1 = 0.01^2 and C2 = 0.03^2). SSIM statistics are evaluated where the window
fits entirely inside the image and averaged over that region and the three
channels, so inputs must be at least 11 pixels on each side.

Geometry supervision is an L1 between depth maps that are first normalized by
median subtraction and division by the mean absolute deviation, making the
loss invariant to positive affine rescaling of either input. The normalizing
statistics are differentiated exactly (including the median subgradient) so
the analytic gradients match finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractViolationError, EmptyDepthError, InvalidParameterError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
#: Floor for the mean-absolute-deviation denominator; below it a depth map is
#: treated as constant and normalizes to zeros.
DEPTH_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the total loss: (1-s)*L1 + s*DSSIM + d*Depth."""

    lambda_ssim: float = 0.2
    lambda_d: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise InvalidParameterError("lambda_ssim must lie in [0, 1]")
        if self.lambda_d < 0.0:
            raise InvalidParameterError("lambda_d must be >= 0")


@dataclass
class DepthMap:
    """Depth values on an arbitrary affine scale plus a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise InvalidParameterError("values and valid must be equal-shaped 2D arrays")
        if not np.all(np.isfinite(self.values[self.valid])):
            raise InvalidParameterError("non-finite depth at a valid pixel")

    @classmethod
    def full(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values=values, valid=np.ones(values.shape, dtype=bool))


def _check_images(x: np.ndarray, ref: np.ndarray) -> None:
    if x.shape != ref.shape:
        raise ContractViolationError(f"image shapes differ: {x.shape} vs {ref.shape}")
    if x.ndim != 3 or x.shape[2] != 3:
        raise ContractViolationError(f"expected (H, W, 3) images, got {x.shape}")


def loss_l1(x, x_ref):
    """Mean absolute difference and its gradient sign(x - ref) / count."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    _check_images(x, x_ref)
    diff = x - x_ref
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


def _ssim_kernel() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (offsets / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filt(img: np.ndarray) -> np.ndarray:
    k = _ssim_kernel()
    out = correlate1d(img, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


def _ssim_terms(x: np.ndarray, x_ref: np.ndarray):
    mu_x = _filt(x)
    mu_y = _filt(x_ref)
    g_xx = _filt(x * x)
    g_yy = _filt(x_ref * x_ref)
    g_xy = _filt(x * x_ref)
    sig_x = g_xx - mu_x * mu_x
    sig_y = g_yy - mu_y * mu_y
    sig_xy = g_xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sig_xy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sig_x + sig_y + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2, a1 * a2 / (b1 * b2)


def loss_dssim(x, x_ref):
    """Structural dissimilarity 1 - mean SSIM, with its analytic gradient."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    _check_images(x, x_ref)
    h, w = x.shape[:2]
    half = SSIM_WINDOW // 2
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractViolationError(f"images must be at least {SSIM_WINDOW}px per side for SSIM")

    mu_x, mu_y, a1, a2, b1, b2, smap = _ssim_terms(x, x_ref)
    interior = np.zeros_like(smap)
    interior[half:h - half, half:w - half] = 1.0
    count = interior.sum()
    value = 1.0 - float(np.sum(smap * interior) / count)

    # Adjoint of the windowed statistics: each stat is a correlation of the
    # input (or its square / cross product), so the chain rule filters the
    # per-pixel sensitivities back with the same symmetric kernel.
    w_s = -interior / count
    inv_bb = 1.0 / (b1 * b2)
    ds_dmu = 2.0 * mu_y * (a2 - a1) * inv_bb + 2.0 * mu_x * smap * (1.0 / b2 - 1.0 / b1)
    ds_dgxx = -smap / b2
    ds_dgxy = 2.0 * a1 * inv_bb
    grad = (_filt(w_s * ds_dmu)
            + 2.0 * x * _filt(w_s * ds_dgxx)
            + x_ref * _filt(w_s * ds_dgxy))
    return value, grad


def ssim_metric(x, x_ref) -> float:
    """Mean SSIM over the fully-windowed interior, channels averaged."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    _check_images(x, x_ref)
    h, w = x.shape[:2]
    half = SSIM_WINDOW // 2
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractViolationError(f"images must be at least {SSIM_WINDOW}px per side for SSIM")
    smap = _ssim_terms(x, x_ref)[-1]
    return float(np.mean(smap[half:h - half, half:w - half]))


def psnr(x, x_ref) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; inf when equal."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ContractViolationError(f"image shapes differ: {x.shape} vs {x_ref.shape}")
    mse = float(np.mean((x - x_ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _median_weights(vals: np.ndarray) -> np.ndarray:
    """Subgradient of the median with respect to each sample."""
    m = vals.shape[0]
    order = np.argsort(vals, kind="stable")
    weights = np.zeros(m)
    if m % 2 == 1:
        weights[order[m // 2]] = 1.0
    else:
        weights[order[m // 2 - 1]] = 0.5
        weights[order[m // 2]] = 0.5
    return weights


def normalize_depth(d: DepthMap) -> DepthMap:
    """Median-shift and mean-absolute-deviation-scale over valid pixels."""
    m = int(d.valid.sum())
    if m == 0:
        raise EmptyDepthError("depth map has no valid pixels")
    vals = d.values[d.valid]
    med = float(np.median(vals))
    mad = float(np.mean(np.abs(vals - med)))
    out = np.full(d.values.shape, np.nan)
    out[d.valid] = 0.0 if mad < DEPTH_EPS else (vals - med) / mad
    return DepthMap(values=out, valid=d.valid.copy())


def loss_depth(d_render: DepthMap, d_mono: DepthMap):
    """Scale/shift-invariant depth L1; gradient flows only into ``d_render``.

    Both maps are normalized over their own valid pixels; the L1 is averaged
    over the intersection of the masks. An empty intersection skips the term
    (zero loss and gradient) with a logged warning, since pseudo-views may
    carry no depth.
    """
    if d_render.values.shape != d_mono.values.shape:
        raise ContractViolationError("depth map shapes differ")
    both = d_render.valid & d_mono.valid
    k = int(both.sum())
    grad = np.zeros(d_render.values.shape)
    if k == 0:
        logger.warning("depth loss skipped: empty valid-mask intersection")
        return 0.0, grad

    norm_r = normalize_depth(d_render)
    norm_m = normalize_depth(d_mono)
    diff = norm_r.values[both] - norm_m.values[both]
    value = float(np.mean(np.abs(diff)))

    vals = d_render.values[d_render.valid]
    med = float(np.median(vals))
    mad = float(np.mean(np.abs(vals - med)))
    if mad < DEPTH_EPS:
        return value, grad  # constant-depth guard: normalization is locally flat

    # Exact chain rule through the median and the mean absolute deviation.
    m = vals.shape[0]
    med_w = _median_weights(vals)
    dev_sign = np.sign(vals - med)
    s_grad = (dev_sign - med_w * dev_sign.sum()) / m

    sgn_map = np.sign(norm_r.values - norm_m.values)
    sgn_map[~both] = 0.0
    sgn_valid = sgn_map[d_render.valid]
    a = sgn_valid.sum()
    b = float(np.sum(sgn_valid * (vals - med)))

    g_valid = sgn_valid / (k * mad) - med_w * (a / (k * mad)) - s_grad * (b / (k * mad * mad))
    grad[d_render.valid] = g_valid
    return value, grad


@dataclass
class TotalLoss:
    """Weighted combination of the color and depth objectives."""

    value: float
    l1: float
    dssim: float
    depth: float
    grad_image: np.ndarray
    grad_depth: np.ndarray | None


def loss_total(x, x_ref, d_render: DepthMap | None, d_mono: DepthMap | None,
               weights: LossWeights) -> TotalLoss:
    """Evaluate (1-s)*L1 + s*DSSIM + d*Depth with the matching gradients.

    The depth term is included only when both depth maps are present and
    ``lambda_d`` is positive; otherwise it contributes zero.
    """
    l1_val, l1_grad = loss_l1(x, x_ref)
    grad_image = (1.0 - weights.lambda_ssim) * l1_grad
    dssim_val = 0.0
    if weights.lambda_ssim > 0.0:
        dssim_val, dssim_grad = loss_dssim(x, x_ref)
        grad_image += weights.lambda_ssim * dssim_grad

    depth_val = 0.0
    grad_depth = None
    if weights.lambda_d > 0.0 and d_render is not None and d_mono is not None:
        depth_val, depth_grad = loss_depth(d_render, d_mono)
        grad_depth = weights.lambda_d * depth_grad

    value = ((1.0 - weights.lambda_ssim) * l1_val + weights.lambda_ssim * dssim_val
             + weights.lambda_d * depth_val)
    return TotalLoss(value=value, l1=l1_val, dssim=dssim_val, depth=depth_val,
                     grad_image=grad_image, grad_depth=grad_depth)
