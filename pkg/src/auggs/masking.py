"""Structure-aware masking: random point masks and FPS+kNN patch masks.

Both masks permanently delete the selected Gaussians. The training loop
applies a point-based mask during the coarse stage and a patch-based mask
during the fine stage; deleted points never participate in later
densification because they no longer exist. Sampling is driven entirely by
the caller-provided generator, so identical inputs reproduce identical masks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import GaussianCloud
from .errors import ContractViolationError, InvalidParameterError

logger = logging.getLogger(__name__)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskSchedule:
    """Mask cadence and strength for both training stages.

    ``patch_size`` of None means ceil(P / patch_count) at application time,
    which tiles the current cloud at roughly uniform granularity.
    """

    point_ratio: float = 0.05
    point_gap: int = 500
    patch_ratio: float = 0.10
    patch_gap: int = 1000
    patch_count: int = 64
    patch_size: int | None = None
    seed: int = 0
    min_points: int = 100

    def __post_init__(self):
        if not (0.0 <= self.point_ratio < 1.0 and 0.0 <= self.patch_ratio < 1.0):
            raise InvalidParameterError("mask ratios must lie in [0, 1)")
        if self.point_gap < 1 or self.patch_gap < 1:
            raise InvalidParameterError("mask gaps must be >= 1")
        if self.patch_count < 1:
            raise InvalidParameterError("patch_count must be >= 1")
        if self.patch_size is not None and self.patch_size < 1:
            raise InvalidParameterError("patch_size must be >= 1 when set")


@dataclass
class MaskResult:
    """Outcome of a mask application; ``kept`` maps new rows to old rows."""

    cloud: GaussianCloud
    kept: np.ndarray
    removed: np.ndarray


def point_mask(cloud: GaussianCloud, ratio: float, rng: np.random.Generator,
               min_points: int = 100) -> MaskResult:
    """Remove round(ratio * P) uniformly chosen Gaussians without replacement.

    Skips (returning the cloud unchanged) when the cloud is already at or
    below ``min_points``.
    """
    p = len(cloud)
    all_idx = np.arange(p, dtype=np.int64)
    if p < min_points:
        logger.info("point mask skipped: %d points is below the %d floor", p, min_points)
        return MaskResult(cloud=cloud, kept=all_idx, removed=np.zeros(0, dtype=np.int64))
    n_remove = _round_half_up(ratio * p)
    if n_remove == 0:
        return MaskResult(cloud=cloud, kept=all_idx, removed=np.zeros(0, dtype=np.int64))
    removed = np.sort(rng.choice(p, size=n_remove, replace=False))
    keep_mask = np.ones(p, dtype=bool)
    keep_mask[removed] = False
    kept = all_idx[keep_mask]
    return MaskResult(cloud=cloud.select(kept), kept=kept, removed=removed)


def fps(positions: np.ndarray, count: int, start_index: int) -> np.ndarray:
    """Farthest point sampling: greedily maximize the min distance to chosen centers.

    The first center is ``start_index``; ties are broken toward the lowest
    index. Distances are Euclidean (compared through their squares).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    p = positions.shape[0]
    if not 1 <= count <= p:
        raise ContractViolationError(f"fps needs 1 <= count <= {p}, got {count}")
    if not 0 <= start_index < p:
        raise ContractViolationError(f"start_index {start_index} out of range")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start_index
    min_sq = np.sum((positions - positions[start_index]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(min_sq))
        chosen[i] = nxt
        np.minimum(min_sq, np.sum((positions - positions[nxt]) ** 2, axis=1), out=min_sq)
    return chosen


def knn_patch(positions: np.ndarray, center_indices, k: int) -> np.ndarray:
    """For each center, the k nearest points (itself included), ties by index.

    Returns an array of shape (C, k); patches may overlap.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    p = positions.shape[0]
    if not 1 <= k <= p:
        raise ContractViolationError(f"knn_patch needs 1 <= k <= {p}, got {k}")
    diff = positions[center_indices][:, None, :] - positions[None, :, :]
    dist_sq = np.sum(diff * diff, axis=2)
    order = np.argsort(dist_sq, axis=1, kind="stable")
    return order[:, :k]


def patch_mask(cloud: GaussianCloud, schedule: MaskSchedule,
               rng: np.random.Generator) -> MaskResult:
    """Drop the union of randomly selected FPS+kNN patches.

    Centers come from farthest point sampling seeded at a random start index;
    each patch is the k nearest neighborhood of a center. round(ratio * C)
    patches are chosen uniformly and their member union is removed once. If
    the removal would leave fewer than ``min_points`` Gaussians, selected
    patches are dropped from the end of the selection until the floor holds.
    """
    p = len(cloud)
    all_idx = np.arange(p, dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    if p < schedule.min_points:
        logger.info("patch mask skipped: %d points is below the %d floor", p, schedule.min_points)
        return MaskResult(cloud=cloud, kept=all_idx, removed=empty)

    c = min(schedule.patch_count, p)
    k = schedule.patch_size if schedule.patch_size is not None else math.ceil(p / c)
    k = min(k, p)
    n_select = _round_half_up(schedule.patch_ratio * c)
    start = int(rng.integers(p))
    selected = rng.choice(c, size=n_select, replace=False) if n_select else empty
    if n_select == 0:
        return MaskResult(cloud=cloud, kept=all_idx, removed=empty)

    centers = fps(cloud.centers, c, start)
    patches = knn_patch(cloud.centers, centers, k)

    removed = empty
    while len(selected):
        union = np.unique(patches[selected].ravel())
        if p - union.size >= schedule.min_points:
            removed = union
            break
        selected = selected[:-1]
        logger.info("patch mask truncated to %d patches to keep >= %d points",
                    len(selected), schedule.min_points)
    if removed.size == 0:
        return MaskResult(cloud=cloud, kept=all_idx, removed=empty)
    keep_mask = np.ones(p, dtype=bool)
    keep_mask[removed] = False
    kept = all_idx[keep_mask]
    return MaskResult(cloud=cloud.select(kept), kept=kept, removed=removed)
