"""Adaptive density control: densification, pruning, and opacity resets.

Gaussians whose accumulated screen-space positional gradient is large are
under-fitting their region: small ones are cloned in place, large ones are
split into two children sampled from the parent's own distribution. Gaussians
that have faded out or grown far beyond the scene are pruned. Periodic
opacity resets cap every opacity at a small ceiling so stale Gaussians fade
unless the data resurrects them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianCloud, inverse_sigmoid, quaternions_to_rotations, sigmoid
from .errors import ContractViolationError, InvalidParameterError
from .rasterizer import GradientBuffer, RenderCache


@dataclass(frozen=True)
class DensifyConfig:
    """Densification thresholds and cadence (defaults at desk scale)."""

    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_extent_fraction: float = 0.01
    world_extent_fraction: float = 0.1
    split_factor: float = 1.6
    interval: int = 100
    start_iteration: int = 500
    stop_fraction: float = 0.5
    reset_interval: int = 3000
    reset_ceiling: float = 0.01
    enabled: bool = True

    def due(self, iteration: int, budget: int) -> bool:
        """Whether densify/prune fires at this 1-based iteration."""
        return (self.enabled
                and iteration >= self.start_iteration
                and iteration <= budget * self.stop_fraction
                and iteration % self.interval == 0)

    def reset_due(self, iteration: int, budget: int) -> bool:
        """Resets exist so pruning can drop stale Gaussians, so they only
        fire inside the densification window; a reset near the end of a stage
        would otherwise ship a nearly transparent model."""
        return (self.enabled
                and self.reset_interval > 0
                and iteration <= budget * self.stop_fraction
                and iteration % self.reset_interval == 0)


@dataclass
class DensifyStats:
    """Running per-Gaussian screen-space gradient statistics."""

    grad_norm_sum: np.ndarray
    count: np.ndarray
    max_radius: np.ndarray

    @classmethod
    def zeros(cls, point_count: int) -> "DensifyStats":
        return cls(grad_norm_sum=np.zeros(point_count),
                   count=np.zeros(point_count, dtype=np.int64),
                   max_radius=np.zeros(point_count))

    def select(self, indices) -> "DensifyStats":
        return DensifyStats(grad_norm_sum=self.grad_norm_sum[indices],
                            count=self.count[indices],
                            max_radius=self.max_radius[indices])


def accumulate_stats(stats: DensifyStats, grads: GradientBuffer,
                     cache: RenderCache) -> DensifyStats:
    """Add this iteration's |dL/dmean2d| for the Gaussians visible in ``cache``."""
    p = stats.grad_norm_sum.shape[0]
    if grads.mean2d.shape[0] != p or cache.point_count != p:
        raise ContractViolationError("stats, gradients, and cache sizes disagree")
    rows = cache.rows
    if rows.size:
        stats.grad_norm_sum[rows] += np.linalg.norm(grads.mean2d[rows], axis=1)
        stats.count[rows] += 1
        np.maximum(stats.max_radius[rows], cache.radius, out=stats.max_radius[rows])
    return stats


@dataclass
class DensifyResult:
    """New cloud/stats plus an old-row map (-1 marks freshly created rows)."""

    cloud: GaussianCloud
    stats: DensifyStats
    index_map: np.ndarray
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats, scene_extent: float,
                      cfg: DensifyConfig, rng: np.random.Generator) -> DensifyResult:
    """Clone/split high-gradient Gaussians, then prune faded and oversized ones."""
    p = len(cloud)
    if stats.grad_norm_sum.shape[0] != p:
        raise ContractViolationError("stats are not aligned with the cloud")
    if p == 0:
        return DensifyResult(cloud=cloud, stats=stats, index_map=np.zeros(0, dtype=np.int64))

    mean_grad = np.divide(stats.grad_norm_sum, stats.count,
                          out=np.zeros(p), where=stats.count > 0)
    hot = mean_grad >= cfg.grad_threshold
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    small = max_scale < cfg.split_extent_fraction * scene_extent
    clone_idx = np.flatnonzero(hot & small)
    split_idx = np.flatnonzero(hot & ~small)

    parts = [cloud]
    maps = [np.arange(p, dtype=np.int64)]
    if clone_idx.size:
        parts.append(cloud.select(clone_idx))
        maps.append(np.full(clone_idx.size, -1, dtype=np.int64))
    if split_idx.size:
        parents = cloud.select(np.repeat(split_idx, 2))
        rot = quaternions_to_rotations(parents.rotations)
        scales = np.exp(parents.log_scales)
        offsets = np.matmul(rot, (scales * rng.standard_normal(scales.shape))[:, :, None])[:, :, 0]
        children = GaussianCloud(
            centers=parents.centers + offsets,
            rotations=parents.rotations,
            log_scales=parents.log_scales - np.log(cfg.split_factor),
            opacity_logits=parents.opacity_logits,
            sh=parents.sh,
            sh_degree=parents.sh_degree,
        )
        parts.append(children)
        maps.append(np.full(2 * split_idx.size, -1, dtype=np.int64))
    grown = GaussianCloud.concatenate(parts)
    index_map = np.concatenate(maps)

    drop = np.zeros(len(grown), dtype=bool)
    drop[split_idx] = True
    opacity = sigmoid(grown.opacity_logits)
    grown_scale = np.exp(grown.log_scales).max(axis=1)
    prune = (opacity < cfg.prune_opacity) | (grown_scale > cfg.world_extent_fraction * scene_extent)
    keep = ~(drop | prune)

    new_cloud = grown.select(np.flatnonzero(keep))
    return DensifyResult(
        cloud=new_cloud,
        stats=DensifyStats.zeros(len(new_cloud)),
        index_map=index_map[keep],
        n_cloned=int(clone_idx.size),
        n_split=int(split_idx.size),
        n_pruned=int(np.count_nonzero(prune & ~drop)),
    )


def reset_opacity(cloud: GaussianCloud, ceiling: float) -> GaussianCloud:
    """Cap every activated opacity at ``ceiling`` (applied on the logits)."""
    if not 0.0 < ceiling < 1.0:
        raise InvalidParameterError("opacity ceiling must lie in (0, 1)")
    out = cloud.copy()
    np.minimum(out.opacity_logits, inverse_sigmoid(ceiling), out=out.opacity_logits)
    return out
