"""Two-stage training orchestration.

The coarse stage fits a Gaussian cloud to the sparse reference views from a
random (or file-seeded) initialization, applying point masks, densification,
and opacity resets on their cadences. Its output is distilled into bare
positions and colors, novel cameras are interpolated between the reference
poses, and the coarse model's renders at those cameras join the reference
images as pseudo supervision. The fine stage restarts optimization from the
distilled points on the enlarged view set, swapping the point mask for the
patch-based mask.

Every stochastic choice (initialization, view order, masks, splits) draws
from generators derived from the run seed, and gradient reductions use fixed
partition orders, so a run is bit-reproducible for any worker count.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .augment import (
    PSEUDO,
    PointSet,
    ViewSet,
    build_fine_viewset,
    geometry_augment,
    perceptual_augment,
    sample_novel_cameras,
)
from .core import Camera, GaussianCloud, inverse_sigmoid, rgb_to_sh_dc
from .density import (
    DensifyConfig,
    DensifyStats,
    accumulate_stats,
    densify_and_prune,
    reset_opacity,
)
from .errors import ContractViolationError, EmptyCloudError, RenderError
from .losses import DepthMap, LossWeights, loss_total, psnr, ssim_metric
from .masking import MaskSchedule, patch_mask, point_mask
from .rasterizer import GradientBuffer, render, render_backward
from . import scene_io

logger = logging.getLogger(__name__)

#: Alpha threshold above which a rendered pixel contributes to the depth loss.
DEPTH_VALID_ALPHA = 0.5

PARAM_GROUPS = ("centers", "rotations", "log_scales", "opacity_logits", "sh")


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment settings; the position step decays over each stage."""

    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    sh_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    # Published splatting defaults express the position step per unit of
    # scene extent; disable to use the raw values.
    scale_position_lr_by_extent: bool = True


@dataclass(frozen=True)
class InitConfig:
    """Coarse-stage initialization: random ball fill or a seed point file.

    ``max_scale_fraction`` caps the neighbor-distance-derived initial scale at
    a fraction of the scene extent; a sparse random fill otherwise starts as
    enormous splats that both render slowly and trip the world-size prune.
    """

    n_points: int = 10000
    radius_scale: float = 1.0
    color: tuple = (0.5, 0.5, 0.5)
    points_file: str | None = None
    init_opacity: float = 0.1
    max_scale_fraction: float = 0.01


@dataclass(frozen=True)
class TrainingConfig:
    coarse_iters: int = 5000
    fine_iters: int = 6000
    weights: LossWeights = field(default_factory=LossWeights)
    masks: MaskSchedule = field(default_factory=MaskSchedule)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init: InitConfig = field(default_factory=InitConfig)
    background: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    eval_every: int = 500
    pseudo_views: int | None = None  # None means 3x the reference count
    coarse_sh_degree: int = 3
    fine_sh_degree: int = 3
    pseudo_weight: float = 1.0

    def __post_init__(self):
        if self.coarse_iters < 1 or self.fine_iters < 0:
            raise ContractViolationError("iteration budgets must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        data = dict(data)
        for key, sub in (("weights", LossWeights), ("masks", MaskSchedule),
                         ("densify", DensifyConfig), ("optimizer", OptimizerConfig),
                         ("init", InitConfig)):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**data[key])
        if "background" in data:
            data["background"] = tuple(data["background"])
        return cls(**data)


@dataclass
class EvalRow:
    iteration: int
    train_psnr: float
    train_ssim: float
    heldout_psnr: float | None
    heldout_ssim: float | None
    point_count: int
    wall_ms: float


@dataclass
class SizeEvent:
    iteration: int
    kind: str
    delta: int
    count_after: int


@dataclass
class StageReport:
    """Per-stage training trace: metric rows, size events, losses."""

    stage: str
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    best_heldout_iteration: int | None = None
    best_heldout_psnr: float | None = None
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "rows": [asdict(r) for r in self.rows],
            "events": [asdict(e) for e in self.events],
            "best_heldout_iteration": self.best_heldout_iteration,
            "best_heldout_psnr": self.best_heldout_psnr,
            "wall_s": self.wall_s,
            "final_loss": self.loss_trace[-1] if self.loss_trace else None,
        }


class MomentState:
    """Per-parameter-group first/second moments plus the shared step count."""

    def __init__(self, cloud: GaussianCloud, cfg: OptimizerConfig, budget: int,
                 scene_extent: float):
        self.cfg = cfg
        self.budget = max(budget, 1)
        self.extent = scene_extent if cfg.scale_position_lr_by_extent else 1.0
        self.step = 0
        self.m = {}
        self.v = {}
        for name in PARAM_GROUPS:
            arr = getattr(cloud, name)
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)

    def base_lr(self, name: str, iteration: int) -> float:
        cfg = self.cfg
        if name == "centers":
            tau = min(iteration / self.budget, 1.0)
            log_lr = ((1.0 - tau) * np.log(cfg.position_lr_init * self.extent)
                      + tau * np.log(cfg.position_lr_final * self.extent))
            return float(np.exp(log_lr))
        return {"rotations": cfg.rotation_lr, "log_scales": cfg.scale_lr,
                "opacity_logits": cfg.opacity_lr, "sh": cfg.sh_lr}[name]

    def apply_index_map(self, index_map: np.ndarray) -> None:
        """Re-align moments after a size-changing event (-1 rows start at zero)."""
        for name in PARAM_GROUPS:
            old_m, old_v = self.m[name], self.v[name]
            new_m = np.zeros((index_map.shape[0],) + old_m.shape[1:])
            new_v = np.zeros_like(new_m)
            inherited = index_map >= 0
            new_m[inherited] = old_m[index_map[inherited]]
            new_v[inherited] = old_v[index_map[inherited]]
            self.m[name], self.v[name] = new_m, new_v

    def select(self, kept: np.ndarray) -> None:
        for name in PARAM_GROUPS:
            self.m[name] = self.m[name][kept]
            self.v[name] = self.v[name][kept]

    def reset_group(self, name: str) -> None:
        self.m[name][...] = 0.0
        self.v[name][...] = 0.0

    def aligned_with(self, cloud: GaussianCloud) -> bool:
        return all(self.m[name].shape == getattr(cloud, name).shape for name in PARAM_GROUPS)


def optimizer_step(cloud: GaussianCloud, grads: GradientBuffer, state: MomentState,
                   iteration: int) -> tuple[GaussianCloud, MomentState]:
    """One adaptive-moment update with bias correction, in place."""
    if not state.aligned_with(cloud):
        raise ContractViolationError("optimizer state is not aligned with the cloud")
    cfg = state.cfg
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name in PARAM_GROUPS:
        grad = getattr(grads, name)
        if grad.shape != getattr(cloud, name).shape:
            raise ContractViolationError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        lr = state.base_lr(name, iteration)
        getattr(cloud, name)[...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return cloud, state


def scene_extent_of(cameras: list[Camera]) -> float:
    """Radius of the (centroid-anchored) bounding sphere of the camera centers."""
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    return float(np.max(np.linalg.norm(centers - centroid, axis=1))) or 1.0


def _nearest_neighbor_scale(positions: np.ndarray, neighbor: int = 3) -> np.ndarray:
    """Distance to the ``neighbor``-th nearest other point (isotropic init scale)."""
    p = positions.shape[0]
    if p == 1:
        return np.full(1, 0.1)
    k = min(neighbor, p - 1)
    # Chunked exact search keeps memory bounded for large clouds.
    out = np.empty(p)
    chunk = max(1, int(2e7) // max(p, 1))
    for start in range(0, p, chunk):
        stop = min(start + chunk, p)
        d2 = np.sum((positions[start:stop, None, :] - positions[None, :, :]) ** 2, axis=2)
        part = np.partition(d2, k, axis=1)[:, k]
        out[start:stop] = np.sqrt(part)
    return np.maximum(out, 1e-7)


def init_cloud_from_points(points: PointSet, sh_degree: int,
                           init_opacity: float = 0.1,
                           max_scale: float | None = None) -> GaussianCloud:
    """Gaussians at given positions/colors: isotropic 3rd-neighbor scales,
    identity rotations, uniform low opacity, view-independent color."""
    if points.positions.shape[0] == 0:
        raise EmptyCloudError("cannot initialize a cloud from zero points")
    p = points.positions.shape[0]
    k = (sh_degree + 1) ** 2
    sh = np.zeros((p, k, 3))
    sh[:, 0, :] = rgb_to_sh_dc(points.colors)
    rotations = np.zeros((p, 4))
    rotations[:, 0] = 1.0
    scales = _nearest_neighbor_scale(points.positions)
    if max_scale is not None:
        scales = np.minimum(scales, max_scale)
    return GaussianCloud(
        centers=points.positions.copy(),
        rotations=rotations,
        log_scales=np.log(np.repeat(scales[:, None], 3, axis=1)),
        opacity_logits=np.full(p, inverse_sigmoid(init_opacity)),
        sh=sh,
        sh_degree=sh_degree,
    )


def _random_init_points(cfg: TrainingConfig, cameras: list[Camera],
                        rng: np.random.Generator) -> PointSet:
    if cfg.init.points_file:
        seeded = scene_io.load_ply(cfg.init.points_file)
        return geometry_augment(seeded)
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    radius = scene_extent_of(cameras) * cfg.init.radius_scale
    direction = rng.normal(size=(cfg.init.n_points, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    positions = centroid + direction * radius * rng.uniform(size=(cfg.init.n_points, 1)) ** (1 / 3)
    colors = np.broadcast_to(np.asarray(cfg.init.color, dtype=np.float64),
                             (cfg.init.n_points, 3))
    return PointSet(positions=positions, colors=colors.copy())


def _prepare_views(views: ViewSet, background: np.ndarray, pseudo_weight: float):
    """Precompute per-view training targets (mask compositing happens once)."""
    prepared = []
    for record in views:
        image = record.image
        if record.object_mask is not None:
            m = record.object_mask[:, :, None].astype(np.float64)
            image = image * m + background[None, None, :] * (1.0 - m)
        weight = pseudo_weight if record.origin == PSEUDO else 1.0
        prepared.append((image, record.camera, record.depth, weight))
    return prepared


def _evaluate(cloud: GaussianCloud, prepared, background) -> tuple[float, float]:
    psnrs, ssims = [], []
    for target, cam, _, _ in prepared:
        out = render(cloud, cam, background)
        psnrs.append(psnr(out.color, target))
        ssims.append(ssim_metric(out.color, target))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def _train_stage(cloud: GaussianCloud, views: ViewSet, cfg: TrainingConfig, stage: str,
                 budget: int, scene_extent: float,
                 heldout: ViewSet | None = None) -> tuple[GaussianCloud, StageReport, GaussianCloud | None]:
    """Shared optimization loop; ``stage`` picks the mask flavor and budget."""
    if len(views) == 0:
        raise ContractViolationError("cannot train on an empty view set")
    stage_id = 0 if stage == "coarse" else 1
    rng_views = np.random.default_rng([cfg.seed, stage_id, 1])
    rng_mask = np.random.default_rng([cfg.seed, cfg.masks.seed, stage_id, 2])
    rng_densify = np.random.default_rng([cfg.seed, stage_id, 3])

    background = np.asarray(cfg.background, dtype=np.float64)
    prepared = _prepare_views(views, background, cfg.pseudo_weight)
    prepared_heldout = _prepare_views(heldout, background, 1.0) if heldout else None

    report = StageReport(stage=stage)
    report.events.append(SizeEvent(0, "init", len(cloud), len(cloud)))
    state = MomentState(cloud, cfg.optimizer, budget, scene_extent)
    stats = DensifyStats.zeros(len(cloud))
    best_cloud = None
    best_psnr = -np.inf
    t_start = time.perf_counter()

    epoch_order = []
    for it in range(1, budget + 1):
        if not epoch_order:
            epoch_order = list(rng_views.permutation(len(prepared)))
        target, cam, depth_target, weight = prepared[epoch_order.pop()]

        out = render(cloud, cam, background)
        d_render = None
        if depth_target is not None and cfg.weights.lambda_d > 0.0:
            d_render = DepthMap(values=out.depth, valid=out.alpha > DEPTH_VALID_ALPHA)
        total = loss_total(out.color, target, d_render, depth_target, cfg.weights)
        if not np.isfinite(total.value):
            raise RenderError(f"non-finite training loss at {stage} iteration {it}")
        report.loss_trace.append(weight * total.value)

        grad_image = total.grad_image if weight == 1.0 else weight * total.grad_image
        grad_depth = total.grad_depth
        if grad_depth is not None and weight != 1.0:
            grad_depth = weight * grad_depth
        grads = render_backward(cloud, cam, out, grad_image, grad_depth)
        stats = accumulate_stats(stats, grads, out.cache)
        cloud, state = optimizer_step(cloud, grads, state, it)

        # Size-changing events; masking runs before any densification due at
        # the same iteration so masked points never take part in it.
        gap = cfg.masks.point_gap if stage == "coarse" else cfg.masks.patch_gap
        ratio = cfg.masks.point_ratio if stage == "coarse" else cfg.masks.patch_ratio
        if ratio > 0.0 and it % gap == 0:
            if stage == "coarse":
                result = point_mask(cloud, ratio, rng_mask, cfg.masks.min_points)
            else:
                result = patch_mask(cloud, cfg.masks, rng_mask)
            if result.removed.size:
                cloud = result.cloud
                state.select(result.kept)
                stats = stats.select(result.kept)
                report.events.append(SizeEvent(it, f"{stage}_mask",
                                               -int(result.removed.size), len(cloud)))
        if cfg.densify.due(it, budget):
            result = densify_and_prune(cloud, stats, scene_extent, cfg.densify, rng_densify)
            delta = len(result.cloud) - len(cloud)
            cloud, stats = result.cloud, result.stats
            state.apply_index_map(result.index_map)
            report.events.append(SizeEvent(it, "densify", delta, len(cloud)))
        if cfg.densify.reset_due(it, budget):
            cloud = reset_opacity(cloud, cfg.densify.reset_ceiling)
            state.reset_group("opacity_logits")
            report.events.append(SizeEvent(it, "opacity_reset", 0, len(cloud)))
        assert state.aligned_with(cloud), "optimizer state lost alignment"

        if it % cfg.eval_every == 0 or it == budget:
            tr_psnr, tr_ssim = _evaluate(cloud, prepared, background)
            ho_psnr = ho_ssim = None
            if prepared_heldout:
                ho_psnr, ho_ssim = _evaluate(cloud, prepared_heldout, background)
                if ho_psnr > best_psnr:
                    best_psnr = ho_psnr
                    best_cloud = cloud.copy()
                    report.best_heldout_iteration = it
                    report.best_heldout_psnr = ho_psnr
            wall_ms = (time.perf_counter() - t_start) * 1000.0
            report.rows.append(EvalRow(it, tr_psnr, tr_ssim, ho_psnr, ho_ssim,
                                       len(cloud), wall_ms))
            logger.info("%s it=%d psnr=%.2f ssim=%.4f heldout=%s points=%d",
                        stage, it, tr_psnr, tr_ssim,
                        f"{ho_psnr:.2f}" if ho_psnr is not None else "-", len(cloud))
    report.wall_s = time.perf_counter() - t_start
    return cloud, report, best_cloud


def train_coarse(views: ViewSet, cfg: TrainingConfig,
                 heldout: ViewSet | None = None) -> tuple[GaussianCloud, StageReport]:
    """Coarse-stage optimization from scratch with point-based masking."""
    if len(views) == 0:
        raise ContractViolationError("train_coarse needs at least one view")
    cameras = views.cameras()
    extent = scene_extent_of(cameras)
    rng_init = np.random.default_rng([cfg.seed, 0, 0])
    points = _random_init_points(cfg, cameras, rng_init)
    cloud = init_cloud_from_points(points, cfg.coarse_sh_degree,
                                   init_opacity=cfg.init.init_opacity,
                                   max_scale=cfg.init.max_scale_fraction * extent)
    cloud, report, _ = _train_stage(cloud, views, cfg, "coarse", cfg.coarse_iters,
                                    extent, heldout)
    return cloud, report


def train_fine(init_points: PointSet, fine_views: ViewSet, cfg: TrainingConfig,
               heldout: ViewSet | None = None) -> tuple[GaussianCloud, StageReport, GaussianCloud | None]:
    """Fine-stage optimization from distilled points with patch-based masking."""
    reference_cams = [r.camera for r in fine_views if r.origin != PSEUDO]
    extent = scene_extent_of(reference_cams if reference_cams else fine_views.cameras())
    cloud = init_cloud_from_points(init_points, cfg.fine_sh_degree,
                                   init_opacity=cfg.init.init_opacity,
                                   max_scale=cfg.init.max_scale_fraction * extent)
    if cfg.fine_iters == 0:
        report = StageReport(stage="fine")
        report.events.append(SizeEvent(0, "init", len(cloud), len(cloud)))
        return cloud, report, None
    return _train_stage(cloud, fine_views, cfg, "fine", cfg.fine_iters, extent, heldout)


@dataclass
class PipelineResult:
    coarse: GaussianCloud
    fine: GaussianCloud
    fine_best: GaussianCloud | None
    report: dict


def _final_metrics(cloud: GaussianCloud, views: ViewSet, background) -> dict:
    prepared = _prepare_views(views, np.asarray(background, dtype=np.float64), 1.0)
    per_view = []
    for i, (target, cam, _, _) in enumerate(prepared):
        out = render(cloud, cam, background)
        per_view.append({"view": i, "psnr": psnr(out.color, target),
                         "ssim": ssim_metric(out.color, target)})
    finite = [v["psnr"] for v in per_view if np.isfinite(v["psnr"])]
    return {
        "per_view": per_view,
        "mean_psnr": float(np.mean(finite)) if finite else float("inf"),
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view])) if per_view else None,
    }


def run_pipeline(scene_dir, cfg: TrainingConfig, out_dir) -> PipelineResult:
    """Full coarse-to-fine run on a scene directory, persisting all artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_views, heldout_views = scene_io.load_dataset(scene_dir)
    heldout = heldout_views if len(heldout_views) else None
    t0 = time.perf_counter()

    coarse, coarse_report = train_coarse(train_views, cfg, heldout)

    points = geometry_augment(coarse)
    n_pseudo = cfg.pseudo_views if cfg.pseudo_views is not None else 3 * len(train_views)
    pseudo_records = []
    if n_pseudo > 0:
        novel_cams = sample_novel_cameras(train_views.cameras(), n_pseudo, cfg.seed)
        pseudo_records = perceptual_augment(coarse, novel_cams, cfg.background)
    fine_views = build_fine_viewset(train_views, pseudo_records)
    fine, fine_report, fine_best = train_fine(points, fine_views, cfg, heldout)
    total_s = time.perf_counter() - t0

    scene_io.save_ply(coarse, out_dir / "coarse.ply")
    scene_io.save_ply(fine, out_dir / "fine.ply")
    if fine_best is not None:
        scene_io.save_ply(fine_best, out_dir / "fine_best.ply")
    for i, record in enumerate(pseudo_records):
        scene_io.save_image(record.image, out_dir / "pseudo" / f"pseudo_{i:03d}.png")

    report = {
        "config": cfg.to_dict(),
        "scene_extent": scene_extent_of(train_views.cameras()),
        "n_reference_views": len(train_views),
        "n_pseudo_views": len(pseudo_records),
        "stages": {"coarse": coarse_report.to_dict(), "fine": fine_report.to_dict()},
        "final": {
            "train": _final_metrics(fine, train_views, cfg.background),
            "heldout": (_final_metrics(fine, heldout, cfg.background)
                        if heldout is not None else None),
            "coarse_heldout": (_final_metrics(coarse, heldout, cfg.background)
                               if heldout is not None else None),
        },
        "timings": {"coarse_s": coarse_report.wall_s, "fine_s": fine_report.wall_s,
                    "total_s": total_s},
    }
    scene_io.save_report(report, out_dir / "report.json")
    return PipelineResult(coarse=coarse, fine=fine, fine_best=fine_best, report=report)
