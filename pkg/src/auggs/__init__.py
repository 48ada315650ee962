"""Self-augmented coarse-to-fine Gaussian splatting for sparse-view reconstruction."""

from .core import Camera, Gaussian, GaussianCloud, covariance_from_params, project_gaussian, sh_to_rgb
from .rasterizer import GradientBuffer, RenderOutput, render, render_backward
from .losses import (
    DepthMap,
    LossWeights,
    loss_depth,
    loss_dssim,
    loss_l1,
    loss_total,
    normalize_depth,
    psnr,
    ssim_metric,
)
from .density import DensifyConfig, DensifyStats, accumulate_stats, densify_and_prune, reset_opacity
from .masking import MaskSchedule, fps, knn_patch, patch_mask, point_mask
from .augment import (
    PointSet,
    ViewRecord,
    ViewSet,
    build_fine_viewset,
    geometry_augment,
    perceptual_augment,
    sample_novel_cameras,
)
from .pipeline import (
    InitConfig,
    OptimizerConfig,
    PipelineResult,
    StageReport,
    TrainingConfig,
    optimizer_step,
    run_pipeline,
    train_coarse,
    train_fine,
)
from .scene_io import load_dataset, load_ply, save_image, save_ply, save_report
from .fixture import FixtureScene, make_fixture_scene, write_fixture

__version__ = "0.1.0"

__all__ = [
    "Camera", "Gaussian", "GaussianCloud", "covariance_from_params", "project_gaussian",
    "sh_to_rgb", "GradientBuffer", "RenderOutput", "render", "render_backward",
    "DepthMap", "LossWeights", "loss_depth", "loss_dssim", "loss_l1", "loss_total",
    "normalize_depth", "psnr", "ssim_metric", "DensifyConfig", "DensifyStats",
    "accumulate_stats", "densify_and_prune", "reset_opacity", "MaskSchedule", "fps",
    "knn_patch", "patch_mask", "point_mask", "PointSet", "ViewRecord", "ViewSet",
    "build_fine_viewset", "geometry_augment", "perceptual_augment", "sample_novel_cameras",
    "InitConfig", "OptimizerConfig", "PipelineResult", "StageReport", "TrainingConfig",
    "optimizer_step", "run_pipeline", "train_coarse", "train_fine", "load_dataset",
    "load_ply", "save_image", "save_ply", "save_report", "FixtureScene",
    "make_fixture_scene", "write_fixture", "__version__",
]
