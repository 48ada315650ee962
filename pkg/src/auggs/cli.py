"""Command-line interface: train, render, evaluate, make-fixture.

Exit codes: 0 on success, 1 on user error (bad flags, unreadable inputs),
2 on unexpected internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import AugsError
from .fixture import write_fixture
from .losses import psnr, ssim_metric
from .pipeline import TrainingConfig, run_pipeline, _prepare_views
from .rasterizer import render
from . import scene_io


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="auggs", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="log per-eval progress")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the coarse-to-fine pipeline on a scene")
    train.add_argument("--scene", required=True, help="scene directory with scene.json")
    train.add_argument("--config", help="JSON file overriding TrainingConfig fields")
    train.add_argument("--out", required=True, help="output directory for artifacts")

    rend = sub.add_parser("render", help="render a saved cloud from a camera")
    rend.add_argument("--ply", required=True)
    rend.add_argument("--camera", required=True, help="JSON file with one camera dict")
    rend.add_argument("--out", required=True, help="output PNG path")
    rend.add_argument("--background", default="1,1,1", help="comma-separated RGB in [0,1]")

    ev = sub.add_parser("evaluate", help="report PSNR/SSIM of a saved cloud on a scene")
    ev.add_argument("--ply", required=True)
    ev.add_argument("--scene", required=True)
    ev.add_argument("--split", choices=["train", "heldout", "all"], default="heldout",
                    help="views to score (heldout falls back to train when empty)")
    ev.add_argument("--background", default="1,1,1")

    fix = sub.add_parser("make-fixture", help="generate the synthetic ground-truth scene")
    fix.add_argument("--out", required=True)
    fix.add_argument("--seed", type=int, default=0)
    fix.add_argument("--gaussians", type=int, default=20)
    fix.add_argument("--train-views", type=int, default=8)
    fix.add_argument("--heldout-views", type=int, default=4)
    fix.add_argument("--size", type=int, default=64)
    return parser


def _parse_background(text: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(",")]
        if len(values) != 3:
            raise ValueError
    except ValueError:
        raise _UsageError(f"background must be three comma-separated floats, got {text!r}")
    return np.asarray(values)


def _load_config(path: str | None) -> TrainingConfig:
    if not path:
        return TrainingConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _UsageError(f"cannot read config {path}: {exc}")
    try:
        return TrainingConfig.from_dict(data)
    except TypeError as exc:
        raise _UsageError(f"bad config field: {exc}")


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    result = run_pipeline(args.scene, cfg, args.out)
    final = result.report["final"]
    print(f"coarse points: {len(result.coarse)}  fine points: {len(result.fine)}")
    print(f"train mean PSNR: {final['train']['mean_psnr']:.2f} dB  "
          f"SSIM: {final['train']['mean_ssim']:.4f}")
    if final["heldout"]:
        print(f"heldout mean PSNR: {final['heldout']['mean_psnr']:.2f} dB  "
              f"SSIM: {final['heldout']['mean_ssim']:.4f}")
    print(f"artifacts written to {args.out}")
    return 0


def _cmd_render(args) -> int:
    cloud = scene_io.load_ply(args.ply)
    try:
        cam_data = json.loads(Path(args.camera).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _UsageError(f"cannot read camera {args.camera}: {exc}")
    cam = scene_io.camera_from_dict(cam_data, args.camera)
    out = render(cloud, cam, _parse_background(args.background))
    scene_io.save_image(out.color, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cloud = scene_io.load_ply(args.ply)
    train_views, heldout_views = scene_io.load_dataset(args.scene)
    background = _parse_background(args.background)
    groups = []
    if args.split in ("train", "all"):
        groups.append(("train", train_views))
    if args.split in ("heldout", "all"):
        groups.append(("heldout", heldout_views))
    if args.split == "heldout" and len(heldout_views) == 0:
        print("no heldout views in the scene; evaluating train views")
        groups = [("train", train_views)]
    any_views = False
    for name, views in groups:
        scores = []
        for i, (target, cam, _, _) in enumerate(_prepare_views(views, background, 1.0)):
            out = render(cloud, cam, background)
            p, s = psnr(out.color, target), ssim_metric(out.color, target)
            scores.append((p, s))
            print(f"{name}[{i}] psnr={p:.2f} ssim={s:.4f}")
        if scores:
            any_views = True
            mean_p = np.mean([p for p, _ in scores])
            mean_s = np.mean([s for _, s in scores])
            print(f"{name} mean psnr={mean_p:.2f} ssim={mean_s:.4f}")
    if not any_views:
        raise _UsageError("scene has no views in the requested split")
    return 0


def _cmd_make_fixture(args) -> int:
    write_fixture(args.out, seed=args.seed, n_gaussians=args.gaussians,
                  train_views=args.train_views, heldout_views=args.heldout_views,
                  size=args.size)
    print(f"fixture scene written to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        handler = {
            "train": _cmd_train,
            "render": _cmd_render,
            "evaluate": _cmd_evaluate,
            "make-fixture": _cmd_make_fixture,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except AugsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
