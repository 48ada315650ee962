"""Dataset ingestion, point-cloud persistence, images, and reports.

A scene directory is described by a ``scene.json`` manifest whose ``views``
entries point at 8-bit PNG images, optional single-channel PNG object masks
(value > 127 means object), and optional binary depth maps. Depth files carry
a 16-byte header (magic ``DPTH``, u32 width, u32 height, u32 reserved, all
little-endian) followed by row-major float32 values; NaN marks invalid
pixels.

Gaussian clouds persist as binary little-endian PLY with float32 vertex
properties in the de-facto splatting order: x y z, f_dc_0..2,
f_rest_0..(3(K-1)-1) (channel-major), opacity logit, scale_0..2 (log),
rot_0..3 (unnormalized quaternion).

Every write in this module is atomic: content goes to a temporary file in
the target directory which is then renamed over the destination, so an
interrupted run never leaves a truncated artifact.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import REFERENCE, ViewRecord, ViewSet
from .core import Camera, GaussianCloud
from .errors import FormatError, LoadError
from .losses import DepthMap

MANIFEST_NAME = "scene.json"
DEPTH_MAGIC = b"DPTH"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes to ``path`` via a same-directory temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(image: np.ndarray, path) -> None:
    """Save an (H, W, 3) float image in [0, 1] as 8-bit PNG, rounding half up."""
    image = np.asarray(image, dtype=np.float64)
    quantized = np.clip(np.floor(image * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)
    import io

    buffer = io.BytesIO()
    Image.fromarray(quantized, mode="RGB").save(buffer, format="PNG")
    atomic_write_bytes(path, buffer.getvalue())


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 127


def save_mask(mask: np.ndarray, path) -> None:
    import io

    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(data, mode="L").save(buffer, format="PNG")
    atomic_write_bytes(path, buffer.getvalue())


def save_depth(depth: DepthMap, path) -> None:
    values = depth.values.astype("<f4")
    values = np.where(depth.valid, values, np.float32(np.nan))
    h, w = values.shape
    header = DEPTH_MAGIC + struct.pack("<III", w, h, 0)
    atomic_write_bytes(path, header + values.tobytes())


def load_depth(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: not a DPTH depth file")
    w, h, _ = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * w * h
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {w}x{h}, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)
    return DepthMap(values=values, valid=np.isfinite(values))


def _ply_properties(sh_count: int) -> list[str]:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (sh_count - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def save_ply(cloud: GaussianCloud, path) -> None:
    """Persist a cloud as binary little-endian PLY (float32 properties)."""
    k = cloud.sh.shape[1]
    names = _ply_properties(k)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    stride = len(names)
    data = np.empty((len(cloud), stride), dtype="<f4")
    data[:, 0:3] = cloud.centers
    data[:, 3:6] = cloud.sh[:, 0, :]
    rest = 3 * (k - 1)
    if rest:
        # Channel-major: all of R's higher coefficients, then G's, then B's.
        data[:, 6:6 + rest] = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(len(cloud), rest)
    data[:, 6 + rest] = cloud.opacity_logits
    data[:, 7 + rest:10 + rest] = cloud.log_scales
    data[:, 10 + rest:14 + rest] = cloud.rotations
    atomic_write_bytes(path, ("\n".join(header) + "\n").encode("ascii") + data.tobytes())


def load_ply(path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: malformed PLY header")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in lines[1]:
        raise FormatError(f"{path}: expected binary little-endian PLY")
    count = None
    props = []
    for line in lines[2:]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[0] == "element":
            raise FormatError(f"{path}: unexpected element {parts[1]!r}")
        elif parts[0] == "property":
            if parts[1] != "float":
                raise FormatError(f"{path}: unsupported property type {parts[1]!r}")
            props.append(parts[2])
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    if n_rest % 3:
        raise FormatError(f"{path}: f_rest count {n_rest} is not a multiple of 3")
    k = n_rest // 3 + 1
    degree = int(round(math.sqrt(k))) - 1
    if (degree + 1) ** 2 != k or not 0 <= degree <= 3:
        raise FormatError(f"{path}: {n_rest} f_rest properties do not match an SH degree")
    if props != _ply_properties(k):
        raise FormatError(f"{path}: vertex properties do not match the splatting layout")

    body = raw[end + len(b"end_header\n"):]
    stride = len(props)
    if len(body) != 4 * stride * count:
        raise FormatError(f"{path}: body size {len(body)} != {4 * stride * count}")
    data = np.frombuffer(body, dtype="<f4").reshape(count, stride).astype(np.float64)
    rest = 3 * (k - 1)
    sh = np.empty((count, k, 3))
    sh[:, 0, :] = data[:, 3:6]
    if rest:
        sh[:, 1:, :] = data[:, 6:6 + rest].reshape(count, 3, k - 1).transpose(0, 2, 1)
    return GaussianCloud(
        centers=data[:, 0:3],
        rotations=data[:, 10 + rest:14 + rest],
        log_scales=data[:, 7 + rest:10 + rest],
        opacity_logits=data[:, 6 + rest],
        sh=sh,
        sh_degree=degree,
    )


def camera_to_dict(cam: Camera) -> dict:
    return {
        "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": [float(v) for v in cam.rotation.reshape(-1)],
        "translation": [float(v) for v in cam.translation],
    }


def camera_from_dict(data: dict, entry: str = "camera") -> Camera:
    try:
        rot = np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3)
        trans = np.asarray(data["translation"], dtype=np.float64).reshape(3)
        width, height = int(data["width"]), int(data["height"])
        fx, fy, cx, cy = (float(data[k]) for k in ("fx", "fy", "cx", "cy"))
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{entry}: malformed camera ({exc})") from exc
    err = np.max(np.abs(rot @ rot.T - np.eye(3)))
    if not np.isfinite(err) or err > 1e-3:
        raise LoadError(f"{entry}: camera rotation is not orthonormal (error {err:.2e})")
    if err > 1e-7:
        # Snap to the nearest orthonormal matrix so downstream invariants hold.
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
    return Camera(width=width, height=height, fx=fx, fy=fy, cx=cx, cy=cy,
                  rotation=rot, translation=trans)


@dataclass
class DatasetManifest:
    """Parsed ``scene.json``: per-view file references plus camera parameters."""

    root: Path
    views: list[dict]

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.is_file():
            raise LoadError(f"{manifest_path}: manifest not found")
        try:
            data = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise LoadError(f"{manifest_path}: invalid JSON ({exc})") from exc
        views = data.get("views")
        if not isinstance(views, list) or not views:
            raise LoadError(f"{manifest_path}: manifest must list at least one view")
        return cls(root=root, views=views)


def load_dataset(root) -> tuple[ViewSet, ViewSet]:
    """Load a scene directory into (train, heldout) view sets."""
    manifest = DatasetManifest.load(root)
    train, heldout = ViewSet(), ViewSet()
    for i, view in enumerate(manifest.views):
        entry = f"{manifest.root / MANIFEST_NAME}: view {i}"
        image_name = view.get("image")
        if not image_name:
            raise LoadError(f"{entry}: missing image field")
        image_path = manifest.root / image_name
        if not image_path.is_file():
            raise LoadError(f"{entry}: image file {image_path} not found")
        image = load_image(image_path)
        cam = camera_from_dict(view.get("camera", {}), entry)
        if image.shape[:2] != (cam.height, cam.width):
            raise LoadError(f"{entry}: image is {image.shape[:2]} but camera says "
                            f"{(cam.height, cam.width)}")

        mask = None
        if view.get("mask"):
            mask_path = manifest.root / view["mask"]
            if not mask_path.is_file():
                raise LoadError(f"{entry}: mask file {mask_path} not found")
            mask = load_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise LoadError(f"{entry}: mask shape {mask.shape} does not match image")

        depth = None
        if view.get("depth"):
            depth_path = manifest.root / view["depth"]
            if not depth_path.is_file():
                raise LoadError(f"{entry}: depth file {depth_path} not found")
            depth = load_depth(depth_path)
            if depth.values.shape != image.shape[:2]:
                raise LoadError(f"{entry}: depth shape {depth.values.shape} does not match image")

        split = view.get("split", "train")
        if split not in ("train", "heldout"):
            raise LoadError(f"{entry}: unknown split {split!r}")
        record = ViewRecord(image=image, camera=cam, object_mask=mask,
                            depth=depth, origin=REFERENCE)
        (train if split == "train" else heldout).records.append(record)
    return train, heldout


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return value
    return value


def save_report(report: dict, path) -> None:
    """Persist the run report as machine-parseable JSON (inf/nan as strings)."""
    atomic_write_bytes(path, json.dumps(_json_safe(report), indent=2).encode("utf-8"))
