"""On-disk formats: datasets, checkpoints, depth maps, history traces.

Datasets are a directory with a schema-validated ``manifest.json``,
binary range scans, and PNG images.  Scans use a fixed 16-byte header
(magic ``INFR``, version, rows, cols as little-endian uint32) followed by
row-major float32 ranges.  Checkpoints (magic ``INFC``) carry a JSON
header describing fields and poses plus raw parameter bytes, so a
save/load round trip is bit-exact.  All writes go through a temp file
and ``os.replace`` so readers never see partial files.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .fields import ColorField, DensityField, FieldConfig, SceneBox
from .se3 import Twist
from .sensors import CameraModel, LidarModel
from .world import DatasetSpec, simulate_frames

SCAN_MAGIC = b"INFR"
CHECKPOINT_MAGIC = b"INFC"
FORMAT_VERSION = 1

_TWIST_SCHEMA = {
    "type": "array",
    "items": {"type": "number"},
    "minItems": 6,
    "maxItems": 6,
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "lidar", "camera", "frames"],
    "properties": {
        "format": {"const": "neural-fusion-dataset"},
        "version": {"type": "integer", "minimum": 1},
        "lidar": {
            "type": "object",
            "required": ["rows", "cols", "elevation_min", "elevation_max",
                         "range_min", "range_max"],
            "properties": {
                "rows": {"type": "integer", "minimum": 2},
                "cols": {"type": "integer", "minimum": 2},
                "elevation_min": {"type": "number"},
                "elevation_max": {"type": "number"},
                "range_min": {"type": "number", "exclusiveMinimum": 0},
                "range_max": {"type": "number"},
            },
        },
        "camera": {
            "anyOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["kind", "width", "height"],
                    "properties": {
                        "kind": {"enum": ["pinhole", "equirectangular"]},
                        "width": {"type": "integer", "minimum": 1},
                        "height": {"type": "integer", "minimum": 1},
                        "fx": {"type": "number"},
                        "fy": {"type": "number"},
                        "cx": {"type": "number"},
                        "cy": {"type": "number"},
                    },
                },
            ],
        },
        "frames": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["index", "scan"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "scan": {"type": "string"},
                    "image": {"type": ["string", "null"]},
                    "lidar_pose": {"anyOf": [_TWIST_SCHEMA, {"type": "null"}]},
                },
            },
        },
        "ground_truth": {
            "type": "object",
            "properties": {
                "lidar_poses": {"type": "array", "items": _TWIST_SCHEMA},
                "extrinsic": _TWIST_SCHEMA,
                "range_noise_sigma": {"type": "number"},
                "color_noise_sigma": {"type": "number"},
            },
        },
    },
}


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_bytes(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_scan(path: Path, ranges: np.ndarray) -> None:
    ranges = np.asarray(ranges, dtype=np.float32)
    if ranges.ndim != 2:
        raise ValueError("scan must be a 2-d range image")
    rows, cols = ranges.shape
    header = SCAN_MAGIC + struct.pack("<III", FORMAT_VERSION, rows, cols)
    atomic_write_bytes(Path(path), header + ranges.astype("<f4").tobytes())


def read_scan(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != SCAN_MAGIC:
        raise ValueError(f"{path}: not a range scan file")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported scan version {version}")
    expected = 16 + rows * cols * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated scan ({len(raw)} bytes, expected {expected})")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_image(path: Path, image: np.ndarray) -> None:
    """Store a float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (np.round(arr * 255.0)).astype(np.uint8)
    buf = Image.fromarray(data, mode="RGB")
    tmp_path = Path(path)
    tmp_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=tmp_path.parent, prefix=tmp_path.name, suffix=".tmp")
    os.close(fd)
    try:
        buf.save(tmp, format="PNG")
        os.replace(tmp, tmp_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_depth_png(path: Path, depth_m: np.ndarray, invalid: np.ndarray | None = None) -> None:
    """16-bit grayscale PNG in millimeters; invalid pixels become 0."""
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    if invalid is not None:
        mm = np.where(invalid, 0, mm)
    img = Image.fromarray(mm)  # uint16 -> 16-bit grayscale
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_depth_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 1000.0


def _lidar_to_dict(m: LidarModel) -> dict:
    return {
        "rows": m.rows, "cols": m.cols,
        "elevation_min": m.elevation_min, "elevation_max": m.elevation_max,
        "range_min": m.range_min, "range_max": m.range_max,
    }


def _camera_to_dict(c: CameraModel) -> dict:
    return {
        "kind": c.kind, "width": c.width, "height": c.height,
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
    }


@dataclass
class Dataset:
    """In-memory view of a dataset directory."""

    lidar: LidarModel
    camera: CameraModel | None
    scans: list[np.ndarray]
    images: list[np.ndarray | None]
    lidar_twists: np.ndarray | None        # supplied per-frame poses, (n, 6)
    gt_lidar_twists: np.ndarray | None
    gt_extrinsic: np.ndarray | None

    @property
    def n_frames(self) -> int:
        return len(self.scans)


def write_dataset(spec: DatasetSpec, out_dir: Path) -> Path:
    """Simulate every frame of ``spec`` and write a dataset directory."""
    out_dir = Path(out_dir)
    scans, images = simulate_frames(spec)
    frames = []
    for i, scan in enumerate(scans):
        scan_rel = f"scans/frame_{i:04d}.scan"
        write_scan(out_dir / scan_rel, scan)
        entry = {
            "index": i,
            "scan": scan_rel,
            "lidar_pose": [float(x) for x in spec.lidar_twists[i].as_vector()],
        }
        if spec.camera is not None:
            image_rel = f"images/frame_{i:04d}.png"
            write_image(out_dir / image_rel, images[i])
            entry["image"] = image_rel
        frames.append(entry)
    manifest = {
        "format": "neural-fusion-dataset",
        "version": FORMAT_VERSION,
        "lidar": _lidar_to_dict(spec.lidar),
        "camera": None if spec.camera is None else _camera_to_dict(spec.camera),
        "frames": frames,
        "ground_truth": {
            "lidar_poses": [[float(x) for x in t.as_vector()] for t in spec.lidar_twists],
            "extrinsic": [float(x) for x in spec.extrinsic.as_vector()],
            "range_noise_sigma": spec.range_noise_sigma,
            "color_noise_sigma": spec.color_noise_sigma,
        },
    }
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    atomic_write_json(out_dir / "manifest.json", manifest)
    return out_dir


def load_dataset(directory: Path) -> Dataset:
    """Read and validate a dataset directory."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise ValueError(f"{directory}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{manifest_path}: invalid JSON ({e})") from e
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ValueError(f"{manifest_path}: schema violation: {e.message}") from e

    lidar = LidarModel(**manifest["lidar"])
    camera = None if manifest["camera"] is None else CameraModel(**manifest["camera"])
    frames = sorted(manifest["frames"], key=lambda f: f["index"])
    scans: list[np.ndarray] = []
    images: list[np.ndarray | None] = []
    poses: list[np.ndarray | None] = []
    for frame in frames:
        scan = read_scan(directory / frame["scan"])
        if scan.shape != (lidar.rows, lidar.cols):
            raise ValueError(f"{frame['scan']}: shape {scan.shape} does not match manifest")
        scans.append(scan)
        image_rel = frame.get("image")
        if image_rel:
            if camera is None:
                raise ValueError(f"{image_rel}: frame has an image but manifest has no camera")
            image = read_image(directory / image_rel)
            if image.shape != (camera.height, camera.width, 3):
                raise ValueError(f"{image_rel}: shape {image.shape} does not match manifest")
            images.append(image)
        else:
            images.append(None)
        pose = frame.get("lidar_pose")
        poses.append(None if pose is None else np.asarray(pose, dtype=np.float64))

    lidar_twists = None
    if all(p is not None for p in poses):
        lidar_twists = np.stack(poses)

    gt = manifest.get("ground_truth", {})
    gt_poses = gt.get("lidar_poses")
    gt_ext = gt.get("extrinsic")
    return Dataset(
        lidar=lidar,
        camera=camera,
        scans=scans,
        images=images,
        lidar_twists=lidar_twists,
        gt_lidar_twists=None if gt_poses is None else np.asarray(gt_poses, dtype=np.float64),
        gt_extrinsic=None if gt_ext is None else np.asarray(gt_ext, dtype=np.float64),
    )


@dataclass
class Checkpoint:
    """Serializable training state: fields, poses, extrinsic."""

    scene_box: SceneBox
    density_config: FieldConfig | None = None
    density_params: list[np.ndarray] | None = None
    color_config: FieldConfig | None = None
    color_params: list[np.ndarray] | None = None
    extrinsic: np.ndarray | None = None
    lidar_twists: np.ndarray | None = None
    keyframes: list[int] | None = None

    def restore_density(self) -> DensityField:
        if self.density_config is None or self.density_params is None:
            raise ValueError("checkpoint holds no density field")
        field = DensityField(self.scene_box, self.density_config)
        field.load_parameter_values(self.density_params)
        return field

    def restore_color(self) -> ColorField:
        if self.color_config is None or self.color_params is None:
            raise ValueError("checkpoint holds no color field")
        field = ColorField(self.scene_box, self.color_config)
        field.load_parameter_values(self.color_params)
        return field


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = []

    def register(prefix: str, params: list[np.ndarray] | None):
        if params is not None:
            for i, a in enumerate(params):
                arrays.append((f"{prefix}/{i}", np.ascontiguousarray(a)))

    register("density", ckpt.density_params)
    register("color", ckpt.color_params)
    if ckpt.extrinsic is not None:
        arrays.append(("extrinsic", np.asarray(ckpt.extrinsic, dtype=np.float64)))
    if ckpt.lidar_twists is not None:
        arrays.append(("lidar_twists", np.asarray(ckpt.lidar_twists, dtype=np.float64)))

    header = {
        "scene_box": {
            "center": ckpt.scene_box.center.tolist(),
            "half_extent": ckpt.scene_box.half_extent.tolist(),
        },
        "density": None if ckpt.density_config is None else ckpt.density_config.to_dict(),
        "color": None if ckpt.color_config is None else ckpt.color_config.to_dict(),
        "keyframes": ckpt.keyframes,
        "arrays": [
            {"name": name, "shape": list(a.shape), "dtype": str(a.dtype)}
            for name, a in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<II", FORMAT_VERSION, len(blob))
    payload += blob
    for _, a in arrays:
        payload += a.tobytes()
    atomic_write_bytes(Path(path), bytes(payload))


def load_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + header_len].decode())
    offset = 12 + header_len
    named: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        named[meta["name"]] = np.frombuffer(
            raw[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")

    def collect(prefix: str) -> list[np.ndarray] | None:
        keys = sorted((k for k in named if k.startswith(prefix + "/")),
                      key=lambda k: int(k.split("/")[1]))
        return [named[k] for k in keys] if keys else None

    box = SceneBox(center=header["scene_box"]["center"],
                   half_extent=header["scene_box"]["half_extent"])
    return Checkpoint(
        scene_box=box,
        density_config=None if header["density"] is None else FieldConfig.from_dict(header["density"]),
        density_params=collect("density"),
        color_config=None if header["color"] is None else FieldConfig.from_dict(header["color"]),
        color_params=collect("color"),
        extrinsic=named.get("extrinsic"),
        lidar_twists=named.get("lidar_twists"),
        keyframes=header.get("keyframes"),
    )


def write_extrinsic_history(path: Path, history: np.ndarray) -> None:
    """CSV trace of the calibration: iteration, twist, photometric loss."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[1] != 8:
        raise ValueError("history must have columns (iteration, 6 twist, loss)")
    lines = ["iteration,tx,ty,tz,rx,ry,rz,photometric_loss"]
    for row in history:
        cells = [str(int(row[0]))] + [repr(float(x)) for x in row[1:]]
        lines.append(",".join(cells))
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


def read_extrinsic_history(path: Path) -> np.ndarray:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != "iteration,tx,ty,tz,rx,ry,rz,photometric_loss":
        raise ValueError(f"{path}: not an extrinsic history file")
    rows = [[float(c) for c in line.split(",")] for line in text[1:]]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 8)


def twists_from_array(arr: np.ndarray) -> list[Twist]:
    return [Twist.from_vector(row) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 6)]
