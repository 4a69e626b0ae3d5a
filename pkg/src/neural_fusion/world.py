"""Synthetic world: analytic primitives, textures, and sensor simulation.

Scenes are small collections of planes, boxes, and spheres with
view-independent textures, so every LiDAR range and camera color has a
closed-form ground truth.  Boxes double as rooms: a ray starting inside
hits the interior of the far wall.  Simulated ranges get Gaussian noise
and the out-of-range sentinel 0; images get Gaussian color noise clipped
to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .se3 import RigidTransform, Twist, derive_camera_pose, exp_se3
from .sensors import CameraModel, LidarModel

Texture = Callable[[np.ndarray], np.ndarray]

_MIN_T = 1e-9


def solid_color(rgb: Sequence[float]) -> Texture:
    rgb = np.asarray(rgb, dtype=np.float64)

    def tex(points: np.ndarray) -> np.ndarray:
        return np.tile(rgb, (points.shape[0], 1))

    return tex


def checkerboard(square: float, color_a: Sequence[float], color_b: Sequence[float]) -> Texture:
    """3-d parity checker: cells of the given edge length alternate colors."""
    a = np.asarray(color_a, dtype=np.float64)
    b = np.asarray(color_b, dtype=np.float64)

    def tex(points: np.ndarray) -> np.ndarray:
        cells = np.floor(points / square).astype(np.int64)
        parity = (cells.sum(axis=1) & 1).astype(bool)
        return np.where(parity[:, None], b, a)

    return tex


def axis_gradient(axis: int, lo: float, hi: float,
                  color_lo: Sequence[float], color_hi: Sequence[float]) -> Texture:
    ca = np.asarray(color_lo, dtype=np.float64)
    cb = np.asarray(color_hi, dtype=np.float64)

    def tex(points: np.ndarray) -> np.ndarray:
        s = np.clip((points[:, axis] - lo) / (hi - lo), 0.0, 1.0)
        return ca + s[:, None] * (cb - ca)

    return tex


@dataclass
class Plane:
    """Infinite plane through ``point`` with unit ``normal``."""

    point: np.ndarray
    normal: np.ndarray
    texture: Texture = dc_field(default_factory=lambda: solid_color([0.5, 0.5, 0.5]))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        denom = dirs @ self.normal
        offset = (self.point - origins) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = offset / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > _MIN_T), t, np.inf)
        return t


@dataclass
class Box:
    """Axis-aligned box; rays starting inside hit the interior walls."""

    lo: np.ndarray
    hi: np.ndarray
    texture: Texture = dc_field(default_factory=lambda: solid_color([0.5, 0.5, 0.5]))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(self.lo >= self.hi):
            raise ValueError("box needs lo < hi on every axis")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        d = np.where(dirs == 0.0, 1e-30, dirs)
        t1 = (self.lo - origins) / d
        t2 = (self.hi - origins) / d
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        t = np.where(tmin > _MIN_T, tmin, tmax)
        return np.where((tmax >= tmin) & (t > _MIN_T), t, np.inf)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture = dc_field(default_factory=lambda: solid_color([0.5, 0.5, 0.5]))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=1)
        c0 = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c0
        safe = np.sqrt(np.maximum(disc, 0.0))
        near = -b - safe
        far = -b + safe
        t = np.where(near > _MIN_T, near, far)
        return np.where((disc >= 0.0) & (t > _MIN_T), t, np.inf)


@dataclass
class Scene:
    primitives: list

    def cast(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest-hit ranges, surface colors, and a hit mask for ray batches."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        owner = np.full(n, -1)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            owner[closer] = i
        colors = np.zeros((n, 3))
        for i, prim in enumerate(self.primitives):
            sel = owner == i
            if sel.any():
                pts = origins[sel] + dirs[sel] * best_t[sel, None]
                colors[sel] = prim.texture(pts)
        return best_t, colors, owner >= 0


def cast_ray(scene: Scene, origin: Sequence[float], direction: Sequence[float]):
    """Single-ray convenience wrapper: (range, color, hit)."""
    t, c, h = scene.cast(np.asarray(origin)[None], np.asarray(direction)[None])
    return float(t[0]), c[0], bool(h[0])


def simulate_lidar_scan(
    scene: Scene,
    model: LidarModel,
    pose: RigidTransform,
    rng: np.random.Generator | None = None,
    noise_sigma: float = 0.0,
) -> np.ndarray:
    """Range image for a posed scan; 0 marks misses and out-of-range reads."""
    dirs = model.ray_directions().reshape(-1, 3) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t, _, hit = scene.cast(origins, dirs)
    ranges = np.where(hit, t, 0.0)
    if rng is not None and noise_sigma > 0:
        ranges = np.where(hit, ranges + noise_sigma * rng.normal(size=ranges.shape), 0.0)
    ok = hit & (ranges >= model.range_min) & (ranges <= model.range_max)
    ranges = np.where(ok, ranges, 0.0)
    return ranges.reshape(model.rows, model.cols).astype(np.float32)


def simulate_camera_image(
    scene: Scene,
    camera: CameraModel,
    pose: RigidTransform,
    rng: np.random.Generator | None = None,
    noise_sigma: float = 0.0,
    background: Sequence[float] = (0.0, 0.0, 0.0),
) -> np.ndarray:
    """RGB image in [0, 1]^3 through pixel centers of a posed camera."""
    dirs = camera.pixel_grid_rays().reshape(-1, 3) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    _, colors, hit = scene.cast(origins, dirs)
    colors = np.where(hit[:, None], colors, np.asarray(background, dtype=np.float64))
    if rng is not None and noise_sigma > 0:
        colors = colors + noise_sigma * rng.normal(size=colors.shape)
    return np.clip(colors, 0.0, 1.0).reshape(camera.height, camera.width, 3).astype(np.float32)


def box_room_scene(width: float = 6.0, depth: float = 5.0, height: float = 3.0,
                   square: float = 0.5) -> Scene:
    """Checkered room centered at the origin with two interior obstacles."""
    half = np.array([width, depth, height]) / 2.0
    room = Box(-half, half, checkerboard(square, [0.9, 0.9, 0.85], [0.15, 0.2, 0.3]))
    pillar = Box([0.9, -1.7, -height / 2], [1.5, -1.1, 0.4],
                 axis_gradient(2, -height / 2, 0.4, [0.8, 0.3, 0.1], [0.9, 0.8, 0.2]))
    ball = Sphere([-1.4, 1.2, -0.6], 0.5,
                  axis_gradient(1, 0.7, 1.7, [0.1, 0.5, 0.8], [0.7, 0.1, 0.6]))
    return Scene([room, pillar, ball])


def straight_trajectory(n_frames: int = 10, step: float = 0.1) -> list[Twist]:
    """Forward motion along +x starting at the identity."""
    return [Twist(np.array([k * step, 0.0, 0.0]), np.zeros(3)) for k in range(n_frames)]


def texture_from_dict(d: dict) -> Texture:
    kind = d.get("type")
    if kind == "solid":
        return solid_color(d["rgb"])
    if kind == "checkerboard":
        return checkerboard(d["square"], d["color_a"], d["color_b"])
    if kind == "gradient":
        return axis_gradient(d["axis"], d["lo"], d["hi"],
                             d["color_lo"], d["color_hi"])
    raise ValueError(f"unknown texture type: {kind!r}")


def scene_from_dict(d: dict) -> Scene:
    """Build a scene from a JSON-friendly primitive list."""
    prims = []
    for entry in d.get("primitives", []):
        kind = entry.get("type")
        tex = texture_from_dict(entry["texture"]) if "texture" in entry else \
            solid_color([0.5, 0.5, 0.5])
        if kind == "box":
            prims.append(Box(entry["lo"], entry["hi"], tex))
        elif kind == "sphere":
            prims.append(Sphere(entry["center"], entry["radius"], tex))
        elif kind == "plane":
            prims.append(Plane(entry["point"], entry["normal"], tex))
        else:
            raise ValueError(f"unknown primitive type: {kind!r}")
    if not prims:
        raise ValueError("scene needs at least one primitive")
    return Scene(prims)


@dataclass(frozen=True)
class DatasetSpec:
    """Everything the simulator needs to write one dataset."""

    scene: Scene
    lidar: LidarModel
    camera: CameraModel | None
    lidar_twists: list[Twist]
    extrinsic: Twist
    range_noise_sigma: float = 0.0
    color_noise_sigma: float = 0.0
    seed: int = 0


def simulate_frames(spec: DatasetSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Scans and images for every frame; images empty without a camera."""
    rng = np.random.default_rng(spec.seed)
    ext = exp_se3(spec.extrinsic)
    scans = []
    images = []
    for twist in spec.lidar_twists:
        pose = exp_se3(twist)
        scans.append(simulate_lidar_scan(spec.scene, spec.lidar, pose,
                                         rng=rng, noise_sigma=spec.range_noise_sigma))
        if spec.camera is not None:
            cam_pose = derive_camera_pose(pose, ext)
            images.append(simulate_camera_image(spec.scene, spec.camera, cam_pose,
                                                rng=rng, noise_sigma=spec.color_noise_sigma))
    return scans, images
