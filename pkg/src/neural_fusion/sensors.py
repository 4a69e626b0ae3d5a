"""Sensor ray models and range-image normal estimation.

The LiDAR samples a regular spherical grid: row r has a fixed elevation
(evenly spaced, endpoints included, row 0 lowest) and column c the
azimuth 2*pi*c/cols.  A range of 0 marks a missing return.  The camera
is either an ideal pinhole (+z forward, +y down in pixel space) or an
equirectangular panorama whose pixel grid maps linearly onto a full
(2*pi, pi) azimuth/elevation span.  All pixel coordinates are continuous
with pixel (i, j) covering [i, i+1) x [j, j+1), center at +0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LidarModel:
    rows: int = 32
    cols: int = 256
    elevation_min: float = -math.pi / 4
    elevation_max: float = math.pi / 4
    range_min: float = 0.25
    range_max: float = 35.0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("LiDAR grid needs at least 2 rows and 2 columns")
        if not (-math.pi / 2 <= self.elevation_min < self.elevation_max <= math.pi / 2):
            raise ValueError("elevation bounds must satisfy -pi/2 <= min < max <= pi/2")
        if not (0 < self.range_min < self.range_max):
            raise ValueError("range bounds must satisfy 0 < min < max")

    def elevations(self) -> np.ndarray:
        return np.linspace(self.elevation_min, self.elevation_max, self.rows)

    def azimuths(self) -> np.ndarray:
        return 2.0 * math.pi * np.arange(self.cols) / self.cols

    def ray_directions(self) -> np.ndarray:
        """Unit directions (rows, cols, 3): (cos el cos az, cos el sin az, sin el)."""
        el = self.elevations()[:, None]
        az = self.azimuths()[None, :]
        return np.stack(
            [
                np.cos(el) * np.cos(az),
                np.cos(el) * np.sin(az),
                np.broadcast_to(np.sin(el), (self.rows, self.cols)),
            ],
            axis=-1,
        )


@dataclass(frozen=True)
class CameraModel:
    kind: str
    width: int
    height: int
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if self.kind not in ("pinhole", "equirectangular"):
            raise ValueError(f"unknown camera kind: {self.kind!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.kind == "pinhole" and (self.fx <= 0 or self.fy <= 0):
            raise ValueError("pinhole camera needs positive focal lengths")

    @staticmethod
    def pinhole(width: int, height: int, fov_x_degrees: float = 90.0) -> "CameraModel":
        fx = width / (2.0 * math.tan(math.radians(fov_x_degrees) / 2.0))
        return CameraModel("pinhole", width, height, fx=fx, fy=fx,
                           cx=width / 2.0, cy=height / 2.0)

    @staticmethod
    def equirectangular(width: int, height: int) -> "CameraModel":
        return CameraModel("equirectangular", width, height)

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit camera-frame ray directions for continuous pixel coords."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if np.any(u < 0) or np.any(u > self.width) or np.any(v < 0) or np.any(v > self.height):
            raise ValueError("pixel coordinates out of image bounds")
        if self.kind == "pinhole":
            x = (u - self.cx) / self.fx
            y = (v - self.cy) / self.fy
            d = np.stack([x, y, np.ones_like(x)], axis=-1)
            return d / np.linalg.norm(d, axis=-1, keepdims=True)
        azimuth = (u / self.width - 0.5) * 2.0 * math.pi
        elevation = (0.5 - v / self.height) * math.pi
        ce = np.cos(elevation)
        return np.stack([ce * np.sin(azimuth), -np.sin(elevation), ce * np.cos(azimuth)], axis=-1)

    def pixel_grid_rays(self) -> np.ndarray:
        """Rays through all pixel centers, shape (height, width, 3)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return self.pixel_rays(uu, vv)


@dataclass(frozen=True)
class RangeNormals:
    """Unit surface normals per LiDAR pixel, in the sensor frame."""

    normals: np.ndarray
    valid: np.ndarray


def estimate_normals(ranges: np.ndarray, model: LidarModel) -> RangeNormals:
    """Normals from central differences of the back-projected range grid.

    Columns wrap around (azimuth is periodic); row edges and pixels whose
    four neighbors include a missing return are invalid, as are degenerate
    cross products.  Normals are oriented to face the sensor.
    """
    ranges = np.asarray(ranges, dtype=np.float64)
    if ranges.shape != (model.rows, model.cols):
        raise ValueError(f"range image shape {ranges.shape} does not match model grid")
    dirs = model.ray_directions()
    points = ranges[..., None] * dirs
    returned = ranges > 0

    col_next = np.roll(points, -1, axis=1)
    col_prev = np.roll(points, 1, axis=1)
    col_ok = np.roll(returned, -1, axis=1) & np.roll(returned, 1, axis=1)

    row_next = np.empty_like(points)
    row_prev = np.empty_like(points)
    row_next[:-1] = points[1:]
    row_prev[1:] = points[:-1]
    row_next[-1] = 0.0
    row_prev[0] = 0.0
    row_ok = np.zeros_like(returned)
    row_ok[1:-1] = returned[2:] & returned[:-2]

    d_col = col_next - col_prev
    d_row = row_next - row_prev
    normals = np.cross(d_col, d_row)
    norms = np.linalg.norm(normals, axis=-1)
    valid = returned & col_ok & row_ok & (norms > 1e-12)
    safe = np.where(norms > 1e-12, norms, 1.0)[..., None]
    normals = normals / safe
    # Flip so the normal points back toward the sensor along the ray.
    facing_away = np.sum(normals * dirs, axis=-1) > 0
    normals[facing_away] *= -1.0
    normals[~valid] = 0.0
    return RangeNormals(normals=normals, valid=valid)
