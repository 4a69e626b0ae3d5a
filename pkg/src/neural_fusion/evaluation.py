"""Trajectory, calibration, and image-quality metrics plus full renders.

Trajectory error follows the usual absolute/relative split: absolute
errors after rigidly aligning the first estimated pose to its reference
(no scale), relative errors over consecutive pose deltas.  Rotation
errors are geodesic angles in degrees, translation errors RMS meters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .render import RaySamples, render, sample_depths
from .se3 import RigidTransform, Twist, exp_se3, rotation_angle
from .sensors import CameraModel, LidarModel


@dataclass(frozen=True)
class TrajectoryError:
    ape_translation: float
    ape_rotation_deg: float
    rpe_translation: float
    rpe_rotation_deg: float


def _poses(twists: np.ndarray) -> list[RigidTransform]:
    return [exp_se3(Twist.from_vector(v)) for v in np.asarray(twists).reshape(-1, 6)]


def evaluate_trajectory(estimated: np.ndarray, reference: np.ndarray) -> TrajectoryError:
    """APE/RPE between two equally long twist sequences.

    The estimate is aligned so its first pose coincides with the first
    reference pose; a global rigid offset therefore does not count as
    error, matching evaluation against an arbitrary world anchor.
    """
    est = _poses(estimated)
    ref = _poses(reference)
    if len(est) != len(ref):
        raise ValueError("trajectories must have the same length")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    align = ref[0].compose(est[0].inverse())
    est = [align.compose(e) for e in est]

    t_err = np.array([np.linalg.norm(e.translation - r.translation)
                      for e, r in zip(est, ref)])
    r_err = np.array([rotation_angle(e.rotation, r.rotation)
                      for e, r in zip(est, ref)])

    rel_t = []
    rel_r = []
    for k in range(len(est) - 1):
        de = est[k].inverse().compose(est[k + 1])
        dr = ref[k].inverse().compose(ref[k + 1])
        diff = dr.inverse().compose(de)
        rel_t.append(np.linalg.norm(diff.translation))
        rel_r.append(rotation_angle(diff.rotation))
    return TrajectoryError(
        ape_translation=float(np.sqrt(np.mean(t_err**2))),
        ape_rotation_deg=float(math.degrees(np.sqrt(np.mean(r_err**2)))),
        rpe_translation=float(np.sqrt(np.mean(np.square(rel_t)))),
        rpe_rotation_deg=float(math.degrees(np.sqrt(np.mean(np.square(rel_r))))),
    )


@dataclass(frozen=True)
class ExtrinsicError:
    translation_abs: np.ndarray  # per-axis |dt|, meters
    rotation_deg: float

    @property
    def translation_max(self) -> float:
        return float(self.translation_abs.max())


def evaluate_extrinsic(estimated: np.ndarray, reference: np.ndarray) -> ExtrinsicError:
    """Per-axis translation error and geodesic rotation error."""
    e = exp_se3(Twist.from_vector(estimated))
    r = exp_se3(Twist.from_vector(reference))
    dt = np.abs(e.translation - r.translation)
    ang = math.degrees(rotation_angle(e.rotation, r.rotation))
    return ExtrinsicError(translation_abs=dt, rotation_deg=ang)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean(np.square(np.asarray(a, dtype=np.float64) - b)))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def depth_rmse(predicted: np.ndarray, observed: np.ndarray,
               mask: np.ndarray | None = None) -> float:
    err = np.asarray(predicted, dtype=np.float64) - observed
    if mask is not None:
        err = err[mask]
    if err.size == 0:
        raise ValueError("no rays to evaluate")
    return float(np.sqrt(np.mean(err**2)))


def _render_chunks(origins, dirs, density_field, color_field, num_samples,
                   t_near, t_far, chunk):
    depths_out = []
    opac_out = []
    color_out = []
    for start in range(0, origins.shape[0], chunk):
        o = origins[start:start + chunk]
        d = dirs[start:start + chunk]
        depths, deltas = sample_depths(o.shape[0], num_samples, t_near, t_far)
        res = render(RaySamples(o, d, depths, deltas), density_field,
                     color_field=color_field)
        depths_out.append(res.depth.values)
        opac_out.append(res.opacity.values)
        if color_field is not None:
            color_out.append(res.color.values)
    color = np.concatenate(color_out) if color_out else None
    return np.concatenate(depths_out), np.concatenate(opac_out), color


def render_lidar_depth(density_field, model: LidarModel, twist: np.ndarray,
                       num_samples: int, t_near: float, t_far: float,
                       chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Expected-depth and opacity images over the full scan grid."""
    pose = exp_se3(Twist.from_vector(twist))
    dirs = (model.ray_directions().reshape(-1, 3) @ pose.rotation.T).astype(np.float32)
    origins = np.broadcast_to(pose.translation, dirs.shape).astype(np.float32)
    depth, opacity, _ = _render_chunks(origins, dirs, density_field, None,
                                       num_samples, t_near, t_far, chunk)
    return (depth.reshape(model.rows, model.cols),
            opacity.reshape(model.rows, model.cols))


def render_camera_view(density_field, color_field, camera: CameraModel,
                       camera_twist: np.ndarray, num_samples: int,
                       t_near: float, t_far: float,
                       chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """RGB and expected-depth images for a posed camera."""
    pose = exp_se3(Twist.from_vector(camera_twist))
    dirs = (camera.pixel_grid_rays().reshape(-1, 3) @ pose.rotation.T).astype(np.float32)
    origins = np.broadcast_to(pose.translation, dirs.shape).astype(np.float32)
    depth, _, color = _render_chunks(origins, dirs, density_field, color_field,
                                     num_samples, t_near, t_far, chunk)
    image = color.reshape(camera.height, camera.width, 3)
    return image, depth.reshape(camera.height, camera.width)
