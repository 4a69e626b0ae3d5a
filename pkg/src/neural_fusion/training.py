"""Training loops for the fusion pipeline.

Three stages share one machinery:

* density from range scans with known sensor poses,
* density plus per-frame poses estimated jointly (keyframe loop:
  track each incoming frame against the frozen field, then refine the
  field together with the non-keyframe poses of a local window),
* color plus the lidar-to-camera extrinsic against a frozen density
  field.

All randomness is drawn from per-iteration generators seeded by
(config seed, stage tag, counters), so results are bitwise reproducible
and independent of how stages are interleaved.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .fields import ColorField, DensityField, FieldConfig, SceneBox
from .losses import (DensityLossWeights, density_loss, depth_loss,
                     depth_weights, empty_loss, opacity_loss,
                     photometric_loss)
from .render import RaySamples, render, sample_depths
from .se3 import Twist, exp_se3, exp_twist_graph
from .sensors import CameraModel, LidarModel, estimate_normals

logger = logging.getLogger(__name__)

# stage tags for the deterministic per-iteration rng streams
_TAG_DENSITY = 0
_TAG_TRACK = 1
_TAG_MAP = 2
_TAG_COLOR = 3
_TAG_SPLIT = 4


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries stage and iteration."""

    def __init__(self, stage: str, iteration: int):
        super().__init__(f"{stage}: non-finite loss at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


@dataclass
class TrainConfig:
    """Knobs for all training stages; defaults target full-scale runs.

    ``t_far`` and ``empty_epsilon`` may be left None to derive them from
    the scene box diagonal and the sample spacing respectively.
    """
    # field architecture
    density_frequencies: int = 10
    color_frequencies: int = 6
    hidden_units: int = 128
    hidden_layers: int = 4
    # ray sampling
    lidar_samples: int = 128
    camera_samples: int = 96
    t_near: float = 0.25
    t_far: float | None = None
    # batching
    ray_batch: int = 2048
    no_return_fraction: float = 0.125
    holdout_fraction: float = 0.02
    # loss weights
    edge_lambda: float = 0.8
    empty_alpha: float = 0.2
    opacity_beta: float = 0.1
    empty_epsilon: float | None = None
    # optimization
    field_lr: float = 5e-4
    pose_lr: float = 1e-3
    extrinsic_lr: float = 1e-3
    density_iters: int = 2000
    tracking_iters: int = 200
    local_map_iters: int = 2000
    color_iters: int = 2000
    keyframe_distance: float = 0.3
    # bookkeeping
    seed: int = 0
    scene_padding: float = 0.1
    density_output_bias: float = -3.0
    history_every: int = 25
    log_every: int = 200

    def resolve_t_far(self, scene_box: SceneBox) -> float:
        return float(self.t_far) if self.t_far is not None else scene_box.diagonal()

    def resolve_epsilon(self, t_far: float, num_samples: int) -> float:
        if self.empty_epsilon is not None:
            return float(self.empty_epsilon)
        return 2.0 * (t_far - self.t_near) / num_samples

    def loss_weights(self) -> DensityLossWeights:
        return DensityLossWeights(edge_lambda=self.edge_lambda,
                                  empty_alpha=self.empty_alpha,
                                  opacity_beta=self.opacity_beta)

    def density_field_config(self) -> FieldConfig:
        return FieldConfig(num_frequencies=self.density_frequencies,
                           hidden_units=self.hidden_units,
                           hidden_layers=self.hidden_layers,
                           seed=self.seed,
                           output_bias=self.density_output_bias)

    def color_field_config(self) -> FieldConfig:
        return FieldConfig(num_frequencies=self.color_frequencies,
                           hidden_units=self.hidden_units,
                           hidden_layers=self.hidden_layers,
                           seed=self.seed + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Small profile for room-sized scenes on a CPU-minutes budget."""
        base = dict(
            density_frequencies=8,
            color_frequencies=6,
            hidden_units=64,
            hidden_layers=3,
            lidar_samples=64,
            camera_samples=64,
            ray_batch=1024,
            density_iters=1200,
            tracking_iters=120,
            local_map_iters=600,
            color_iters=1200,
        )
        base.update(overrides)
        return cls(**base)


def _rng(seed: int, tag: int, *key: int) -> np.random.Generator:
    return np.random.default_rng((seed, tag) + tuple(int(k) for k in key))


# ---------------------------------------------------------------------------
# per-frame ray banks


@dataclass
class FrameRays:
    """Flattened per-scan ray bundle in the sensor frame."""
    dirs: np.ndarray       # (m, 3) float64 unit directions
    ranges: np.ndarray     # (m,) float64, 0 marks no return
    weights: np.ndarray    # (m,) float64 depth-loss weights
    returned_idx: np.ndarray
    no_return_idx: np.ndarray


def prepare_frame(scan: np.ndarray, model: LidarModel,
                  edge_lambda: float) -> FrameRays:
    normals = estimate_normals(scan, model)
    eta = depth_weights(normals, edge_lambda)
    dirs = model.ray_directions().reshape(-1, 3)
    ranges = np.asarray(scan, dtype=np.float64).reshape(-1)
    flat = np.arange(ranges.size)
    returned = ranges > 0.0
    return FrameRays(dirs=dirs, ranges=ranges, weights=eta.reshape(-1),
                     returned_idx=flat[returned], no_return_idx=flat[~returned])


def scene_box_from_frames(frames: list[FrameRays], twists: np.ndarray,
                          padding: float) -> SceneBox:
    """Axis-aligned bounds of the return points and sensor origins."""
    pts = []
    for frame, twist in zip(frames, np.asarray(twists).reshape(-1, 6)):
        pose = exp_se3(Twist.from_vector(twist))
        hit = frame.returned_idx
        local = frame.dirs[hit] * frame.ranges[hit, None]
        pts.append(pose.apply(local))
        pts.append(pose.translation[None, :])
    if not pts:
        raise ValueError("no frames to derive a scene box from")
    return SceneBox.from_points(np.concatenate(pts), padding=padding)


def _compose_batch(rng: np.random.Generator, returned_idx: np.ndarray,
                   no_return_idx: np.ndarray, batch: int,
                   fraction: float) -> np.ndarray:
    """Uniform-with-replacement batch mixing returns and no-returns."""
    n_nr = int(round(batch * fraction)) if no_return_idx.size else 0
    n_nr = min(n_nr, batch - 1)  # keep at least one return in the batch
    n_r = batch - n_nr
    sel = [returned_idx[rng.integers(0, returned_idx.size, n_r)]]
    if n_nr:
        sel.append(no_return_idx[rng.integers(0, no_return_idx.size, n_nr)])
    return np.concatenate(sel)


def _density_batch_loss(result, depths, ranges, weights_eta, epsilon, lw):
    d_term = depth_loss(result.depth, ranges, weights_eta)
    e_term = empty_loss(result.weights, depths, ranges, epsilon)
    o_term = opacity_loss(result.opacity, ranges)
    return density_loss(d_term, e_term, o_term, lw)


def _check_finite(loss: Tensor, stage: str, iteration: int) -> float:
    value = float(loss.values)
    if not math.isfinite(value):
        raise TrainingDiverged(stage, iteration)
    return value


# ---------------------------------------------------------------------------
# stage: density field from scans with known poses


@dataclass
class DensityTrainResult:
    field: DensityField
    scene_box: SceneBox
    holdout_rmse: float
    final_loss: float


def _world_ray_pool(frames: list[FrameRays], twists: np.ndarray):
    origins = []
    dirs = []
    ranges = []
    eta = []
    for frame, twist in zip(frames, np.asarray(twists).reshape(-1, 6)):
        pose = exp_se3(Twist.from_vector(twist))
        d_world = frame.dirs @ pose.rotation.T
        origins.append(np.broadcast_to(pose.translation, d_world.shape))
        dirs.append(d_world)
        ranges.append(frame.ranges)
        eta.append(frame.weights)
    origins = np.concatenate(origins).astype(np.float32)
    dirs = np.concatenate(dirs).astype(np.float32)
    return origins, dirs, np.concatenate(ranges), np.concatenate(eta)


def evaluate_depth_rmse(field: DensityField, origins, dirs, ranges, cfg: TrainConfig,
                        t_far: float, chunk: int = 4096) -> float:
    """Midpoint-sampled expected-depth RMSE against observed ranges."""
    trainable = field.set_trainable(False)
    try:
        sq = 0.0
        for start in range(0, origins.shape[0], chunk):
            o = origins[start:start + chunk]
            d = dirs[start:start + chunk]
            depths, deltas = sample_depths(o.shape[0], cfg.lidar_samples,
                                           cfg.t_near, t_far)
            res = render(RaySamples(o, d, depths, deltas), field)
            err = res.depth.values.astype(np.float64) - ranges[start:start + chunk]
            sq += float(np.sum(err**2))
    finally:
        field.set_trainable(trainable)
    return math.sqrt(sq / origins.shape[0])


def train_density_given_poses(scans: list[np.ndarray], model: LidarModel,
                              twists: np.ndarray, cfg: TrainConfig,
                              ) -> DensityTrainResult:
    frames = [prepare_frame(s, model, cfg.edge_lambda) for s in scans]
    scene_box = scene_box_from_frames(frames, twists, cfg.scene_padding)
    field = DensityField(scene_box, cfg.density_field_config())
    t_far = cfg.resolve_t_far(scene_box)
    epsilon = cfg.resolve_epsilon(t_far, cfg.lidar_samples)
    lw = cfg.loss_weights()

    origins, dirs, ranges, eta = _world_ray_pool(frames, twists)
    returned = np.flatnonzero(ranges > 0.0)
    no_return = np.flatnonzero(ranges <= 0.0)

    split_rng = _rng(cfg.seed, _TAG_SPLIT)
    n_hold = int(round(cfg.holdout_fraction * returned.size))
    hold = split_rng.choice(returned, size=n_hold, replace=False) if n_hold else \
        np.empty(0, dtype=np.int64)
    train_returned = np.setdiff1d(returned, hold)

    adam = Adam(field.parameters(), lr=cfg.field_lr)
    value = math.nan
    for it in range(cfg.density_iters):
        rng = _rng(cfg.seed, _TAG_DENSITY, it)
        idx = _compose_batch(rng, train_returned, no_return,
                             cfg.ray_batch, cfg.no_return_fraction)
        depths, deltas = sample_depths(idx.size, cfg.lidar_samples,
                                       cfg.t_near, t_far, rng)
        res = render(RaySamples(origins[idx], dirs[idx], depths, deltas), field)
        loss = _density_batch_loss(res, depths, ranges[idx], eta[idx], epsilon, lw)
        value = _check_finite(loss, "density", it)
        loss.backward()
        adam.step()
        adam.zero_grad()
        if cfg.log_every and it % cfg.log_every == 0:
            logger.info("density iter %d loss %.6f", it, value)

    rmse = evaluate_depth_rmse(field, origins[hold], dirs[hold], ranges[hold],
                               cfg, t_far) if hold.size else math.nan
    return DensityTrainResult(field=field, scene_box=scene_box,
                              holdout_rmse=rmse, final_loss=value)


# ---------------------------------------------------------------------------
# stage: joint pose estimation (track + local map refinement)


def track_frame(field: DensityField, frame: FrameRays, init_twist: np.ndarray,
                cfg: TrainConfig, t_far: float, stream: tuple[int, ...],
                ) -> np.ndarray:
    """Optimize a single frame pose against the frozen field."""
    epsilon = cfg.resolve_epsilon(t_far, cfg.lidar_samples)
    lw = cfg.loss_weights()
    field.set_trainable(False)
    try:
        xi = Tensor(np.asarray(init_twist, dtype=np.float64).copy(),
                    requires_grad=True)
        adam = Adam([xi], lr=cfg.pose_lr)
        for it in range(cfg.tracking_iters):
            rng = _rng(cfg.seed, _TAG_TRACK, *stream, it)
            idx = _compose_batch(rng, frame.returned_idx, frame.no_return_idx,
                                 cfg.ray_batch, cfg.no_return_fraction)
            rot, trans = exp_twist_graph(xi)
            d = ad.matmul(Tensor(frame.dirs[idx]), ad.transpose(rot))
            o = ad.add(ad.reshape(trans, (1, 3)),
                       Tensor(np.zeros((idx.size, 3))))
            depths, deltas = sample_depths(idx.size, cfg.lidar_samples,
                                           cfg.t_near, t_far, rng)
            res = render(RaySamples(o, d, depths, deltas), field)
            loss = _density_batch_loss(res, depths, frame.ranges[idx],
                                       frame.weights[idx], epsilon, lw)
            _check_finite(loss, "tracking", it)
            loss.backward()
            adam.step()
            adam.zero_grad()
    finally:
        field.set_trainable(True)
    return xi.values.copy()


def optimize_local_map(field: DensityField, frames: dict[int, FrameRays],
                       twists: np.ndarray, free: list[int], cfg: TrainConfig,
                       t_far: float, iters: int, stream: tuple[int, ...],
                       ) -> None:
    """Refine the field and the listed frame poses jointly (in place)."""
    epsilon = cfg.resolve_epsilon(t_far, cfg.lidar_samples)
    lw = cfg.loss_weights()
    order = sorted(frames)
    free_set = set(free)

    # concatenated sensor-frame pool with per-ray frame ids
    dirs = np.concatenate([frames[k].dirs for k in order])
    ranges = np.concatenate([frames[k].ranges for k in order])
    eta = np.concatenate([frames[k].weights for k in order])
    frame_id = np.concatenate([np.full(frames[k].ranges.size, k) for k in order])
    returned = np.flatnonzero(ranges > 0.0)
    no_return = np.flatnonzero(ranges <= 0.0)

    pose_vars = {k: Tensor(twists[k].astype(np.float64).copy(),
                           requires_grad=True)
                 for k in order if k in free_set}
    fixed_pose = {k: exp_se3(Twist.from_vector(twists[k]))
                  for k in order if k not in free_set}

    adam_field = Adam(field.parameters(), lr=cfg.field_lr)
    adam_pose = Adam(list(pose_vars.values()), lr=cfg.pose_lr) \
        if pose_vars else None

    for it in range(iters):
        rng = _rng(cfg.seed, _TAG_MAP, *stream, it)
        idx = _compose_batch(rng, returned, no_return,
                             cfg.ray_batch, cfg.no_return_fraction)
        idx = idx[np.argsort(frame_id[idx], kind="stable")]

        o_parts = []
        d_parts = []
        for k in order:
            sub = idx[frame_id[idx] == k]
            if sub.size == 0:
                continue
            local = dirs[sub]
            if k in pose_vars:
                rot, trans = exp_twist_graph(pose_vars[k])
                d_parts.append(ad.matmul(Tensor(local), ad.transpose(rot)))
                o_parts.append(ad.add(ad.reshape(trans, (1, 3)),
                                      Tensor(np.zeros((sub.size, 3)))))
            else:
                pose = fixed_pose[k]
                d_parts.append(Tensor(local @ pose.rotation.T))
                o_parts.append(Tensor(np.broadcast_to(
                    pose.translation, (sub.size, 3)).copy()))
        o = ad.concat(o_parts, axis=0)
        d = ad.concat(d_parts, axis=0)

        depths, deltas = sample_depths(idx.size, cfg.lidar_samples,
                                       cfg.t_near, t_far, rng)
        res = render(RaySamples(o, d, depths, deltas), field)
        loss = _density_batch_loss(res, depths, ranges[idx], eta[idx],
                                   epsilon, lw)
        value = _check_finite(loss, "local-map", it)
        loss.backward()
        adam_field.step()
        adam_field.zero_grad()
        if adam_pose is not None:
            adam_pose.step()
            adam_pose.zero_grad()
        if cfg.log_every and it % cfg.log_every == 0:
            logger.info("local map %s iter %d loss %.6f", stream, it, value)

    for k, var in pose_vars.items():
        twists[k] = var.values


@dataclass
class TrajectoryEstimate:
    twists: np.ndarray       # (n, 6) float64
    keyframes: list[int]


def estimate_poses_and_density(scans: list[np.ndarray], model: LidarModel,
                               cfg: TrainConfig,
                               ) -> tuple[DensityTrainResult, TrajectoryEstimate]:
    """Keyframe loop: track incoming frames, refine map over local windows.

    Frame 0 is pinned at the identity and anchors the world frame.  A new
    keyframe is declared once the tracked travel distance since the last
    keyframe exceeds ``keyframe_distance``; the window up to (excluding)
    the frame that crossed the threshold is then jointly refined with the
    field, keeping the keyframe pose fixed.  The final window always
    includes the last frame.
    """
    n = len(scans)
    if n < 1:
        raise ValueError("need at least one scan")
    frames = [prepare_frame(s, model, cfg.edge_lambda) for s in scans]
    twists = np.zeros((n, 6), dtype=np.float64)

    scene_box = scene_box_from_frames(frames[:1], twists[:1], cfg.scene_padding)
    field = DensityField(scene_box, cfg.density_field_config())
    t_far = cfg.resolve_t_far(scene_box)

    map_runs = 0
    optimize_local_map(field, {0: frames[0]}, twists, free=[], cfg=cfg,
                       t_far=t_far, iters=cfg.local_map_iters,
                       stream=(map_runs,))
    map_runs += 1
    keyframes = [0]
    tracked = np.zeros(n, dtype=bool)
    tracked[0] = True

    i = 0
    while i < n - 1:
        dist = 0.0
        c = i
        while dist < cfg.keyframe_distance and c < n - 1:
            c += 1
            init = twists[c] if tracked[c] else twists[c - 1]
            twists[c] = track_frame(field, frames[c], init, cfg, t_far,
                                    stream=(c, map_runs))
            tracked[c] = True
            prev = exp_se3(Twist.from_vector(twists[c - 1])).translation
            curr = exp_se3(Twist.from_vector(twists[c])).translation
            dist += float(np.linalg.norm(curr - prev))
        end_reached = c == n - 1
        # window normally stops before the frame that crossed the threshold,
        # but must always advance past the keyframe (small thresholds would
        # otherwise refine an empty window forever)
        last = c if end_reached else max(c - 1, i + 1)
        window = {k: frames[k] for k in range(i, last + 1)}
        free = [k for k in range(i + 1, last + 1)]
        optimize_local_map(field, window, twists, free, cfg, t_far,
                           cfg.local_map_iters, stream=(map_runs,))
        map_runs += 1
        if end_reached:
            break
        i = last
        keyframes.append(i)

    origins, dirs, ranges, eta = _world_ray_pool(frames, twists)
    returned = np.flatnonzero(ranges > 0.0)
    split_rng = _rng(cfg.seed, _TAG_SPLIT)
    n_hold = int(round(cfg.holdout_fraction * returned.size))
    hold = split_rng.choice(returned, size=n_hold, replace=False) if n_hold else \
        np.empty(0, dtype=np.int64)
    rmse = evaluate_depth_rmse(field, origins[hold], dirs[hold], ranges[hold],
                               cfg, t_far) if hold.size else math.nan
    result = DensityTrainResult(field=field, scene_box=scene_box,
                                holdout_rmse=rmse, final_loss=math.nan)
    return result, TrajectoryEstimate(twists=twists, keyframes=keyframes)


# ---------------------------------------------------------------------------
# stage: color field + lidar-to-camera extrinsic


@dataclass
class CalibrationResult:
    color_field: ColorField
    extrinsic: np.ndarray    # (6,) twist
    history: np.ndarray      # rows: iteration, twist[6], photometric loss
    final_loss: float


def train_color_and_extrinsic(images: list[np.ndarray], camera: CameraModel,
                              lidar_twists: np.ndarray,
                              density_field: DensityField, cfg: TrainConfig,
                              extrinsic_init: np.ndarray | None = None,
                              ) -> CalibrationResult:
    """Fit color and the extrinsic twist by photometric error.

    Camera rays are expressed through the unknown extrinsic: with the
    per-frame lidar rotation folded into constant per-ray directions, a
    batch mixing all frames needs just two small matmuls against the
    extrinsic rotation.
    """
    if len(images) != np.asarray(lidar_twists).reshape(-1, 6).shape[0]:
        raise ValueError("one lidar pose per image required")
    scene_box = density_field.scene_box
    t_far = cfg.resolve_t_far(scene_box)
    color_field = ColorField(scene_box, cfg.color_field_config())

    cam_dirs = camera.pixel_grid_rays().reshape(-1, 3)
    d0 = []
    t_l = []
    obs = []
    for image, twist in zip(images, np.asarray(lidar_twists).reshape(-1, 6)):
        pose = exp_se3(Twist.from_vector(twist))
        d0.append(cam_dirs @ pose.rotation.T)
        t_l.append(np.broadcast_to(pose.translation, cam_dirs.shape))
        obs.append(np.asarray(image, dtype=np.float32).reshape(-1, 3))
    d0 = np.concatenate(d0)
    t_l = np.concatenate(t_l)
    obs = np.concatenate(obs)

    xi = Tensor(np.zeros(6) if extrinsic_init is None
                else np.asarray(extrinsic_init, dtype=np.float64).copy(),
                requires_grad=True)
    trainable = density_field.set_trainable(False)
    history: list[list[float]] = []
    try:
        adam_color = Adam(color_field.parameters(), lr=cfg.field_lr)
        adam_ext = Adam([xi], lr=cfg.extrinsic_lr)
        value = math.nan
        for it in range(cfg.color_iters):
            rng = _rng(cfg.seed, _TAG_COLOR, it)
            idx = rng.integers(0, obs.shape[0], cfg.ray_batch)
            rot, trans = exp_twist_graph(xi)
            d = ad.matmul(Tensor(d0[idx]), ad.transpose(rot))
            o = ad.add(ad.matmul(Tensor(t_l[idx]), ad.transpose(rot)),
                       ad.reshape(trans, (1, 3)))
            depths, deltas = sample_depths(idx.size, cfg.camera_samples,
                                           cfg.t_near, t_far, rng)
            res = render(RaySamples(o, d, depths, deltas), density_field,
                         color_field=color_field)
            loss = photometric_loss(res.color, obs[idx])
            value = _check_finite(loss, "color", it)
            if cfg.history_every and it % cfg.history_every == 0:
                history.append([float(it), *xi.values.tolist(), value])
            loss.backward()
            adam_color.step()
            adam_color.zero_grad()
            adam_ext.step()
            adam_ext.zero_grad()
            if cfg.log_every and it % cfg.log_every == 0:
                logger.info("color iter %d loss %.6f twist %s",
                            it, value, np.array2string(xi.values, precision=4))
        history.append([float(cfg.color_iters), *xi.values.tolist(), value])
    finally:
        density_field.set_trainable(trainable)
    return CalibrationResult(color_field=color_field,
                             extrinsic=xi.values.copy(),
                             history=np.array(history, dtype=np.float64),
                             final_loss=value)
