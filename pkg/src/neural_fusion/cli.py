"""Command-line entry points for simulation, training, and evaluation.

Exit codes: 0 on success, 1 when training diverges, 2 on invalid
arguments or malformed inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .dataio import (Checkpoint, atomic_write_json, load_checkpoint,
                     load_dataset, save_checkpoint, write_depth_png,
                     write_extrinsic_history, write_image, write_scan)
from .evaluation import (evaluate_extrinsic, evaluate_trajectory, psnr,
                         render_camera_view, render_lidar_depth)
from .se3 import Twist, derive_camera_pose, exp_se3, log_se3, rotation_angle
from .sensors import CameraModel, LidarModel
from .training import (TrainConfig, TrainingDiverged, estimate_poses_and_density,
                       train_color_and_extrinsic, train_density_given_poses)
from .world import (DatasetSpec, box_room_scene, scene_from_dict,
                    straight_trajectory)

logger = logging.getLogger(__name__)


def _parse_twist(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 6:
        raise ValueError(f"twist needs 6 comma-separated numbers, got {text!r}")
    return np.array([float(p) for p in parts], dtype=np.float64)


def _parse_floats(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip() != ""]


def _load_train_config(args) -> TrainConfig:
    base = TrainConfig.desk_scale() if args.desk_scale else TrainConfig()
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(overrides, dict):
            raise ValueError(f"{args.config}: top level must be an object")
    merged = base.to_dict()
    merged.update(overrides)
    cfg = TrainConfig.from_dict(merged)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# simulate


def _build_camera(args) -> CameraModel | None:
    if args.camera == "none":
        return None
    if args.camera == "pinhole":
        return CameraModel.pinhole(args.image_width, args.image_height,
                                   args.fov_degrees)
    return CameraModel.equirectangular(args.image_width, args.image_height)


def _build_scene(name: str):
    if name == "box-room":
        return box_room_scene()
    path = Path(name)
    if not path.is_file():
        raise ValueError(f"scene {name!r}: not a preset and not a file")
    try:
        return scene_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from e


def cmd_simulate(args) -> int:
    from .dataio import write_dataset

    scene = _build_scene(args.scene)
    lidar = LidarModel(rows=args.lidar_rows, cols=args.lidar_cols)
    camera = _build_camera(args)
    ext = Twist.from_vector(_parse_twist(args.extrinsic))
    spec = DatasetSpec(scene=scene, lidar=lidar, camera=camera,
                       lidar_twists=straight_trajectory(args.frames, args.step),
                       extrinsic=ext,
                       range_noise_sigma=args.range_noise,
                       color_noise_sigma=args.color_noise,
                       seed=args.seed)
    out = write_dataset(spec, Path(args.out))
    print(f"wrote {args.frames} frames to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    ds = load_dataset(Path(args.data))
    cfg = _load_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"mode": args.mode, "config": cfg.to_dict()}

    t0 = time.time()
    if args.mode == "given-poses":
        if ds.lidar_twists is None:
            raise ValueError("dataset has no per-frame poses; use --mode estimate-poses")
        twists = ds.lidar_twists
        density = train_density_given_poses(ds.scans, ds.lidar, twists, cfg)
        keyframes = None
    else:
        density, traj = estimate_poses_and_density(ds.scans, ds.lidar, cfg)
        twists = traj.twists
        keyframes = traj.keyframes
        report["keyframes"] = keyframes
    report["density_seconds"] = round(time.time() - t0, 1)
    report["holdout_depth_rmse"] = density.holdout_rmse
    report["density_final_loss"] = density.final_loss
    print(f"density stage done in {report['density_seconds']} s, "
          f"holdout depth rmse {density.holdout_rmse:.4f} m")

    extrinsic = None
    color_params = None
    color_config = None
    images = [im for im in ds.images if im is not None]
    if images and not args.no_color:
        if len(images) != ds.n_frames:
            raise ValueError("color stage needs an image for every frame")
        ext_init = _parse_twist(args.extrinsic_init) if args.extrinsic_init else None
        t0 = time.time()
        cal = train_color_and_extrinsic(images, ds.camera, twists, density.field,
                                        cfg, extrinsic_init=ext_init)
        report["color_seconds"] = round(time.time() - t0, 1)
        report["photometric_final_loss"] = cal.final_loss
        report["extrinsic"] = [float(x) for x in cal.extrinsic]
        extrinsic = cal.extrinsic
        color_params = [p.values for p in cal.color_field.parameters()]
        color_config = cfg.color_field_config()
        write_extrinsic_history(out / "extrinsic_history.csv", cal.history)
        print(f"color stage done in {report['color_seconds']} s, "
              f"extrinsic {np.array2string(cal.extrinsic, precision=4)}")

    ckpt = Checkpoint(scene_box=density.scene_box,
                      density_config=cfg.density_field_config(),
                      density_params=[p.values for p in density.field.parameters()],
                      color_config=color_config,
                      color_params=color_params,
                      extrinsic=extrinsic,
                      lidar_twists=np.asarray(twists, dtype=np.float64),
                      keyframes=keyframes)
    save_checkpoint(out / "checkpoint.infc", ckpt)
    atomic_write_json(out / "report.json", report)
    print(f"checkpoint and report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# render / export-depth


def cmd_render(args) -> int:
    ckpt = load_checkpoint(Path(args.checkpoint))
    density = ckpt.restore_density()
    color = ckpt.restore_color()
    camera = (CameraModel.pinhole(args.image_width, args.image_height, args.fov_degrees)
              if args.camera == "pinhole"
              else CameraModel.equirectangular(args.image_width, args.image_height))
    t_far = args.t_far if args.t_far is not None else ckpt.scene_box.diagonal()
    twist = _parse_twist(args.twist)
    image, depth = render_camera_view(density, color, camera, twist,
                                      args.samples, args.t_near, t_far)
    write_image(Path(args.out), image)
    print(f"wrote {args.out}")
    if args.depth_out:
        write_depth_png(Path(args.depth_out), depth)
        print(f"wrote {args.depth_out}")
    return 0


def cmd_export_depth(args) -> int:
    ckpt = load_checkpoint(Path(args.checkpoint))
    density = ckpt.restore_density()
    lidar = LidarModel(rows=args.lidar_rows, cols=args.lidar_cols)
    t_far = args.t_far if args.t_far is not None else ckpt.scene_box.diagonal()
    twist = _parse_twist(args.twist)
    depth, opacity = render_lidar_depth(density, lidar, twist,
                                        args.samples, args.t_near, t_far)
    wrote = []
    if args.out_scan:
        write_scan(Path(args.out_scan), depth.astype(np.float32))
        wrote.append(args.out_scan)
    if args.out_png:
        write_depth_png(Path(args.out_png), depth, invalid=opacity < 0.5)
        wrote.append(args.out_png)
    if not wrote:
        raise ValueError("need --out-scan and/or --out-png")
    print("wrote " + ", ".join(wrote))
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    ds = load_dataset(Path(args.data))
    run = Path(args.run)
    ckpt = load_checkpoint(run / "checkpoint.infc")
    cfg = _load_train_config(args)
    density = ckpt.restore_density()
    t_far = cfg.resolve_t_far(ckpt.scene_box)
    report: dict = {}

    if ckpt.lidar_twists is not None and ds.gt_lidar_twists is not None:
        err = evaluate_trajectory(ckpt.lidar_twists, ds.gt_lidar_twists)
        report["trajectory"] = {
            "ape_translation_m": err.ape_translation,
            "ape_rotation_deg": err.ape_rotation_deg,
            "rpe_translation_m": err.rpe_translation,
            "rpe_rotation_deg": err.rpe_rotation_deg,
        }
        print(f"APE {err.ape_translation:.4f} m / {err.ape_rotation_deg:.3f} deg, "
              f"RPE {err.rpe_translation:.4f} m / {err.rpe_rotation_deg:.3f} deg")

    if ckpt.extrinsic is not None and ds.gt_extrinsic is not None:
        err = evaluate_extrinsic(ckpt.extrinsic, ds.gt_extrinsic)
        report["extrinsic"] = {
            "translation_abs_m": [float(x) for x in err.translation_abs],
            "rotation_deg": err.rotation_deg,
        }
        print(f"extrinsic error {np.array2string(err.translation_abs, precision=4)} m, "
              f"{err.rotation_deg:.3f} deg")

    if ckpt.lidar_twists is not None:
        rng = np.random.default_rng(0)
        sq, count = 0.0, 0
        for scan, twist in zip(ds.scans, ckpt.lidar_twists):
            depth, _ = render_lidar_depth(density, ds.lidar, twist,
                                          cfg.lidar_samples, cfg.t_near, t_far)
            valid = scan > 0
            err = depth[valid] - scan[valid]
            if args.depth_rays and err.size > args.depth_rays:
                err = rng.choice(err, size=args.depth_rays, replace=False)
            sq += float(np.sum(err.astype(np.float64)**2))
            count += err.size
        report["depth_rmse_m"] = math.sqrt(sq / count)
        print(f"depth rmse over supplied poses: {report['depth_rmse_m']:.4f} m")

    if (ckpt.color_params is not None and ckpt.extrinsic is not None
            and ds.camera is not None and ds.images[0] is not None):
        color = ckpt.restore_color()
        ext = exp_se3(Twist.from_vector(ckpt.extrinsic))
        lidar_pose = exp_se3(Twist.from_vector(ckpt.lidar_twists[0]))
        cam_pose = derive_camera_pose(lidar_pose, ext)
        cam_twist = log_se3(cam_pose).as_vector()
        image, _ = render_camera_view(density, color, ds.camera, cam_twist,
                                      cfg.camera_samples, cfg.t_near, t_far)
        report["psnr_frame0_db"] = psnr(image, ds.images[0])
        print(f"frame-0 psnr {report['psnr_frame0_db']:.2f} dB")

    out = Path(args.out) if args.out else run / "evaluation.json"
    atomic_write_json(out, report)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# sweep (extrinsic convergence basin)


def cmd_sweep(args) -> int:
    ds = load_dataset(Path(args.data))
    if ds.gt_extrinsic is None:
        raise ValueError("sweep needs ground-truth extrinsic in the dataset")
    images = [im for im in ds.images if im is not None]
    if len(images) != ds.n_frames:
        raise ValueError("sweep needs an image for every frame")
    if ds.lidar_twists is None:
        raise ValueError("sweep needs per-frame poses in the dataset")
    cfg = _load_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    density = train_density_given_poses(ds.scans, ds.lidar, ds.lidar_twists, cfg)
    print(f"shared density stage: {time.time() - t0:.0f} s, "
          f"holdout rmse {density.holdout_rmse:.4f} m")

    t_axis = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
    r_axis = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
    gt = exp_se3(Twist.from_vector(ds.gt_extrinsic))
    rows = []
    for tb in _parse_floats(args.translation_biases):
        for rb in _parse_floats(args.rotation_biases_deg):
            bias = exp_se3(Twist(tb * t_axis, math.radians(rb) * r_axis))
            init = log_se3(gt.compose(bias)).as_vector()
            t0 = time.time()
            cal = train_color_and_extrinsic(images, ds.camera, ds.lidar_twists,
                                            density.field, cfg,
                                            extrinsic_init=init)
            err = evaluate_extrinsic(cal.extrinsic, ds.gt_extrinsic)
            ok = bool(err.translation_max < args.tol_translation
                      and err.rotation_deg < args.tol_rotation_deg)
            rows.append((tb, rb, err.translation_max, err.rotation_deg,
                         int(ok), round(time.time() - t0, 1)))
            print(f"bias {tb:.3f} m / {rb:.1f} deg -> error "
                  f"{err.translation_max:.4f} m / {err.rotation_deg:.3f} deg "
                  f"{'ok' if ok else 'FAILED'}")
    lines = ["t_bias_m,r_bias_deg,err_t_m,err_r_deg,converged,seconds"]
    lines += [",".join(str(v) for v in row) for row in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'sweep.csv'}")
    return 0 if all(r[4] for r in rows) else 1


# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig overrides")
    p.add_argument("--desk-scale", action="store_true",
                   help="start from the small CPU-minutes profile")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neural-fusion",
        description="Neural density/color fields from lidar scans and images, "
                    "with pose and extrinsic estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", default="box-room",
                   help="preset name or scene JSON file")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--lidar-rows", type=int, default=32)
    p.add_argument("--lidar-cols", type=int, default=256)
    p.add_argument("--camera", choices=["pinhole", "equirectangular", "none"],
                   default="pinhole")
    p.add_argument("--image-width", type=int, default=320)
    p.add_argument("--image-height", type=int, default=240)
    p.add_argument("--fov-degrees", type=float, default=90.0)
    p.add_argument("--extrinsic", default="0,0,0,0,0,0",
                   help="lidar-to-camera twist tx,ty,tz,rx,ry,rz")
    p.add_argument("--range-noise", type=float, default=0.0)
    p.add_argument("--color-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train fields (and poses/extrinsic)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["given-poses", "estimate-poses"],
                   default="given-poses")
    p.add_argument("--no-color", action="store_true",
                   help="skip the color/extrinsic stage")
    p.add_argument("--extrinsic-init", default=None,
                   help="initial extrinsic twist (default zeros)")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a camera view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--twist", default="0,0,0,0,0,0", help="camera pose twist")
    p.add_argument("--camera", choices=["pinhole", "equirectangular"],
                   default="pinhole")
    p.add_argument("--image-width", type=int, default=320)
    p.add_argument("--image-height", type=int, default=240)
    p.add_argument("--fov-degrees", type=float, default=90.0)
    p.add_argument("--samples", type=int, default=96)
    p.add_argument("--t-near", type=float, default=0.25)
    p.add_argument("--t-far", type=float, default=None)
    p.add_argument("--depth-out", default=None,
                   help="also write a 16-bit depth PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-depth", help="render lidar-grid depth from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--twist", default="0,0,0,0,0,0", help="lidar pose twist")
    p.add_argument("--lidar-rows", type=int, default=32)
    p.add_argument("--lidar-cols", type=int, default=256)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--t-near", type=float, default=0.25)
    p.add_argument("--t-far", type=float, default=None)
    p.add_argument("--out-scan", default=None, help="binary range image path")
    p.add_argument("--out-png", default=None, help="16-bit mm depth PNG path")
    p.set_defaults(func=cmd_export_depth)

    p = sub.add_parser("evaluate", help="compare a training run against a dataset")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--depth-rays", type=int, default=0,
                   help="subsample depth evaluation to this many rays per frame")
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="extrinsic convergence-basin sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--translation-biases", default="0,0.1,0.2")
    p.add_argument("--rotation-biases-deg", default="0,5,10")
    p.add_argument("--tol-translation", type=float, default=0.05)
    p.add_argument("--tol-rotation-deg", type=float, default=1.0)
    _add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
