"""Trajectory/extrinsic metrics against hand-computed cases."""
import math

import numpy as np
import pytest

from neural_fusion import autodiff as ad
from neural_fusion.autodiff import Tensor
from neural_fusion.evaluation import (depth_rmse, evaluate_extrinsic,
                                      evaluate_trajectory, psnr,
                                      render_camera_view, render_lidar_depth)
from neural_fusion.se3 import Twist, exp_se3, log_se3
from neural_fusion.sensors import CameraModel, LidarModel


def _twists(translations, rotations=None):
    n = len(translations)
    rotations = rotations if rotations is not None else [np.zeros(3)] * n
    return np.stack([Twist(np.asarray(t, dtype=float), np.asarray(r, dtype=float)).as_vector()
                     for t, r in zip(translations, rotations)])


def test_identical_trajectories_zero_error():
    ref = _twists([[0, 0, 0], [0.1, 0, 0], [0.2, 0.05, 0]])
    err = evaluate_trajectory(ref, ref)
    assert err.ape_translation == 0.0
    assert err.ape_rotation_deg == 0.0
    assert err.rpe_translation == 0.0
    assert err.rpe_rotation_deg == 0.0


def test_global_rigid_offset_is_removed_by_alignment():
    # a constant world-frame offset of the whole estimate is not an error
    ref = _twists([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0.1, 0]])
    offset = exp_se3(Twist(np.array([0.5, -0.2, 0.3]),
                           np.array([0.0, 0.0, 0.4])))
    est = np.stack([
        log_se3(offset.compose(exp_se3(Twist.from_vector(v)))).as_vector()
        for v in ref
    ])
    err = evaluate_trajectory(est, ref)
    assert err.ape_translation < 1e-12
    assert err.ape_rotation_deg < 1e-9
    assert err.rpe_translation < 1e-12


def test_translation_offset_after_first_frame():
    # frames 1..n-1 shifted by c, frame 0 exact:
    # APE = |c| * sqrt((n-1)/n), RPE = |c| / sqrt(n-1)
    n = 5
    c = np.array([0.02, -0.01, 0.03])
    ref = _twists([[0.1 * k, 0, 0] for k in range(n)])
    est = ref.copy()
    est[1:, :3] += c
    err = evaluate_trajectory(est, ref)
    cn = np.linalg.norm(c)
    assert err.ape_translation == pytest.approx(cn * math.sqrt((n - 1) / n), rel=1e-12)
    assert err.rpe_translation == pytest.approx(cn / math.sqrt(n - 1), rel=1e-12)
    assert err.ape_rotation_deg == 0.0


def test_rotation_error_single_frame():
    n = 4
    theta = math.radians(3.0)
    ref = _twists([[0.1 * k, 0, 0] for k in range(n)])
    est = ref.copy()
    est[2, 3:] = [0.0, 0.0, theta]
    err = evaluate_trajectory(est, ref)
    assert err.ape_rotation_deg == pytest.approx(3.0 / math.sqrt(n), rel=1e-9)
    # the wrong rotation enters two consecutive relative motions
    assert err.rpe_rotation_deg == pytest.approx(3.0 * math.sqrt(2 / (n - 1)), rel=1e-9)


def test_trajectory_validation():
    ref = _twists([[0, 0, 0], [0.1, 0, 0]])
    with pytest.raises(ValueError):
        evaluate_trajectory(ref[:1], ref)
    with pytest.raises(ValueError):
        evaluate_trajectory(ref[:1], ref[:1])


def test_extrinsic_translation_error_per_axis():
    est = Twist(np.array([0.11, -0.02, 0.3]), np.zeros(3)).as_vector()
    ref = Twist(np.array([0.10, 0.00, 0.3]), np.zeros(3)).as_vector()
    err = evaluate_extrinsic(est, ref)
    assert np.allclose(err.translation_abs, [0.01, 0.02, 0.0], atol=1e-12)
    assert err.rotation_deg == pytest.approx(0.0, abs=1e-9)
    assert err.translation_max == pytest.approx(0.02)


def test_extrinsic_rotation_error():
    est = Twist(np.zeros(3), np.array([0.0, 0.0, math.radians(5.0)])).as_vector()
    ref = np.zeros(6)
    err = evaluate_extrinsic(est, ref)
    assert err.rotation_deg == pytest.approx(5.0, rel=1e-9)


def test_psnr_known_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.5) == pytest.approx(10 * math.log10(1 / 0.25))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_depth_rmse_masked():
    pred = np.array([1.0, 2.0, 5.0])
    obs = np.array([1.1, 2.0, 0.0])
    mask = obs > 0
    assert depth_rmse(pred, obs, mask) == pytest.approx(0.1 / math.sqrt(2), rel=1e-9)
    with pytest.raises(ValueError):
        depth_rmse(pred, obs, np.zeros(3, dtype=bool))


class _OpaqueField:
    """Constant huge density: every ray terminates in the first stratum."""

    def query(self, points, params=None):
        n = ad.as_tensor(points).shape[0]
        return Tensor(np.full(n, 1e4, dtype=np.float32))

    def set_trainable(self, flag):
        return False


class _OpaqueColorField:
    def query(self, points, params=None):
        pts = ad.as_tensor(points)
        n = pts.shape[0]
        return Tensor(np.tile(np.array([0.25, 0.5, 0.75], dtype=np.float32), (n, 1)))

    def set_trainable(self, flag):
        return False


def test_render_lidar_depth_shape_and_first_stratum():
    model = LidarModel(rows=4, cols=8, range_min=0.1, range_max=10.0)
    num_samples, t_near, t_far = 16, 0.25, 4.25
    depth, opacity = render_lidar_depth(_OpaqueField(), model, np.zeros(6),
                                        num_samples, t_near, t_far, chunk=13)
    assert depth.shape == (4, 8)
    assert opacity.shape == (4, 8)
    width = (t_far - t_near) / num_samples
    assert np.allclose(depth, t_near + width / 2, atol=1e-5)
    assert np.allclose(opacity, 1.0, atol=1e-6)


def test_render_camera_view_shape_and_color():
    camera = CameraModel.pinhole(6, 4, 90.0)
    image, depth = render_camera_view(_OpaqueField(), _OpaqueColorField(),
                                      camera, np.zeros(6), 8, 0.25, 2.25,
                                      chunk=7)
    assert image.shape == (4, 6, 3)
    assert depth.shape == (4, 6)
    assert np.allclose(image, [0.25, 0.5, 0.75], atol=1e-5)


def test_render_chunking_invariance():
    model = LidarModel(rows=3, cols=5)
    a = render_lidar_depth(_OpaqueField(), model, np.zeros(6), 8, 0.25, 2.0, chunk=4)
    b = render_lidar_depth(_OpaqueField(), model, np.zeros(6), 8, 0.25, 2.0, chunk=1000)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
