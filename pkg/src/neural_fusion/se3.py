"""Rigid-body poses as se(3) twists and their exponential/log maps.

A twist stacks a translation part ``rho`` and a rotation part ``phi``
(axis-angle).  ``exp_se3`` uses Rodrigues' formula with the left Jacobian
applied to ``rho``; coefficients switch to truncated series below a small
rotation angle so the map stays smooth through zero.  ``exp_twist_graph``
rebuilds the same map out of autodiff ops for pose optimization.

Pose convention: a transform maps sensor-frame points into the world,
``x_w = R x_s + t``.  Composition ``a.compose(b)`` applies ``b`` first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Below this rotation angle (radians) series expansions replace the
# closed-form Rodrigues coefficients.
SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class Twist:
    """se(3) element; ``rho`` is translational, ``phi`` axis-angle."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=np.float64).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _coefficients(theta2: float) -> tuple[float, float, float]:
    """(sin t/t, (1-cos t)/t^2, (t-sin t)/t^3) as functions of t^2."""
    if theta2 < SMALL_ANGLE**2:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
        c = (1.0 - a) / theta2
    return a, b, c


def exp_se3(twist: Twist) -> RigidTransform:
    """Exponential map: R from Rodrigues' formula, t = V rho."""
    phi = twist.phi
    theta2 = float(phi @ phi)
    a, b, c = _coefficients(theta2)
    k = skew(phi)
    k2 = k @ k
    rotation = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return RigidTransform(rotation, v @ twist.rho)


def log_so3(rotation: np.ndarray) -> np.ndarray:
    """Axis-angle of a rotation matrix, |phi| in [0, pi]."""
    r = np.asarray(rotation, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    w = vee(r - r.T)
    if theta < 1e-7:
        # phi = theta/(2 sin theta) * w -> (1/2)(1 + theta^2/6) w
        return 0.5 * (1.0 + theta * theta / 6.0) * w
    if math.pi - theta < 1e-7:
        # sin(theta) ~ 0 makes w unusable; recover the axis from
        # a a^T = (R + I)/2 and fix its sign with the largest component.
        m = (r + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(m)))
        axis = m[:, k] / math.sqrt(max(m[k, k], 1e-12))
        axis /= np.linalg.norm(axis)
        if w @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * w


def log_se3(transform: RigidTransform) -> Twist:
    """Inverse of exp_se3; rotation angle mapped into [0, pi]."""
    phi = log_so3(transform.rotation)
    theta2 = float(phi @ phi)
    if theta2 < SMALL_ANGLE**2:
        d = 1.0 / 12.0 + theta2 / 720.0
    else:
        a, b, _ = _coefficients(theta2)
        d = (1.0 - a / (2.0 * b)) / theta2
    k = skew(phi)
    v_inv = np.eye(3) - 0.5 * k + d * (k @ k)
    return Twist(v_inv @ transform.translation, phi)


def rotation_angle(ra: np.ndarray, rb: np.ndarray | None = None) -> float:
    """Geodesic angle (radians) of ra, or between ra and rb."""
    r = ra if rb is None else ra @ np.asarray(rb).T
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return math.acos(cos_theta)


def derive_camera_pose(lidar_pose: RigidTransform, extrinsic: RigidTransform) -> RigidTransform:
    """Camera pose from a LiDAR pose and the LiDAR-to-camera extrinsic.

    R_C = R_e R_L and t_C = R_e t_L + t_e, i.e. the extrinsic applied on
    top of the LiDAR pose.
    """
    return extrinsic.compose(lidar_pose)


# Constant basis so a skew matrix is a linear map of phi inside the graph.
_SKEW_BASIS = (
    np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
    np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
)


def skew_graph(phi: Tensor) -> Tensor:
    parts = [ad.reshape(phi[i:i + 1], (1, 1)) * _SKEW_BASIS[i] for i in range(3)]
    return parts[0] + parts[1] + parts[2]


def exp_twist_graph(xi: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable exp_se3 of a 6-vector tensor [rho, phi].

    Returns (R, t) tensors of shape (3, 3) and (3,).  The small-angle
    branch is chosen from the current value; both branches are smooth in
    theta^2, so gradients stay correct on either side of the switch.
    """
    if xi.shape != (6,):
        raise ValueError(f"twist tensor must have shape (6,), got {xi.shape}")
    rho = ad.reshape(xi[0:3], (3, 1))
    phi = xi[3:6]
    theta2 = ad.tensor_sum(ad.square(phi))
    if float(theta2.values) < SMALL_ANGLE**2:
        a = 1.0 - theta2 / 6.0 + ad.square(theta2) / 120.0
        b = 0.5 - theta2 / 24.0 + ad.square(theta2) / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + ad.square(theta2) / 5040.0
    else:
        theta = ad.sqrt(theta2)
        a = ad.sin(theta) / theta
        b = (1.0 - ad.cos(theta)) / theta2
        c = (1.0 - a) / theta2
    k = skew_graph(phi)
    k2 = ad.matmul(k, k)
    eye = np.eye(3)
    rotation = eye + a * k + b * k2
    v = eye + b * k + c * k2
    translation = ad.reshape(ad.matmul(v, rho), (3,))
    return rotation, translation
