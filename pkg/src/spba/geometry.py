"""Lie-group camera math: exponential-map rotations, pose composition, projection.

Poses are 6-vectors [omega; t] ("twists"): exponential rotation coordinates
plus a world-frame translation. Composition follows the convention that the
rotation parts multiply while the translation parts add in the world frame,
so global poses must always be built through :func:`compose`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError

SMALL_ANGLE = 1e-8
MIN_DEPTH = 1e-6


def _wrap_principal(omega: np.ndarray) -> np.ndarray:
    """Wrap a rotation vector so its angle lies in [0, pi]."""
    theta = float(np.linalg.norm(omega))
    if theta <= np.pi or theta < SMALL_ANGLE:
        return omega
    wrapped = theta - 2.0 * np.pi * np.round(theta / (2.0 * np.pi))
    return omega * (wrapped / theta)


@dataclass(frozen=True)
class Twist:
    """6-DoF camera extrinsic: rotation vector ``omega`` plus translation ``t``."""

    omega: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float).reshape(3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(t))):
            raise ValueError("twist components must be finite")
        omega = _wrap_principal(omega)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.t])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def check_rotation(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Validate a 3x3 rotation matrix (orthonormal, det +1)."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"expected 3x3 rotation, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("rotation matrix must be finite")
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol:
        raise ValueError("matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix determinant is not +1")
    return R


def exp_rotation(omega: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for the axis-angle vector ``omega``.

    Falls back to the second-order Taylor expansion below ``SMALL_ANGLE`` so
    the map (and its derivatives) stay finite near the identity.
    """
    omega = np.asarray(omega, dtype=float).reshape(3)
    if not np.all(np.isfinite(omega)):
        raise ValueError("omega must be finite")
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``, in the principal branch (angle <= pi)."""
    R = check_rotation(R)
    trace = float(np.trace(R))
    cos_theta = np.clip(0.5 * (trace - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < SMALL_ANGLE:
        # First-order: log(R) is the skew part.
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - theta < 1e-6:
        # Near pi the sin-based formula degenerates; take the axis from the
        # symmetric part: R + I = 2 a a^T (1 + cos) / ... -> diag dominates.
        A = 0.5 * (R + np.eye(3))
        axis_idx = int(np.argmax(np.diag(A)))
        axis = A[:, axis_idx] / np.sqrt(max(A[axis_idx, axis_idx], 1e-12))
        axis = axis / np.linalg.norm(axis)
        # Resolve the sign so exp(theta*axis) reproduces R's skew part.
        sin_part = np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        )
        if np.dot(sin_part, axis) < 0:
            axis = -axis
        return axis * theta
    scale = theta / (2.0 * np.sin(theta))
    return scale * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def left_jacobian(omega: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): d exp((omega+d)^) = exp((J d)^) exp(omega^)."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


def compose(delta: Twist, base: Twist) -> Twist:
    """Compose a relative pose onto a base pose.

    Rotations multiply (exp(out.omega) = exp(delta.omega) exp(base.omega));
    translations add componentwise in the world frame.
    """
    R = exp_rotation(delta.omega) @ exp_rotation(base.omega)
    return Twist(log_rotation(R), delta.t + base.t)


def camera_center(pose: Twist) -> np.ndarray:
    """World-frame camera center: c = -R^T t."""
    return -exp_rotation(pose.omega).T @ pose.t


def look_at_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Twist:
    """Camera twist for a camera at ``position`` looking at ``target``.

    Camera axes follow the usual convention: x right, y down, z forward.
    Degenerates when the viewing direction is parallel to ``up``.
    """
    position = np.asarray(position, dtype=float).reshape(3)
    target = np.asarray(target, dtype=float).reshape(3)
    up = np.asarray(up, dtype=float).reshape(3)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    forward = forward / norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    right = right / rnorm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Twist(log_rotation(R), -R @ position)


def project(x: np.ndarray, pose: Twist, K: Intrinsics):
    """Project one world point; returns (pixel 2-vector, inverse depth).

    Raises :class:`BehindCameraError` when the camera-frame depth is not
    safely positive; callers exclude such points from downstream sums.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    y = exp_rotation(pose.omega) @ x + pose.t
    if y[2] <= MIN_DEPTH:
        raise BehindCameraError(f"point depth {y[2]:.3g} <= {MIN_DEPTH:.0e}")
    pixel = np.array([K.fx * y[0] / y[2] + K.cx, K.fy * y[1] / y[2] + K.cy])
    return pixel, 1.0 / y[2]


def transform_points(points: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Apply y = R x + t to an (N,3) array."""
    return points @ R.T + t


def project_points(points: np.ndarray, R: np.ndarray, t: np.ndarray, K: Intrinsics):
    """Vectorized pinhole projection of (N,3) world points.

    Returns (pixels (N,2), invdepth (N,), valid (N,) bool). Points with
    camera-frame depth <= MIN_DEPTH are flagged invalid; their pixel and
    inverse-depth entries are unspecified.
    """
    cam = transform_points(points, R, t)
    z = cam[:, 2]
    valid = z > MIN_DEPTH
    z_safe = np.where(valid, z, 1.0)
    pixels = np.empty((points.shape[0], 2))
    pixels[:, 0] = K.fx * cam[:, 0] / z_safe + K.cx
    pixels[:, 1] = K.fy * cam[:, 1] / z_safe + K.cy
    invdepth = np.where(valid, 1.0 / z_safe, 0.0)
    return pixels, invdepth, valid


def pixel_jacobian(cam_points: np.ndarray, K: Intrinsics) -> np.ndarray:
    """d(pixel)/d(camera point) for (N,3) camera-frame points -> (N,2,3)."""
    X, Y, Z = cam_points[:, 0], cam_points[:, 1], cam_points[:, 2]
    inv_z = 1.0 / Z
    J = np.zeros((cam_points.shape[0], 2, 3))
    J[:, 0, 0] = K.fx * inv_z
    J[:, 0, 2] = -K.fx * X * inv_z * inv_z
    J[:, 1, 1] = K.fy * inv_z
    J[:, 1, 2] = -K.fy * Y * inv_z * inv_z
    return J


def invdepth_jacobian(cam_points: np.ndarray) -> np.ndarray:
    """d(1/Z)/d(camera point) for (N,3) camera-frame points -> (N,3)."""
    Z = cam_points[:, 2]
    J = np.zeros_like(cam_points)
    J[:, 2] = -1.0 / (Z * Z)
    return J
