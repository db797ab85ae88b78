"""Rotation and rigid-pose algebra on SO(3) / SE(3).

Rotations are stored as axis-angle 3-vectors (``rotvec``): the direction is the
rotation axis and the norm is the angle in radians.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this angle the trigonometric coefficients switch to Taylor expansions.
SMALL_ANGLE = 1e-6
ORTHO_TOL = 1e-6


def hat(theta):
    """Skew-symmetric matrix such that ``hat(a) @ b == np.cross(a, b)``."""
    x, y, z = np.asarray(theta, dtype=float)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(W):
    """Inverse of :func:`hat` (uses the antisymmetric part of ``W``)."""
    W = np.asarray(W, dtype=float)
    return 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])


def _exp_coeffs(angle):
    # a = sin(t)/t, b = (1 - cos t)/t^2
    if angle < SMALL_ANGLE:
        t2 = angle * angle
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    return np.sin(angle) / angle, (1.0 - np.cos(angle)) / (angle * angle)


def so3_exp(theta):
    """Rodrigues' formula: axis-angle vector -> rotation matrix."""
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    a, b = _exp_coeffs(angle)
    W = hat(theta)
    return np.eye(3) + a * W + b * (W @ W)


def is_rotation(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def so3_log(R):
    """Rotation matrix -> axis-angle vector with angle in [0, pi].

    Raises ``ValueError`` if ``R`` is not a rotation matrix.
    """
    R = np.asarray(R, dtype=float)
    if not is_rotation(R):
        raise ValueError("so3_log: input is not a proper rotation matrix")
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    w = vee(R)  # sin(angle) * axis
    angle = float(np.arctan2(np.linalg.norm(w), cos_angle))
    if angle < SMALL_ANGLE:
        # t / sin t ~ 1 + t^2/6
        return (1.0 + angle * angle / 6.0) * w
    if np.pi - angle < 1e-3:
        # (R - R^T) vanishes near pi; recover the axis from the symmetric part.
        # symmetric part = cos I + (1 - cos) n n^T
        S = (0.5 * (R + R.T) - cos_angle * np.eye(3)) / (1.0 - cos_angle)
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(S[k, k])
        if axis @ w < 0:
            axis = -axis
        axis /= np.linalg.norm(axis)
        return angle * axis
    return angle / np.sin(angle) * w


def so3_right_jacobian(theta):
    """Right Jacobian of SO(3).

    ``exp(hat(theta + d)) ~= exp(hat(theta)) @ exp(hat(Jr(theta) @ d))``.
    """
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    W = hat(theta)
    if angle < SMALL_ANGLE:
        t2 = angle * angle
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        b = (1.0 - np.cos(angle)) / (angle * angle)
        c = (angle - np.sin(angle)) / angle ** 3
    return np.eye(3) - b * W + c * (W @ W)


def canonical_rotvec(theta):
    """Equivalent axis-angle vector with angle in [0, pi]."""
    return so3_log(so3_exp(theta))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x_world = R @ x_local + t`` with ``R = exp(hat(rotvec))``."""

    rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotvec, dtype=float).reshape(3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotvec", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        return cls(so3_log(R), t)

    @property
    def R(self):
        return so3_exp(self.rotvec)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        """Transform an (N, 3) array (or a single 3-vector)."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def __matmul__(self, other):
        return pose_compose(self, other)

    def inverse(self):
        return pose_inverse(self)


def pose_compose(a, b):
    """``a o b``: apply ``b`` first, then ``a``."""
    Ra = a.R
    return Pose.from_matrix(Ra @ b.R, Ra @ b.translation + a.translation)


def pose_inverse(a):
    Rt = a.R.T
    return Pose.from_matrix(Rt, -Rt @ a.translation)


def rotation_angle_between(R1, R2):
    """Geodesic distance (radians) between two rotation matrices."""
    # atan2 keeps full precision near 0 and pi, unlike arccos of the trace
    D = np.asarray(R1).T @ np.asarray(R2)
    s = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    c = 0.5 * (np.trace(D) - 1.0)
    return float(np.arctan2(s, c))


def rotvec_to_quaternion(theta):
    """Axis-angle -> unit quaternion ``(qx, qy, qz, qw)``."""
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    if angle < SMALL_ANGLE:
        s = 0.5 - angle * angle / 48.0
    else:
        s = np.sin(0.5 * angle) / angle
    return np.array([s * theta[0], s * theta[1], s * theta[2], np.cos(0.5 * angle)])


def quaternion_to_rotvec(q):
    """Unit quaternion ``(qx, qy, qz, qw)`` -> axis-angle."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    v = q[:3]
    s = float(np.linalg.norm(v))
    if s < SMALL_ANGLE:
        return 2.0 * v / q[3]
    angle = 2.0 * np.arctan2(s, q[3])
    return angle * v / s
