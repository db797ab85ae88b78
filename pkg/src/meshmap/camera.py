"""Pinhole camera model, keypoint projection and its analytic Jacobians.

A camera pose ``c = (R_c, p_c)`` and an object pose ``o = (R_o, p_o)`` both map
their local frame into the world frame. An object-frame point ``v`` lands in
the camera frame at ``gamma = R_c^T (R_o v + p_o - p_c)`` and in the image at
``K pi(gamma)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroup import so3_right_jacobian

EPS_DEPTH = 1e-6


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    """``K = [[f s_u, f s_n, c_u], [0, f s_v, c_v]]`` (pixels)."""

    f: float
    s_u: float
    s_v: float
    c_u: float
    c_v: float
    s_n: float = 0.0

    def __post_init__(self):
        if not (self.f * self.s_u > 0 and self.f * self.s_v > 0):
            raise ValueError("focal length in pixels must be positive")

    @classmethod
    def from_pixels(cls, fx, fy, cx, cy, skew=0.0):
        """Build from pixel focal lengths (``f`` is set to 1)."""
        return cls(f=1.0, s_u=fx, s_v=fy, c_u=cx, c_v=cy, s_n=skew)

    @property
    def K(self):
        return np.array([[self.f * self.s_u, self.f * self.s_n, self.c_u],
                         [0.0, self.f * self.s_v, self.c_v]])

    @property
    def K3(self):
        """3x3 homogeneous form of ``K``."""
        return np.vstack([self.K, [0.0, 0.0, 1.0]])


def perspective(x, eps=EPS_DEPTH):
    """``(x1/x3, x2/x3, 1)``; raises :class:`BehindCameraError` if ``x3 <= eps``."""
    x = np.asarray(x, dtype=float)
    z = x[..., 2:3]
    if np.any(z <= eps):
        raise BehindCameraError("point at or behind the camera")
    return x / z


def perspective_jacobian(x):
    """d pi / d x, shape (..., 3, 3); third row is zero."""
    x = np.asarray(x, dtype=float)
    inv_z = 1.0 / x[..., 2]
    J = np.zeros(x.shape[:-1] + (3, 3))
    J[..., 0, 0] = inv_z
    J[..., 1, 1] = inv_z
    J[..., 0, 2] = -x[..., 0] * inv_z ** 2
    J[..., 1, 2] = -x[..., 1] * inv_z ** 2
    return J


def transform_to_camera(cam, obj, points):
    """Object-frame points (N, 3) -> camera frame (N, 3)."""
    points = np.asarray(points, dtype=float)
    w = points @ obj.R.T + (obj.translation - cam.translation)
    return w @ cam.R  # rows of R_c^T w


def project_points(intr, points_cam, eps=EPS_DEPTH):
    """Camera-frame points (N, 3) -> pixels (N, 2) and validity mask (N,)."""
    points_cam = np.asarray(points_cam, dtype=float)
    valid = points_cam[:, 2] > eps
    z = np.where(valid, points_cam[:, 2], 1.0)
    uv1 = np.column_stack([points_cam[:, 0] / z, points_cam[:, 1] / z, np.ones(len(z))])
    px = uv1 @ intr.K.T
    px[~valid] = np.nan
    return px, valid


def project_keypoints(cam, obj, mesh, kp_index, intr):
    """Pixel coordinates (K, 2) of the mesh keypoints plus a validity flag per keypoint.

    Keypoints at or behind the camera come back as NaN with ``valid = False``.
    """
    pts = mesh.vertices[np.asarray(kp_index, dtype=int)]
    return project_points(intr, transform_to_camera(cam, obj, pts))


@dataclass
class KeypointJacobians:
    """Per-point 2x3 blocks ``d pixel / d alpha``; each array has shape (N, 2, 3)."""

    d_theta_c: np.ndarray
    d_p_c: np.ndarray
    d_theta_o: np.ndarray
    d_p_o: np.ndarray
    d_v: np.ndarray

    def __getitem__(self, i):
        return KeypointJacobians(self.d_theta_c[i], self.d_p_c[i], self.d_theta_o[i],
                                 self.d_p_o[i], self.d_v[i])


BLOCKS = ("theta_c", "p_c", "theta_o", "p_o", "v")


def projection_jacobians(cam, obj, points, intr, eps=EPS_DEPTH, blocks=BLOCKS):
    """Analytic Jacobians of ``K pi(gamma(v))`` for many object-frame points.

    Only the requested ``blocks`` are filled in; the rest are ``None``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    Rc, Ro = cam.R, obj.R
    w = points @ Ro.T + (obj.translation - cam.translation)   # R_o v + p_o - p_c
    gamma = w @ Rc
    if np.any(gamma[:, 2] <= eps):
        raise BehindCameraError("point at or behind the camera")
    P = intr.K @ perspective_jacobian(gamma)                  # (N, 2, 3)
    RcT = Rc.T
    out = dict.fromkeys(BLOCKS)
    if "p_c" in blocks:
        out["p_c"] = -P @ RcT
    if "p_o" in blocks:
        out["p_o"] = P @ RcT
    if "v" in blocks:
        out["v"] = P @ (RcT @ Ro)
    if "theta_c" in blocks:
        # R_c^T hat(w) J_r(-theta_c)
        Jc = so3_right_jacobian(-cam.rotvec)
        out["theta_c"] = P @ (RcT @ _hat_batch(w) @ Jc)
    if "theta_o" in blocks:
        # -R_c^T R_o hat(v) J_r(theta_o)
        Jo = so3_right_jacobian(obj.rotvec)
        out["theta_o"] = -P @ ((RcT @ Ro) @ _hat_batch(points) @ Jo)
    return KeypointJacobians(out["theta_c"], out["p_c"], out["theta_o"], out["p_o"], out["v"])


def keypoint_jacobians(cam, obj, v, intr):
    """All five 2x3 Jacobian blocks for a single object-frame point ``v``."""
    return projection_jacobians(cam, obj, np.asarray(v, dtype=float)[None], intr)[0]


def _hat_batch(x):
    x = np.asarray(x, dtype=float)
    H = np.zeros(x.shape[:-1] + (3, 3))
    H[..., 0, 1] = -x[..., 2]
    H[..., 0, 2] = x[..., 1]
    H[..., 1, 0] = x[..., 2]
    H[..., 1, 2] = -x[..., 0]
    H[..., 2, 0] = -x[..., 1]
    H[..., 2, 1] = x[..., 0]
    return H

