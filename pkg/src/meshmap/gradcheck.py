"""Finite-difference checks of every analytic derivative in the package.

Each suite draws random instances from a seeded generator and reports the
largest relative error ``|g - g_fd| / max(|g_fd|, tiny)`` (Frobenius norms
per instance). The ``fault`` hook flips the sign of one Jacobian block so the
checks themselves can be tested.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import BLOCKS, CameraIntrinsics, projection_jacobians, transform_to_camera
from .liegroup import Pose
from .losses import kps_loss, kps_loss_grad, mask_loss, mask_loss_grad
from .mesh import curvature_energy, make_icosphere

JACOBIAN_TOL = 1e-5
LOSS_TOL = 1e-8
CURVATURE_TOL = 1e-6


@dataclass
class BlockResult:
    name: str
    count: int
    max_rel_err: float
    tol: float

    @property
    def ok(self):
        return bool(self.max_rel_err < self.tol)


@dataclass
class GradcheckReport:
    blocks: list = field(default_factory=list)

    @property
    def ok(self):
        return all(b.ok for b in self.blocks)

    @property
    def failing(self):
        return [b.name for b in self.blocks if not b.ok]

    def lines(self):
        return [f"{b.name:<12s} n={b.count:<4d} max_rel_err={b.max_rel_err:.3e} "
                f"tol={b.tol:.0e} {'ok' if b.ok else 'FAIL'}" for b in self.blocks]


def _rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_projection_instance(rng):
    """Random (camera, object, point, intrinsics) with the point well in front."""
    obj = Pose(rng.normal(0.0, 1.0, 3), rng.normal(0.0, 2.0, 3))
    v = rng.normal(0.0, 1.0, 3)
    world = obj.apply(v[None])[0]
    cam_rot = Pose(rng.normal(0.0, 1.0, 3), np.zeros(3))
    depth = rng.uniform(2.0, 10.0)
    offset = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0]) * depth
    cam = Pose(cam_rot.rotvec, world - cam_rot.R @ offset)
    intr = CameraIntrinsics(f=rng.uniform(0.5, 2.0), s_u=rng.uniform(200, 800),
                            s_v=rng.uniform(200, 800), c_u=rng.uniform(100, 400),
                            c_v=rng.uniform(100, 300), s_n=rng.uniform(-5.0, 5.0))
    return cam, obj, v, intr


def _pixel(cam, obj, v, intr):
    g = transform_to_camera(cam, obj, v[None])[0]
    return intr.K @ (g / g[2])


def _perturbed(cam, obj, v, name, k, h):
    e = np.zeros(3)
    e[k] = h
    if name == "theta_c":
        return Pose(cam.rotvec + e, cam.translation), obj, v
    if name == "p_c":
        return Pose(cam.rotvec, cam.translation + e), obj, v
    if name == "theta_o":
        return cam, Pose(obj.rotvec + e, obj.translation), v
    if name == "p_o":
        return cam, Pose(obj.rotvec, obj.translation + e), v
    return cam, obj, v + e


def numeric_jacobian(cam, obj, v, intr, name, h=1e-6):
    """Central-difference 2x3 Jacobian of the pixel wrt one variable block."""
    J = np.zeros((2, 3))
    for k in range(3):
        plus = _pixel(*_perturbed(cam, obj, v, name, k, h), intr)
        minus = _pixel(*_perturbed(cam, obj, v, name, k, -h), intr)
        J[:, k] = (plus - minus) / (2.0 * h)
    return J


def check_jacobians(n=200, seed=0, h=1e-6, fault=None):
    rng = np.random.default_rng([seed, 11])
    worst = dict.fromkeys(BLOCKS, 0.0)
    for _ in range(n):
        cam, obj, v, intr = random_projection_instance(rng)
        J = projection_jacobians(cam, obj, v[None], intr)[0]
        for name in BLOCKS:
            analytic = getattr(J, "d_" + name)
            if name == fault:
                analytic = -analytic
            err = _rel_err(analytic, numeric_jacobian(cam, obj, v, intr, name, h))
            worst[name] = max(worst[name], err)
    return [BlockResult("d_" + name, n, worst[name], JACOBIAN_TOL) for name in BLOCKS]


def check_mask_loss(n=100, seed=0, h=1e-5, size=8):
    rng = np.random.default_rng([seed, 12])
    worst = 0.0
    for _ in range(n):
        s = rng.uniform(0.0, 1.0, (size, size))
        s_hat = rng.uniform(0.0, 1.0, (size, size))
        g = mask_loss_grad(s, s_hat)
        fd = np.zeros_like(s_hat)
        for idx in np.ndindex(s_hat.shape):
            d = np.zeros_like(s_hat)
            d[idx] = h
            fd[idx] = (mask_loss(s, s_hat + d) - mask_loss(s, s_hat - d)) / (2.0 * h)
        worst = max(worst, _rel_err(g, fd))
    return BlockResult("mask_loss", n, worst, LOSS_TOL)


def check_kps_loss(n=100, seed=0, h=1e-3, k=12):
    # the loss is quadratic, so central differences are exact up to rounding
    rng = np.random.default_rng([seed, 13])
    worst = 0.0
    for _ in range(n):
        y = rng.uniform(0.0, 640.0, (k, 2))
        y_hat = y + rng.normal(0.0, 20.0, (k, 2))
        vis = np.diag((rng.uniform(size=k) < 0.7).astype(float))
        g = kps_loss_grad(y, y_hat, vis)
        fd = np.zeros_like(y_hat)
        for idx in np.ndindex(y_hat.shape):
            d = np.zeros_like(y_hat)
            d[idx] = h
            fd[idx] = (kps_loss(y, y_hat + d, vis) - kps_loss(y, y_hat - d, vis)) / (2.0 * h)
        worst = max(worst, _rel_err(g, fd))
    return BlockResult("kps_loss", n, worst, LOSS_TOL)


def check_curvature(n=5, seed=0, h=1e-6):
    rng = np.random.default_rng([seed, 14])
    base = make_icosphere(1)
    worst = 0.0
    for _ in range(n):
        mesh = base.with_vertices(base.vertices + rng.normal(0.0, 0.05, base.vertices.shape))
        _, g = curvature_energy(mesh)
        fd = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            d = np.zeros_like(g)
            d[idx] = h
            fd[idx] = (curvature_energy(mesh.with_vertices(mesh.vertices + d))[0]
                       - curvature_energy(mesh.with_vertices(mesh.vertices - d))[0]) / (2.0 * h)
        worst = max(worst, _rel_err(g, fd))
    return BlockResult("curvature", n, worst, CURVATURE_TOL)


def run_gradcheck(n_jacobian=200, n_loss=100, seed=0, fault=None):
    if fault is not None and fault not in BLOCKS:
        raise ValueError(f"unknown block {fault!r}; expected one of {BLOCKS}")
    report = GradcheckReport()
    report.blocks += check_jacobians(n_jacobian, seed, fault=fault)
    report.blocks.append(check_mask_loss(n_loss, seed))
    report.blocks.append(check_kps_loss(n_loss, seed))
    report.blocks.append(check_curvature(seed=seed))
    return report
