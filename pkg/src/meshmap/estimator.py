"""Initialization and gradient-descent optimization of objects and cameras.

Mapping: keypoints collected along a track are triangulated (Levenberg-
Marquardt on reprojection error), the mean model is aligned to them with the
Kabsch algorithm, then the object pose and the mesh vertices are refined in
two stages. Localization: each camera pose is predicted from odometry and
refined against known objects.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import BehindCameraError, projection_jacobians, transform_to_camera
from .liegroup import Pose, pose_compose, so3_exp, so3_log
from .losses import LossWeights, observation_term
from .mesh import (TriMesh, curvature_energy, enforce_symmetry, symmetrize_gradient,
                   uniform_laplacian)

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    """Every tunable of the estimators in one place."""

    weights: LossWeights = LossWeights()
    pose_iters: int = 100
    shape_iters: int = 300
    camera_iters: int = 100
    pose_step: float = 1e-2
    shape_step: float = 1.0
    camera_step: float = 1e-3
    lambda_reg: float = 0.1
    tol: float = 1e-10
    patience: int = 10
    diverge_tol: float = 1e-6
    armijo_c: float = 1e-4
    shrink: float = 0.5
    grow: float = 2.0
    max_backtracks: int = 30
    q_min: float = 0.5
    min_ray_angle_deg: float = 1.0
    alternations: int = 1
    symmetric: bool = True
    lm_damping: float = 1e-3
    lm_iters: int = 100
    lm_tol: float = 1e-10
    degenerate_face_fraction: float = 0.1

    def __post_init__(self):
        for name in ("pose_iters", "shape_iters", "camera_iters", "lm_iters", "alternations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        for name in ("pose_step", "shape_step", "camera_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(eq=False)
class ObjectState:
    pose: Pose
    mesh: TriMesh
    kp_index: np.ndarray
    class_id: int = 0
    symmetry: object = None

    def copy(self):
        return ObjectState(self.pose, self.mesh.copy(), np.array(self.kp_index), self.class_id,
                           self.symmetry)

    def world_mesh(self):
        return self.mesh.with_vertices(self.pose.apply(self.mesh.vertices))


@dataclass
class Trace:
    """Loss per accepted iteration (``losses[0]`` is the starting value)."""

    losses: list = field(default_factory=list)
    params: list = field(default_factory=list)
    status: str = "max_iters"
    flags: list = field(default_factory=list)

    @property
    def initial(self):
        return self.losses[0]

    @property
    def final(self):
        return self.losses[-1]


def gradient_descent(fun, x0, step, iters, cfg, project=None, record=False):
    """Gradient descent with Armijo backtracking and a remembered step size.

    ``fun(x) -> (f, g)``. ``project`` maps a raw gradient onto the feasible
    directions (e.g. the symmetric subspace). The trace is non-increasing by
    construction; the loop stops when no step satisfies the Armijo condition.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    trace = Trace([f], [x.copy()] if record else [])
    alpha = step
    for _ in range(iters):
        d = project(g) if project is not None else g
        g2 = float(np.sum(g * d))
        if not np.isfinite(g2) or g2 <= 0:
            trace.status = "converged"
            break
        accepted = False
        for _ in range(cfg.max_backtracks):
            x_new = x - alpha * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f - cfg.armijo_c * alpha * g2:
                accepted = True
                break
            alpha *= cfg.shrink
        if not accepted:
            # judged at the smallest step tried
            increased = not np.isfinite(f_new) or f_new > f + cfg.diverge_tol
            trace.status = "diverged" if increased else "stalled"
            break
        x, f, g = x_new, f_new, g_new
        trace.losses.append(f)
        # piecewise-constant mask losses plateau briefly, so judge progress over a window
        w = min(cfg.patience, len(trace.losses) - 1)
        done = w == cfg.patience and trace.losses[-1 - w] - f <= cfg.tol * max(1.0, abs(f))
        if record:
            trace.params.append(x.copy())
        alpha *= cfg.grow
        if done:
            trace.status = "converged"
            break
    return x, trace


# --- triangulation ---------------------------------------------------------------

def _ray(cam, intr, pixel):
    K3 = intr.K3
    d = cam.R @ np.linalg.solve(K3, np.array([pixel[0], pixel[1], 1.0]))
    return cam.translation, d / np.linalg.norm(d)


def _midpoint(o1, d1, o2, d2):
    # closest points o1 + a d1, o2 + b d2
    w = o1 - o2
    b = d1 @ d2
    den = 1.0 - b * b
    a = (b * (d2 @ w) - (d1 @ w)) / den
    c = ((d2 @ w) - b * (d1 @ w)) / den
    return 0.5 * ((o1 + a * d1) + (o2 + c * d2))


def _reprojection(point, cams, pixels, intr):
    obj = Pose(np.zeros(3), point)
    res, jac = [], []
    for cam, px in zip(cams, pixels):
        J = projection_jacobians(cam, obj, np.zeros((1, 3)), intr, blocks=("p_o",))
        g = transform_to_camera(cam, obj, np.zeros((1, 3)))[0]
        pred = intr.K @ (g / g[2])
        res.append(pred - px)
        jac.append(J.d_p_o[0])
    return np.concatenate(res), np.vstack(jac)


def levenberg_marquardt_point(x0, cams, pixels, intr, cfg=OptimConfig()):
    """Refine one 3-D point by LM on its reprojection error."""
    x = np.array(x0, dtype=float)
    try:
        r, J = _reprojection(x, cams, pixels, intr)
    except BehindCameraError:
        return x, np.inf
    cost = float(r @ r)
    lam = cfg.lm_damping
    for _ in range(cfg.lm_iters):
        A = J.T @ J
        b = J.T @ r
        step = np.linalg.solve(A + lam * np.diag(np.maximum(np.diag(A), 1e-12)), -b)
        try:
            r_new, J_new = _reprojection(x + step, cams, pixels, intr)
            new_cost = float(r_new @ r_new)
        except BehindCameraError:
            new_cost = np.inf
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            x, r, J, cost = x + step, r_new, J_new, new_cost
            lam *= 0.1
            if rel < cfg.lm_tol:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
        if cost == 0.0:
            break
    return x, cost


def triangulate_keypoints(measurements, intr, cfg=OptimConfig()):
    """Triangulate every keypoint index seen in at least two views.

    ``measurements``: list of ``(camera_pose, keypoints (K, 2), usable (K,))``.
    Returns ``(points (K, 3), valid (K,))``; a keypoint is invalid when seen in
    fewer than two views or when no pair of rays spans ``min_ray_angle_deg``.
    """
    if not measurements:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    n_kp = len(measurements[0][1])
    points = np.full((n_kp, 3), np.nan)
    valid = np.zeros(n_kp, dtype=bool)
    min_angle = np.deg2rad(cfg.min_ray_angle_deg)
    for k in range(n_kp):
        views = [(cam, kps[k]) for cam, kps, ok in measurements if ok[k]]
        if len(views) < 2:
            continue
        rays = [_ray(cam, intr, px) for cam, px in views]
        best = (-1.0, None)
        for i in range(len(rays)):
            for j in range(i + 1, len(rays)):
                ang = np.arccos(np.clip(rays[i][1] @ rays[j][1], -1.0, 1.0))
                if ang > best[0]:
                    best = (ang, (i, j))
        if best[0] < min_angle:
            continue
        i, j = best[1]
        x0 = _midpoint(*rays[i], *rays[j])
        x, cost = levenberg_marquardt_point(x0, [v[0] for v in views], [v[1] for v in views],
                                            intr, cfg)
        if np.isfinite(cost):
            points[k] = x
            valid[k] = True
    return points, valid


# --- Kabsch ---------------------------------------------------------------------

def kabsch_align(src, dst):
    """Rigid ``(R, p)`` minimising ``sum |R src_i + p - dst_i|^2`` as a :class:`Pose`.

    ``src``/``dst`` are corresponding (N, 3) arrays. Raises
    :class:`DegenerateConfiguration` for N < 3 or (near-)collinear input.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("src and dst must have the same number of points")
    if len(src) < 3:
        raise DegenerateConfiguration("Kabsch needs at least 3 correspondences")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - mu_s, dst - mu_d
    for X in (A, B):
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateConfiguration("points are collinear or coincident")
    U, _, Vt = np.linalg.svd(A.T @ B)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose.from_matrix(R, mu_d - R @ mu_s)


# --- mapping ------------------------------------------------------------------

def init_object(track_measurements, mean_mesh, kp_index, intr, cfg=OptimConfig(), class_id=0,
                symmetry=None):
    """Triangulate a track's keypoints and align the mean model to them.

    ``track_measurements``: ``(camera_pose, keypoints, usable)`` per frame, where
    ``usable`` already reflects the keypoint-quality gate.
    """
    pts, ok = triangulate_keypoints(track_measurements, intr, cfg)
    if np.count_nonzero(ok) < 3:
        raise InitializationError(f"only {np.count_nonzero(ok)} keypoints could be triangulated")
    model_kps = mean_mesh.vertices[np.asarray(kp_index)]
    try:
        pose = kabsch_align(model_kps[ok], pts[ok])
    except DegenerateConfiguration as exc:
        raise InitializationError(str(exc)) from exc
    return ObjectState(pose, mean_mesh.copy(), np.array(kp_index), class_id, symmetry)


def optimize_object_pose(state, views, intr, cfg=OptimConfig(), record=False):
    """Stage 1: fixed mesh, descend ``(theta_o, p_o)`` on the weighted loss.

    Returns ``(new_state, trace)``.
    """
    views = list(views)

    def fun(x):
        pose = Pose(x[:3], x[3:])
        f, g = 0.0, np.zeros(6)
        for cam, obs in views:
            term = observation_term(cam, pose, state.mesh, state.kp_index, obs, intr,
                                    cfg.weights, wrt=("theta_o", "p_o"))
            f += term.value
            g[:3] += term.grad["theta_o"]
            g[3:] += term.grad["p_o"]
        return f, g

    x0 = np.concatenate([state.pose.rotvec, state.pose.translation])
    x, trace = gradient_descent(fun, x0, cfg.pose_step, cfg.pose_iters, cfg, record=record)
    new = state.copy()
    new.pose = Pose(so3_log(so3_exp(x[:3])), x[3:])
    return new, trace


def degenerate_fraction(mesh, reference_area):
    return float(np.mean(mesh.face_areas() < 1e-6 * reference_area))


def optimize_object_shape(state, views, intr, cfg=OptimConfig(), record=False):
    """Stage 2: fixed pose, descend the vertices on mask loss + curvature penalty.

    Mirror symmetry about the object x = 0 plane is kept exactly when
    ``state.symmetry`` is set and ``cfg.symmetric`` is on. Returns
    ``(new_state, trace)``.
    """
    views = list(views)
    mesh0 = state.mesh
    L = uniform_laplacian(mesh0)
    n = mesh0.n_vertices
    weights = LossWeights(w_mask=cfg.weights.w_mask or 1.0, w_kps=0.0)
    sym = state.symmetry if cfg.symmetric else None
    ref_area = float(np.mean(mesh0.face_areas()))

    def make_fun(lam):
        def fun(x):
            mesh = mesh0.with_vertices(x.reshape(n, 3))
            f, g = 0.0, np.zeros((n, 3))
            for cam, obs in views:
                term = observation_term(cam, state.pose, mesh, state.kp_index, obs, intr,
                                        weights, wrt=("V",))
                f += term.value
                g += term.grad["V"]
            if lam > 0:
                e, ge = curvature_energy(mesh, L)
                f += lam * e
                g += lam * ge
            return f, g.ravel()
        return fun

    x0 = mesh0.vertices.copy()
    project = None
    if sym is not None:
        x0 = enforce_symmetry(x0, sym)
        project = lambda g: symmetrize_gradient(g.reshape(n, 3), sym).ravel()  # noqa: E731

    lam = cfg.lambda_reg
    flags = []
    for attempt in range(2):
        x, trace = gradient_descent(make_fun(lam), x0.ravel(), cfg.shape_step, cfg.shape_iters,
                                    cfg, project=project, record=record)
        frac = degenerate_fraction(mesh0.with_vertices(x.reshape(n, 3)), ref_area)
        if frac <= cfg.degenerate_face_fraction:
            break
        if attempt == 0:
            log.warning("%.0f%% of faces collapsed; retrying with lambda_reg x10", 100 * frac)
            flags.append("regularization_increased")
            lam *= 10.0
        else:
            flags.append("degenerate_mesh")
            trace.status = "aborted"
            x = x0.ravel()
    trace.flags = flags
    new = state.copy()
    new.mesh = mesh0.with_vertices(x.reshape(n, 3))
    return new, trace


def optimize_object(state, views, intr, cfg=OptimConfig()):
    """Pose stage then shape stage, repeated ``cfg.alternations`` times."""
    traces = []
    for _ in range(max(cfg.alternations, 1)):
        state, tp = optimize_object_pose(state, views, intr, cfg)
        state, ts = optimize_object_shape(state, views, intr, cfg)
        traces += [tp, ts]
    return state, traces


# --- localization -----------------------------------------------------------------

def optimize_camera_pose(prev_pose, odometry, observations, objects, intr, cfg=OptimConfig(),
                         record=False):
    """Predict ``prev_pose o odometry`` and refine it against known objects.

    ``observations`` carry ``object_id`` keys into ``objects``. With nothing
    to observe the prediction is returned unchanged and the trace is flagged
    ``"odometry_only"``.
    """
    init = pose_compose(prev_pose, odometry)
    usable = [o for o in observations if o.object_id is not None and o.object_id in objects]
    if not usable:
        trace = Trace([0.0], [np.concatenate([init.rotvec, init.translation])] if record else [],
                      status="odometry_only", flags=["odometry_only"])
        return init, trace

    def fun(x):
        cam = Pose(x[:3], x[3:])
        f, g = 0.0, np.zeros(6)
        for obs in usable:
            st = objects[obs.object_id]
            try:
                term = observation_term(cam, st.pose, st.mesh, st.kp_index, obs, intr,
                                        cfg.weights, wrt=("theta_c", "p_c"))
            except BehindCameraError:
                return np.inf, np.zeros(6)
            f += term.value
            g[:3] += term.grad["theta_c"]
            g[3:] += term.grad["p_c"]
        return f, g

    x0 = np.concatenate([init.rotvec, init.translation])
    x, trace = gradient_descent(fun, x0, cfg.camera_step, cfg.camera_iters, cfg, record=record)
    return Pose(so3_log(so3_exp(x[:3])), x[3:]), trace

