"""Mask / keypoint losses, their gradients, and the weighted joint objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import projection_jacobians, transform_to_camera
from .raster import rasterize_backward, rasterize_silhouette, vertex_visibility


@dataclass(frozen=True)
class LossWeights:
    w_mask: float = 1.0
    w_kps: float = 1e-4

    def __post_init__(self):
        if self.w_mask < 0 or self.w_kps < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_mask == 0 and self.w_kps == 0:
            raise ValueError("at least one loss weight must be positive")


def _check_same_shape(s, s_hat):
    s = np.asarray(s, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    if s.shape != s_hat.shape:
        raise ValueError(f"mask shapes differ: {s.shape} vs {s_hat.shape}")
    return s, s_hat


def _iou_terms(s, s_hat):
    s, s_hat = _check_same_shape(s, s_hat)
    if s.ndim != 2:
        return s, float(np.sum(s * s_hat)), float(np.sum(s + s_hat - s * s_hat))
    s = np.ascontiguousarray(s)
    inter, union = _kernels.soft_iou_terms(s, np.ascontiguousarray(s_hat))
    return s, inter, union


def mask_loss(s, s_hat):
    """Negative soft IoU ``-|s*s_hat|_1 / |s + s_hat - s*s_hat|_1`` (0 if the union is empty)."""
    _, inter, union = _iou_terms(s, s_hat)
    if union == 0:
        return 0.0
    return float(-inter / union)


def mask_loss_grad(s, s_hat):
    """Gradient of :func:`mask_loss` wrt ``s_hat``: ``-s/U + I/U^2 (1 - s)``."""
    s, inter, union = _iou_terms(s, s_hat)
    return _grad_from_terms(s, inter, union)


def _grad_from_terms(s, inter, union):
    if union == 0:
        return np.zeros_like(s)
    if s.ndim != 2:
        return -s / union + inter / union ** 2 * (1.0 - s)
    return _kernels.soft_iou_grad(s, inter, union)


def _matched_columns(vis):
    return np.asarray(vis).sum(axis=0) > 0


def kps_loss(y, y_hat, vis):
    """Squared Frobenius residual between detections and matched model keypoints.

    ``y``: (K_det, 2) detected pixels, ``y_hat``: (K_model, 2) predictions,
    ``vis``: (K_model, K_det) 0/1 matching. Detections with no match are
    left out of the residual.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    vis = np.asarray(vis, dtype=float)
    cols = _matched_columns(vis)
    if not np.any(cols):
        return 0.0
    r = y[cols] - vis[:, cols].T @ np.nan_to_num(y_hat)
    return float(np.sum(r * r))


def kps_loss_grad(y, y_hat, vis):
    """``2 vis (vis^T y_hat - y)`` with rows ordered like ``y_hat``; zero on unmatched keypoints."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    vis = np.asarray(vis, dtype=float)
    cols = _matched_columns(vis)
    g = np.zeros_like(y_hat)
    if np.any(cols):
        r = vis[:, cols].T @ np.nan_to_num(y_hat) - y[cols]
        g = 2.0 * vis[:, cols] @ r
    return g


def diagonal_visibility(model_visible, detected_valid):
    """Keypoint k of the model matches detected keypoint k when both flags hold."""
    m = np.asarray(model_visible, dtype=bool) & np.asarray(detected_valid, dtype=bool)
    return np.diag(m.astype(float))


@dataclass
class TermResult:
    """One (frame, observation) term of the joint objective."""

    value: float
    mask_value: float
    kps_value: float
    grad: dict = field(default_factory=dict)
    grad_kps: dict = field(default_factory=dict)
    rendered: np.ndarray | None = None
    kp_visible: np.ndarray | None = None


VARIABLES = ("theta_c", "p_c", "theta_o", "p_o", "V")
_JAC_NAME = {"theta_c": "theta_c", "p_c": "p_c", "theta_o": "theta_o", "p_o": "p_o", "V": "v"}


def observation_term(cam, obj_pose, mesh, kp_index, obs, intr, weights, wrt=VARIABLES,
                     fixed_vis=None):
    """Evaluate ``w_mask L_mask + w_kps L_kps`` for one observation and its gradients.

    ``obs`` needs ``mask`` (H, W), ``keypoints`` (K, 2) and ``kp_valid`` (K,).
    Gradients are returned for the variable names in ``wrt`` (subset of
    :data:`VARIABLES`); ``V`` is the (N, 3) gradient wrt object-frame vertices.
    ``grad_kps`` holds the keypoint-only part of each gradient.
    """
    H, W = obs.mask.shape
    V = mesh.vertices
    kp_index = np.asarray(kp_index, dtype=int)
    Vc = transform_to_camera(cam, obj_pose, V)
    s_hat, state = rasterize_silhouette(Vc, mesh.faces, intr.K, W, H)

    g_img = np.zeros((len(V), 2))      # d loss / d pixel position, per vertex
    g_img_kps = np.zeros((len(V), 2))

    mask_value = 0.0
    if weights.w_mask > 0:
        s, inter, union = _iou_terms(obs.mask, s_hat)
        mask_value = -inter / union if union else 0.0
        if union:
            g_s = _grad_from_terms(s, inter, union)
            g_img += weights.w_mask * rasterize_backward(g_s, state)

    kps_value = 0.0
    if fixed_vis is None:
        model_vis = vertex_visibility(Vc, state, kp_index)
    else:
        model_vis = np.asarray(fixed_vis, dtype=bool)
    vis = diagonal_visibility(model_vis, obs.kp_valid)
    if weights.w_kps > 0 and np.any(vis):
        y_hat = state.vertices_img[kp_index]
        kps_value = kps_loss(obs.keypoints, y_hat, vis)
        g_y = weights.w_kps * kps_loss_grad(obs.keypoints, y_hat, vis)
        np.add.at(g_img_kps, kp_index, g_y)
        g_img += g_img_kps

    value = weights.w_mask * mask_value + weights.w_kps * kps_value
    result = TermResult(value, mask_value, kps_value, rendered=s_hat, kp_visible=model_vis)

    active = np.flatnonzero(np.any(g_img != 0, axis=1))
    blocks = tuple(_JAC_NAME[w] for w in wrt)
    for name in wrt:
        shape = (len(V), 3) if name == "V" else (3,)
        result.grad[name] = np.zeros(shape)
        result.grad_kps[name] = np.zeros(shape)
    if len(active) == 0 or not wrt:
        return result
    J = projection_jacobians(cam, obj_pose, V[active], intr, blocks=blocks)
    g_act = g_img[active]
    g_act_kps = g_img_kps[active]
    for name in wrt:
        blk = getattr(J, "d_" + _JAC_NAME[name])
        per_vertex = np.einsum("ni,nij->nj", g_act, blk)
        per_vertex_kps = np.einsum("ni,nij->nj", g_act_kps, blk)
        if name == "V":
            result.grad[name][active] = per_vertex
            result.grad_kps[name][active] = per_vertex_kps
        else:
            result.grad[name] = per_vertex.sum(axis=0)
            result.grad_kps[name] = per_vertex_kps.sum(axis=0)
    return result


@dataclass
class ObjectiveResult:
    value: float
    mask_value: float
    kps_value: float
    grad_camera: dict      # frame index -> {"theta_c", "p_c"}
    grad_object: dict      # object index -> {"theta_o", "p_o", "V"}
    grad_camera_kps: dict
    grad_object_kps: dict
    n_terms: int


def total_objective(observations, camera_poses, objects, intr, weights=LossWeights(),
                    wrt=VARIABLES):
    """Sum of weighted mask and keypoint losses over all (frame, observation) pairs.

    ``observations``: mapping frame index -> list of observations, each with an
    ``object_id`` giving the data association into ``objects`` (a mapping or
    sequence of states with ``pose``, ``mesh``, ``kp_index``). Terms are
    accumulated in sorted frame order, then observation order.
    """
    grad_cam, grad_obj, grad_cam_k, grad_obj_k = {}, {}, {}, {}
    total = mask_total = kps_total = 0.0
    n = 0
    cam_vars = tuple(w for w in wrt if w in ("theta_c", "p_c"))
    obj_vars = tuple(w for w in wrt if w in ("theta_o", "p_o", "V"))
    for t in sorted(observations):
        for obs in observations[t]:
            oid = getattr(obs, "object_id", None)
            if oid is None:
                raise ValueError(f"observation in frame {t} has no data association")
            try:
                state = objects[oid]
            except (KeyError, IndexError):
                raise ValueError(f"observation in frame {t} refers to unknown object {oid}") from None
            term = observation_term(camera_poses[t], state.pose, state.mesh, state.kp_index,
                                    obs, intr, weights, wrt)
            total += term.value
            mask_total += term.mask_value
            kps_total += term.kps_value
            n += 1
            for store, store_k, key, names in ((grad_cam, grad_cam_k, t, cam_vars),
                                               (grad_obj, grad_obj_k, oid, obj_vars)):
                if not names:
                    continue
                d = store.setdefault(key, {k: np.zeros_like(term.grad[k]) for k in names})
                dk = store_k.setdefault(key, {k: np.zeros_like(term.grad[k]) for k in names})
                for k in names:
                    d[k] += term.grad[k]
                    dk[k] += term.grad_kps[k]
    return ObjectiveResult(total, mask_total, kps_total, grad_cam, grad_obj, grad_cam_k,
                           grad_obj_k, n)
