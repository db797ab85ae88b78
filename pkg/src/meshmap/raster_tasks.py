"""Toy silhouette-alignment problems for exercising the rasterizer's backward pass.

Each task places a flat mesh parallel to the image plane, renders a target
silhouette, and moves the image-plane vertices of a perturbed copy by gradient
descent on the mask loss. Steps are normalised so the fastest vertex moves
``step_px`` pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import mask_loss_grad
from .raster import mask_iou, rasterize_backward, rasterize_silhouette

TASK_NAMES = ("translate", "scale", "rotate", "vertex_pull", "occluded_pull")

_FOCAL = 100.0
_DEPTH = 5.0


@dataclass(frozen=True, eq=False)
class RasterTask:
    name: str
    size: int
    start: np.ndarray          # (N, 2) pixel positions of the movable mesh
    faces: np.ndarray
    movable: np.ndarray        # (N,) bool, vertices the descent may move
    target: np.ndarray         # (size, size) target silhouette
    occluder: tuple = None     # optional fixed (uv, faces) drawn in front

    @property
    def K(self):
        return np.array([[_FOCAL, 0.0, self.size / 2], [0.0, _FOCAL, self.size / 2]])


def _lift(uv, size, depth):
    """Camera-frame points at ``depth`` that project exactly onto ``uv``."""
    uv = np.asarray(uv, dtype=float)
    c = size / 2
    return np.column_stack([(uv[:, 0] - c) / _FOCAL * depth, (uv[:, 1] - c) / _FOCAL * depth,
                            np.full(len(uv), depth)])


def grid_patch(cx, cy, w, h, n=6):
    """``n x n`` vertex rectangle centred at (cx, cy) in pixels, split into triangles."""
    a = np.linspace(-w / 2, w / 2, n)
    b = np.linspace(-h / 2, h / 2, n)
    U, V = np.meshgrid(a, b, indexing="ij")
    uv = np.column_stack([U.ravel() + cx, V.ravel() + cy])
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            p, q, r, s = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            faces += [[p, q, r], [p, r, s]]
    return uv, np.array(faces)


def _rotate(uv, center, angle):
    c, s = np.cos(angle), np.sin(angle)
    return (uv - center) @ np.array([[c, -s], [s, c]]).T + center


def render_uv(uv, faces, size, occluder=None):
    """Silhouette of an image-plane mesh (plus an optional nearer occluder)."""
    V = _lift(uv, size, _DEPTH)
    F = np.asarray(faces)
    if occluder is not None:
        ouv, of = occluder
        V = np.vstack([V, _lift(ouv, size, _DEPTH - 1.0)])
        F = np.vstack([F, np.asarray(of) + len(uv)])
    K = np.array([[_FOCAL, 0.0, size / 2], [0.0, _FOCAL, size / 2]])
    return rasterize_silhouette(V, F, K, size, size)


def make_task(name, size=128):
    """One of :data:`TASK_NAMES`, laid out for a ``size x size`` image."""
    k = size / 128.0
    c = size / 2
    occluder = None
    if name == "translate":
        start, faces = grid_patch(c - 14 * k, c, 40 * k, 40 * k)
        goal = start + [30 * k, 0.0]
    elif name == "scale":
        start, faces = grid_patch(c, c, 24 * k, 24 * k)
        goal = grid_patch(c, c, 64 * k, 64 * k)[0]
    elif name == "rotate":
        start, faces = grid_patch(c, c, 80 * k, 24 * k)
        goal = _rotate(start, np.array([c, c]), np.radians(60.0))
    elif name == "vertex_pull":
        start = np.array([[30.0, 30.0], [60.0, 30.0], [30.0, 60.0]]) * k
        faces = np.array([[0, 1, 2]])
        goal = start.copy()
        goal[1] = np.array([110.0, 100.0]) * k
    elif name == "occluded_pull":
        start, faces = grid_patch(c - 14 * k, c, 40 * k, 40 * k)
        goal = start + [35 * k, 0.0]
        occluder = grid_patch(c - 14 * k, c, 20 * k, 20 * k, n=2)
    else:
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    movable = np.any(goal != start, axis=1) if name == "vertex_pull" else np.ones(len(start), bool)
    target, _ = render_uv(goal, faces, size, occluder)
    return RasterTask(name, size, start, faces, movable, target, occluder)


def descend(task, steps=300, step_px=1.0):
    """Run normalised gradient descent; returns the mask IoU before each step and at the end."""
    uv = task.start.copy()
    n = len(uv)
    history = []
    for _ in range(steps):
        mask, state = render_uv(uv, task.faces, task.size, task.occluder)
        history.append(mask_iou(mask, task.target))
        g = rasterize_backward(mask_loss_grad(task.target, mask), state)[:n]
        g[~task.movable] = 0.0
        norm = np.linalg.norm(g, axis=1).max()
        if norm == 0.0:
            break
        uv -= step_px * g / norm
    mask, _ = render_uv(uv, task.faces, task.size, task.occluder)
    history.append(mask_iou(mask, task.target))
    return np.array(history), uv
