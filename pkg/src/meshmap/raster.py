"""Silhouette rasterization with a z-buffer and an approximate backward pass.

Images are numpy arrays of shape ``(H, W)`` indexed ``[row, col]``; pixel
``(row, col)`` samples the continuous image point ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .camera import EPS_DEPTH

EPS_VIS = 0.02  # relative depth slack for vertex visibility


@dataclass(frozen=True, eq=False)
class RasterState:
    """Forward-pass cache consumed by :func:`rasterize_backward`."""

    face_index: np.ndarray   # (H, W) int, -1 where empty
    depth: np.ndarray        # (H, W) metres, inf where empty
    vertices_img: np.ndarray  # (N, 2) pixel coordinates (NaN behind camera)
    faces: np.ndarray
    face_ok: np.ndarray      # faces kept after near-plane culling

    @property
    def shape(self):
        return self.face_index.shape


def project_vertices(vertices_cam, K):
    """Perspective projection of (N, 3) camera-frame points; NaN behind the camera."""
    V = np.asarray(vertices_cam, dtype=float)
    z = V[:, 2]
    front = z > EPS_DEPTH
    zs = np.where(front, z, 1.0)
    uv = np.column_stack([V[:, 0] / zs, V[:, 1] / zs, np.ones(len(V))]) @ np.asarray(K).T
    uv[~front] = np.nan
    return uv, front


def rasterize_silhouette(vertices_cam, faces, K, width, height):
    """Binary silhouette of a mesh given in camera coordinates.

    Faces with any vertex closer than ``EPS_DEPTH`` are culled. Returns
    ``(mask, state)`` where ``mask`` is a float ``(H, W)`` array of 0/1.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    V = np.asarray(vertices_cam, dtype=float).reshape(-1, 3)
    xy, front = project_vertices(V, K)
    if len(faces):
        face_ok = front[faces].all(axis=1)
    else:
        face_ok = np.zeros(0, dtype=bool)
    inv_depth = np.where(front, 1.0 / np.where(front, V[:, 2], 1.0), 0.0)
    xy_safe = np.where(np.isfinite(xy), xy, 0.0)
    face_index, depth = _kernels.raster_faces(np.ascontiguousarray(xy_safe), inv_depth, faces,
                                              face_ok, int(width), int(height))
    mask = (face_index >= 0).astype(float)
    return mask, RasterState(face_index, depth, xy, faces, face_ok)


def rasterize_backward(dL_ds, state, vertices_img=None, radius=None, min_dist=0.5):
    """Approximate gradient of a mask loss wrt image-plane vertex positions.

    ``dL_ds`` is the (H, W) loss gradient wrt the rendered mask. Only pixels
    whose flip would decrease the loss contribute: each scans its row and
    column (up to ``radius`` pixels, default ``max(W, H) // 4``) for the nearest
    silhouette transition and pushes the responsible face edge toward it.
    Returns an ``(N, 2)`` array.
    """
    dL_ds = np.asarray(dL_ds, dtype=float)
    if dL_ds.shape != state.shape:
        raise ValueError(f"gradient shape {dL_ds.shape} does not match raster {state.shape}")
    xy = state.vertices_img if vertices_img is None else np.asarray(vertices_img, dtype=float)
    if xy.shape[0] != state.vertices_img.shape[0]:
        raise ValueError("vertex count does not match the forward pass")
    if radius is None:
        radius = max(state.shape) // 4
    xy_safe = np.ascontiguousarray(np.where(np.isfinite(xy), xy, 0.0))
    return _kernels.raster_backward(dL_ds, state.face_index, xy_safe, state.faces,
                                    int(radius), float(min_dist))


def vertex_visibility(vertices_cam, state, indices=None, eps_vis=EPS_VIS):
    """Visibility of selected vertices against the forward pass' z-buffer.

    A vertex is visible iff it is in front of the camera, projects inside the
    image, and its depth is at most ``depth_buffer * (1 + eps_vis)`` at its pixel
    (empty pixels have infinite depth).
    """
    V = np.asarray(vertices_cam, dtype=float)
    if indices is None:
        indices = np.arange(len(V))
    indices = np.asarray(indices, dtype=int)
    z = V[indices, 2]
    xy = state.vertices_img[indices]
    H, W = state.shape
    out = np.zeros(len(indices), dtype=bool)
    ok = (z > EPS_DEPTH) & np.all(np.isfinite(xy), axis=1)
    ok &= (xy[:, 0] >= 0) & (xy[:, 0] < W) & (xy[:, 1] >= 0) & (xy[:, 1] < H)
    cols = np.floor(xy[ok, 0]).astype(int)
    rows = np.floor(xy[ok, 1]).astype(int)
    zbuf = state.depth[rows, cols]
    out[ok] = z[ok] <= zbuf * (1.0 + eps_vis)
    return out


def pixel_covered(xy, mask):
    """Whether each (N, 2) image point falls on a nonzero pixel of ``mask``."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    H, W = mask.shape
    out = np.zeros(len(xy), dtype=bool)
    ok = np.all(np.isfinite(xy), axis=1)
    ok &= (xy[:, 0] >= 0) & (xy[:, 0] < W) & (xy[:, 1] >= 0) & (xy[:, 1] < H)
    out[ok] = mask[np.floor(xy[ok, 1]).astype(int), np.floor(xy[ok, 0]).astype(int)] > 0
    return out


def mask_iou(a, b):
    """Binary IoU of two masks (two empty masks -> 1)."""
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def bounding_box(mask):
    """Tight ``(x, y, w, h)`` pixel box of a mask, or ``None`` if empty."""
    rows = np.flatnonzero(np.any(mask > 0, axis=1))
    cols = np.flatnonzero(np.any(mask > 0, axis=0))
    if len(rows) == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


# --- binary PGM ----------------------------------------------------------------

def write_pgm(path, mask):
    """Write a mask as binary PGM (P5, maxval 255, 255 = mask)."""
    img = np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    """Read a P5 PGM written by :func:`write_pgm`; returns a float 0/1 mask."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + W * H], dtype=np.uint8)
    if pixels.size != W * H:
        raise ValueError("truncated PGM")
    return (pixels.reshape(H, W) > maxval // 2).astype(float)
