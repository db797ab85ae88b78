"""Synthetic scenes: ground-truth objects, camera paths, detections, odometry,
and the evaluation metrics used by the experiments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .assoc import SemanticObservation
from .camera import CameraIntrinsics, transform_to_camera
from .estimator import DegenerateConfiguration, ObjectState, kabsch_align
from .liegroup import Pose, pose_compose, pose_inverse, so3_exp
from .mesh import (MeshError, TriMesh, default_keypoints, find_symmetry, make_ellipsoid,
                   make_icosphere, mesh_voxel_iou, merge_meshes)
from .raster import (bounding_box, mask_iou, pixel_covered, rasterize_silhouette,
                     vertex_visibility)

log = logging.getLogger(__name__)


@dataclass(eq=False)
class SceneObject:
    class_id: int
    pose: Pose
    mesh: TriMesh
    kp_index: np.ndarray

    def as_state(self):
        return ObjectState(self.pose, self.mesh.copy(), np.array(self.kp_index), self.class_id)

    def world_mesh(self):
        return self.mesh.with_vertices(self.pose.apply(self.mesh.vertices))


@dataclass(eq=False)
class Scene:
    objects: list
    cameras: list
    timestamps: np.ndarray
    intr: CameraIntrinsics
    width: int
    height: int

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) != len(self.cameras):
            raise ValueError("one timestamp per camera pose is required")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def n_frames(self):
        return len(self.cameras)


@dataclass(frozen=True)
class NoiseModel:
    kp_sigma: float = 0.0
    mask_pixels: int = 0
    odom_rot_sigma: float = 0.0
    odom_trans_sigma: float = 0.0
    odom_bias: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if min(self.kp_sigma, self.mask_pixels, self.odom_rot_sigma, self.odom_trans_sigma) < 0:
            raise ValueError("noise magnitudes must be non-negative")

    @classmethod
    def default_odometry(cls, seed=0):
        """0.2 deg/frame rotation noise, 2 cm/frame translation noise, 1 cm/frame bias."""
        return cls(odom_rot_sigma=np.deg2rad(0.2), odom_trans_sigma=0.02,
                   odom_bias=(0.01, 0.0, 0.0), seed=seed)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera pose at ``eye`` looking at ``target`` (z forward, x right, y down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_matrix(np.column_stack([x, y, z]), eye)


def orbit_views(n, radius, target=(0.0, 0.0, 0.0), azimuths_deg=None, elevations_deg=None):
    """``n`` cameras on a sphere around ``target`` looking inward."""
    if azimuths_deg is None:
        azimuths_deg = np.linspace(0.0, 360.0, n, endpoint=False)
    if elevations_deg is None:
        elevations_deg = np.full(n, 30.0)
    target = np.asarray(target, dtype=float)
    cams = []
    for az, el in zip(azimuths_deg[:n], elevations_deg[:n]):
        a, e = np.deg2rad(az), np.deg2rad(el)
        eye = target + radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        cams.append(look_at(eye, target))
    return cams


# Mapping views ordered so that every prefix is spread around the object:
# two low side views 90 deg apart, then a near-overhead one, then fill-ins.
MAPPING_AZIMUTHS = (30.0, 120.0, 75.0, 300.0, 210.0, 165.0, 255.0, 345.0)
MAPPING_ELEVATIONS = (15.0, 15.0, 75.0, 10.0, 45.0, 20.0, 40.0, 25.0)


def arc_trajectory(n_frames, speed=0.5, yaw_rate_deg=0.5, height=1.5, start=(0.0, 0.0)):
    """Forward-looking camera driving along a planar arc at constant speed."""
    cams = []
    x, y = start
    heading = 0.0
    for _ in range(n_frames):
        eye = np.array([x, y, height])
        fwd = np.array([np.cos(heading), np.sin(heading), 0.0])
        cams.append(look_at(eye, eye + fwd))
        x += speed * np.cos(heading)
        y += speed * np.sin(heading)
        heading += np.deg2rad(yaw_rate_deg)
    return cams


# --- observations --------------------------------------------------------------

def _render_scene(scene, t, objects=None):
    objects = scene.objects if objects is None else objects
    cam = scene.cameras[t]
    merged, owner = merge_meshes([o.world_mesh() for o in objects])
    Vc = transform_to_camera(cam, Pose(), merged.vertices)
    mask, state = rasterize_silhouette(Vc, merged.faces, scene.intr.K, scene.width, scene.height)
    owner_img = np.where(state.face_index >= 0, owner[np.maximum(state.face_index, 0)], -1)
    return owner_img, state, Vc


def _mask_noise(mask, pixels, rng):
    if pixels <= 0:
        return mask
    k = int(rng.integers(-pixels, pixels + 1))
    if k > 0:
        return ndimage.binary_dilation(mask > 0, iterations=k).astype(float)
    if k < 0:
        eroded = ndimage.binary_erosion(mask > 0, iterations=-k)
        return eroded.astype(float) if eroded.any() else mask
    return mask


def frame_rng(noise, t, stream=0):
    return np.random.default_rng([noise.seed, stream, t])


def synthesize_observations(scene, t, noise=NoiseModel()):
    """Detections of every object visible in frame ``t`` with GT association labels.

    Masks come from a shared z-buffer over all objects, so inter-object
    occlusion is respected. A keypoint is detected (``q = 1``) when its vertex
    passes the z-buffer test and lands on its own object's mask.
    """
    rng = frame_rng(noise, t)
    owner_img, state, Vc = _render_scene(scene, t)
    cam = scene.cameras[t]
    out = []
    offset = 0
    for n, obj in enumerate(scene.objects):
        nv = obj.mesh.n_vertices
        own = (owner_img == n).astype(float)
        if not own.any():
            offset += nv
            continue
        idx = offset + np.asarray(obj.kp_index)
        offset += nv
        kp_xy = state.vertices_img[idx]
        visible = vertex_visibility(Vc, state, idx) & pixel_covered(kp_xy, own)
        kps = np.where(visible[:, None], kp_xy, np.nan)
        if noise.kp_sigma > 0:
            kps = kps + rng.normal(0.0, noise.kp_sigma, kps.shape)
        mask = _mask_noise(own, noise.mask_pixels, rng)
        alone, _ = rasterize_silhouette(transform_to_camera(cam, obj.pose, obj.mesh.vertices),
                                        obj.mesh.faces, scene.intr.K, scene.width, scene.height)
        u = float(own.sum() / max(alone.sum(), 1.0))
        out.append(SemanticObservation(obj.class_id, mask, kps, visible, visible.astype(float),
                                       bounding_box(mask), u, object_id=n, det_id=len(out)))
    return out


def keypoint_propagator(scene, noise=NoiseModel(), stream=1):
    """Optical-flow stand-in: moves an observation's keypoints to another frame.

    Uses the observation's ground-truth object to reproject the tracked
    keypoints; undetected keypoints stay NaN. Optional Gaussian pixel noise.
    """
    def propagate(obs, t_from, t_to):
        obj = scene.objects[obs.object_id]
        pts = obj.mesh.vertices[np.asarray(obj.kp_index)]
        Vc = transform_to_camera(scene.cameras[t_to], obj.pose, pts)
        z = np.where(Vc[:, 2] > 1e-6, Vc[:, 2], np.nan)
        uv = np.column_stack([Vc[:, 0] / z, Vc[:, 1] / z, np.ones(len(z))]) @ scene.intr.K.T
        uv[~obs.kp_valid] = np.nan
        if noise.kp_sigma > 0:
            rng = np.random.default_rng([noise.seed, stream, t_from, t_to, obs.object_id])
            uv = uv + rng.normal(0.0, noise.kp_sigma, uv.shape)
        return uv
    return propagate


# --- odometry --------------------------------------------------------------------

def relative_poses(trajectory):
    return [pose_compose(pose_inverse(a), b) for a, b in zip(trajectory[:-1], trajectory[1:])]


def noisy_odometry(trajectory, noise=NoiseModel()):
    """Relative camera motions perturbed by seeded noise plus a constant body-frame bias."""
    if len(trajectory) < 2:
        raise ValueError("odometry needs at least two poses")
    rng = np.random.default_rng([noise.seed, 2])
    bias = np.broadcast_to(np.asarray(noise.odom_bias, dtype=float), (3,))
    out = []
    for d in relative_poses(trajectory):
        dr = rng.normal(0.0, noise.odom_rot_sigma, 3) if noise.odom_rot_sigma > 0 else np.zeros(3)
        dt = rng.normal(0.0, noise.odom_trans_sigma, 3) if noise.odom_trans_sigma > 0 else np.zeros(3)
        R = d.R @ so3_exp(dr)
        out.append(Pose.from_matrix(R, d.translation + dt + bias))
    return out


def integrate_odometry(start, deltas):
    poses = [start]
    for d in deltas:
        poses.append(pose_compose(poses[-1], d))
    return poses


def ate(estimated, ground_truth, align=False):
    """RMS position error; with ``align`` the estimate is first rigidly aligned."""
    P = np.array([p.translation if isinstance(p, Pose) else p for p in estimated], dtype=float)
    G = np.array([p.translation if isinstance(p, Pose) else p for p in ground_truth], dtype=float)
    if P.shape != G.shape:
        raise ValueError("trajectories differ in length")
    if align:
        try:
            T = kabsch_align(P, G)
            P = T.apply(P)
        except DegenerateConfiguration:
            P = P - P.mean(axis=0) + G.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((P - G) ** 2, axis=1))))


# --- mapping metrics -----------------------------------------------------------------

def mapping_report(gt, est, views, intr, width, height, resolution=64):
    """Per-view mask IoU, their mean, and voxel IoU in the world frame.

    ``gt``/``est`` expose ``pose`` and ``mesh``. Voxel IoU is ``None`` when
    either mesh is open.
    """
    ious = []
    for cam in views:
        a, _ = rasterize_silhouette(transform_to_camera(cam, gt.pose, gt.mesh.vertices),
                                    gt.mesh.faces, intr.K, width, height)
        b, _ = rasterize_silhouette(transform_to_camera(cam, est.pose, est.mesh.vertices),
                                    est.mesh.faces, intr.K, width, height)
        ious.append(mask_iou(a, b))
    gw = gt.mesh.with_vertices(gt.pose.apply(gt.mesh.vertices))
    ew = est.mesh.with_vertices(est.pose.apply(est.mesh.vertices))
    try:
        viou = mesh_voxel_iou(gw, ew, resolution)
    except MeshError:
        log.warning("voxel IoU skipped: mesh is not closed")
        viou = None
    return {"mask_iou": ious, "mean_mask_iou": float(np.mean(ious)) if ious else None,
            "voxel_iou": viou}


# --- scene construction ------------------------------------------------------------

def make_shape(spec):
    """Mesh from a shape spec: ``{"type": "ellipsoid", "radii": [...], "subdivisions": s}``."""
    kind = spec.get("type", "ellipsoid")
    sub = int(spec.get("subdivisions", 3))
    if kind == "sphere":
        return make_icosphere(sub, float(spec.get("radius", 1.0)))
    if kind == "ellipsoid":
        return make_ellipsoid(spec.get("radii", (1.0, 1.0, 1.0)), sub)
    raise ValueError(f"unknown shape type {kind!r}")


@dataclass
class MeanModel:
    """Category-level mean shape with keypoints and its mirror map."""

    mesh: TriMesh
    kp_index: np.ndarray
    symmetry: object = None
    class_id: int = 0

    @classmethod
    def sphere(cls, radius=0.65, subdivisions=3, n_keypoints=12, class_id=0):
        mesh = make_icosphere(subdivisions, radius)
        return cls(mesh, default_keypoints(mesh, n_keypoints), find_symmetry(mesh), class_id)


def object_from_spec(spec, kp_index=None, n_keypoints=12):
    mesh = make_shape(spec.get("shape", {}))
    pose_spec = spec.get("pose", {})
    pose = Pose(pose_spec.get("rotvec", (0.0, 0.0, 0.0)), pose_spec.get("translation", (0.0, 0.0, 0.0)))
    if kp_index is None:
        kp_index = default_keypoints(make_icosphere(int(spec.get("shape", {}).get("subdivisions", 3))),
                                     n_keypoints)
    return SceneObject(int(spec.get("class", 0)), pose, mesh, np.asarray(kp_index))


def mapping_scene(n_views=8, gt_radii=(1.0, 0.6, 0.4), yaw_deg=20.0, distance=4.0, size=128,
                  focal=200.0, subdivisions=3):
    """Single ellipsoid observed from up to eight inward-looking views."""
    ico = make_icosphere(subdivisions)
    kp = default_keypoints(ico, 12)
    obj = SceneObject(0, Pose([0.0, 0.0, np.deg2rad(yaw_deg)], [0.0, 0.0, 0.0]),
                      make_ellipsoid(gt_radii, subdivisions), kp)
    cams = orbit_views(n_views, distance, azimuths_deg=MAPPING_AZIMUTHS,
                       elevations_deg=MAPPING_ELEVATIONS)
    intr = CameraIntrinsics.from_pixels(focal, focal, size / 2.0, size / 2.0)
    return Scene([obj], cams, np.arange(len(cams), dtype=float), intr, size, size)


def roadside_objects(path, n_objects=6, seed=0, subdivisions=2, lead=12):
    """Car-sized ellipsoids parked alternately left and right of a driven path.

    ``path`` is an (M, 3) array of camera positions that extends ``lead``
    frames past the last frame, so the last object is still ahead of the
    camera at the end of the run.
    """
    rng = np.random.default_rng([seed, 3])
    n_frames = len(path) - 2 * lead
    kp = default_keypoints(make_icosphere(subdivisions), 12)
    objects = []
    for i in range(n_objects):
        t = lead + int(round((i + 1) * n_frames / n_objects))
        heading = np.arctan2(*(path[t + 1] - path[t - 1])[[1, 0]])
        side = 1.0 if i % 2 == 0 else -1.0
        lateral = np.array([-np.sin(heading), np.cos(heading), 0.0]) * side * rng.uniform(3.5, 5.0)
        center = np.array([path[t, 0], path[t, 1], 0.75]) + lateral
        radii = (rng.uniform(1.8, 2.3), rng.uniform(0.8, 1.0), rng.uniform(0.6, 0.8))
        yaw = heading + rng.uniform(-0.3, 0.3)
        objects.append(SceneObject(0, Pose([0.0, 0.0, yaw], center),
                                   make_ellipsoid(radii, subdivisions), kp))
    return objects


def localization_scene(n_frames=70, n_objects=6, width=320, height=240, focal=300.0, seed=0,
                       subdivisions=2, speed=0.5, yaw_rate_deg=0.5, height_m=1.5):
    """Forward-driving camera passing ``n_objects`` car-sized ellipsoids.

    Objects are spread along the road ahead so that every frame sees at
    least one of them.
    """
    lead = 12
    kw = dict(speed=speed, yaw_rate_deg=yaw_rate_deg, height=height_m)
    path = np.array([c.translation for c in arc_trajectory(n_frames + 2 * lead, **kw)])
    objects = roadside_objects(path, n_objects, seed, subdivisions, lead)
    intr = CameraIntrinsics.from_pixels(focal, focal, width / 2.0, height / 2.0)
    return Scene(objects, arc_trajectory(n_frames, **kw), 0.1 * np.arange(n_frames), intr,
                 width, height)


def tracking_scene(n_frames=20, n_objects=4, width=320, height=240, focal=300.0, seed=0,
                   subdivisions=2, speed=0.15):
    """Slowly advancing camera facing a row of ``n_objects`` same-class ellipsoids.

    Objects stand side by side 13 to 15 m ahead with 3.2 m between centres,
    so neighbouring boxes are close in the image but do not occlude each other.
    """
    rng = np.random.default_rng([seed, 4])
    kp = default_keypoints(make_icosphere(subdivisions), 12)
    objects = []
    for i in range(n_objects):
        lateral = 3.2 * (i - (n_objects - 1) / 2.0)
        center = np.array([rng.uniform(13.0, 15.0), lateral, 0.75])
        radii = (rng.uniform(1.8, 2.3), rng.uniform(0.8, 1.0), rng.uniform(0.6, 0.8))
        objects.append(SceneObject(0, Pose([0.0, 0.0, rng.uniform(-0.3, 0.3)], center),
                                   make_ellipsoid(radii, subdivisions), kp))
    intr = CameraIntrinsics.from_pixels(focal, focal, width / 2.0, height / 2.0)
    cams = arc_trajectory(n_frames, speed=speed, yaw_rate_deg=0.3)
    return Scene(objects, cams, 0.1 * np.arange(n_frames), intr, width, height)
