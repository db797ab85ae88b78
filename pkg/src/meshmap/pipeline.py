"""Experiment drivers and their YAML configuration.

A config file declares the camera, trajectory, objects, mean model, noise,
optimizer settings and seed. ``run_mapping`` and ``run_localization`` are the
two experiments; the CLI only handles files around them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
import yaml

from .assoc import Track, Tracker
from .camera import CameraIntrinsics
from .estimator import (InitializationError, ObjectState, OptimConfig, init_object,
                        optimize_camera_pose, optimize_object)
from .liegroup import Pose, quaternion_to_rotvec
from .losses import LossWeights
from .sim import (MeanModel, NoiseModel, Scene, arc_trajectory, ate, integrate_odometry,
                  keypoint_propagator, localization_scene, mapping_report, mapping_scene,
                  noisy_odometry, object_from_spec, orbit_views, roadside_objects,
                  synthesize_observations, tracking_scene)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# --- configuration ------------------------------------------------------------------

MAPPING_OPTIM = dict(lambda_reg=1.0, alternations=3)


def default_config(kind):
    """Built-in config dicts for the two experiments."""
    if kind == "map":
        return {
            "seed": 0,
            "scene": {"preset": "mapping"},
            "mean_model": {"radius": 0.62, "subdivisions": 3, "keypoints": 12},
            "views": [1, 2, 3, 5, 8],
            "optim": dict(MAPPING_OPTIM),
        }
    if kind == "localize":
        return {
            "seed": 0,
            "scene": {"preset": "localization"},
            "noise": {"odom_rot_sigma_deg": 0.2, "odom_trans_sigma": 0.02,
                      "odom_bias": [0.01, 0.0, 0.0]},
        }
    raise ConfigError(f"no default config for {kind!r}")


def load_config(path):
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def _intrinsics(spec, width, height):
    fx = float(spec.get("fx", spec.get("f", 200.0)))
    fy = float(spec.get("fy", fx))
    return CameraIntrinsics.from_pixels(fx, fy, float(spec.get("cx", width / 2.0)),
                                        float(spec.get("cy", height / 2.0)),
                                        float(spec.get("skew", 0.0)))


def _trajectory(spec):
    kind = spec.get("type", "poses")
    if kind == "orbit":
        cams = orbit_views(len(spec["azimuths_deg"]), float(spec.get("radius", 4.0)),
                           spec.get("target", (0.0, 0.0, 0.0)), spec["azimuths_deg"],
                           spec.get("elevations_deg"))
    elif kind == "arc":
        cams = arc_trajectory(int(spec.get("frames", 70)), float(spec.get("speed", 0.5)),
                              float(spec.get("yaw_rate_deg", 0.5)), float(spec.get("height", 1.5)))
    elif kind == "poses":
        cams = []
        for p in spec["poses"]:
            if "quaternion" in p:
                cams.append(Pose(quaternion_to_rotvec(p["quaternion"]), p["translation"]))
            else:
                cams.append(Pose(p.get("rotvec", (0.0, 0.0, 0.0)), p["translation"]))
    else:
        raise ConfigError(f"unknown trajectory type {kind!r}")
    stamps = spec.get("timestamps")
    if stamps is None:
        stamps = float(spec.get("dt", 1.0)) * np.arange(len(cams))
    return cams, np.asarray(stamps, dtype=float)


def scene_from_config(cfg, n_frames=None, n_views=None):
    """Build a :class:`Scene` from the ``scene`` section of a config dict."""
    spec = cfg.get("scene", {})
    try:
        preset = spec.get("preset")
        if preset == "mapping":
            scene = mapping_scene(n_views=8)
        elif preset == "localization":
            kw = {k: spec[k] for k in ("n_objects", "width", "height", "focal") if k in spec}
            scene = localization_scene(n_frames=int(n_frames or spec.get("frames", 70)),
                                       seed=int(cfg.get("seed", 0)), **kw)
        elif preset == "tracking":
            scene = tracking_scene(n_frames=int(n_frames or spec.get("frames", 20)),
                                   n_objects=int(spec.get("n_objects", 4)),
                                   seed=int(cfg.get("seed", 0)))
        elif preset is None:
            width, height = int(spec["width"]), int(spec["height"])
            intr = _intrinsics(spec.get("intrinsics", {}), width, height)
            cams, stamps = _trajectory(spec["trajectory"])
            objs = spec.get("objects", [])
            if isinstance(objs, dict) and objs.get("generate") == "roadside":
                path = np.array([c.translation for c in arc_trajectory(
                    len(cams) + 24, **{k: float(spec["trajectory"][k]) for k in
                                       ("speed", "yaw_rate_deg", "height")
                                       if k in spec["trajectory"]})])
                objects = roadside_objects(path, int(objs.get("count", 6)),
                                           int(cfg.get("seed", 0)))
            else:
                objects = [object_from_spec(o) for o in objs]
            scene = Scene(objects, cams, stamps, intr, width, height)
        else:
            raise ConfigError(f"unknown scene preset {preset!r}")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scene config: {exc!r}") from exc
    if n_frames is not None:
        if not 2 <= n_frames <= scene.n_frames:
            raise ConfigError(f"--frames must be in [2, {scene.n_frames}]")
        scene = Scene(scene.objects, scene.cameras[:n_frames], scene.timestamps[:n_frames],
                      scene.intr, scene.width, scene.height)
    if not scene.objects:
        raise ConfigError("scene has no objects")
    return scene


def noise_from_config(cfg):
    spec = dict(cfg.get("noise", {}))
    try:
        return NoiseModel(kp_sigma=float(spec.get("kp_sigma", 0.0)),
                          mask_pixels=int(spec.get("mask_pixels", 0)),
                          odom_rot_sigma=np.deg2rad(float(spec.get("odom_rot_sigma_deg", 0.0))),
                          odom_trans_sigma=float(spec.get("odom_trans_sigma", 0.0)),
                          odom_bias=tuple(float(b) for b in spec.get("odom_bias", (0, 0, 0))),
                          seed=int(cfg.get("seed", 0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad noise config: {exc}") from exc


def optim_from_config(cfg):
    spec = dict(cfg.get("optim", {}))
    names = {f.name for f in fields(OptimConfig)}
    unknown = set(spec) - names
    if unknown:
        raise ConfigError(f"unknown optim keys: {sorted(unknown)}")
    try:
        if "weights" in spec:
            spec["weights"] = LossWeights(**spec["weights"])
        return replace(OptimConfig(), **spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad optim config: {exc}") from exc


def mean_model_from_config(cfg):
    spec = cfg.get("mean_model", {})
    try:
        return MeanModel.sphere(float(spec.get("radius", 0.62)), int(spec.get("subdivisions", 3)),
                                int(spec.get("keypoints", 12)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad mean_model config: {exc}") from exc


# --- mapping ----------------------------------------------------------------------

@dataclass
class MappingResult:
    """Per-track outcome of :func:`run_mapping`."""

    track_id: int
    object_id: int | None
    frames: list
    initial: ObjectState | None = None
    initial_report: dict | None = None
    states: dict = field(default_factory=dict)     # views -> ObjectState
    reports: dict = field(default_factory=dict)    # views -> mapping_report
    error: str | None = None


def track_scene(scene, observations, noise=NoiseModel()):
    """Run the tracker over all frames; returns the list of tracks."""
    tracker = Tracker()
    prop = keypoint_propagator(scene, noise)
    for t in range(scene.n_frames):
        tracker.step(t, observations[t], prop)
    return tracker.tracks


def tracking_accuracy(observations, assignments):
    """Fraction of detections in frames ``t >= 1`` that the tracker got right.

    A detection is right when it continues the track that held the same
    ground-truth object in the previous frame, or starts a new track when
    that object was not detected there.
    """
    correct = total = 0
    for t in range(1, len(observations)):
        prev = {o.object_id: a for o, a in zip(observations[t - 1], assignments[t - 1])}
        seen = {a for frame in assignments[:t] for a in frame}
        for obs, a in zip(observations[t], assignments[t]):
            total += 1
            if obs.object_id in prev:
                correct += a == prev[obs.object_id]
            else:
                correct += a not in seen
    return correct / total if total else 1.0


def run_tracking(scene, noise=NoiseModel()):
    """Track every frame of ``scene``; returns ``(tracker, assignments, accuracy)``."""
    observations = [synthesize_observations(scene, t, noise) for t in range(scene.n_frames)]
    tracker = Tracker()
    prop = keypoint_propagator(scene, noise)
    assignments = [tracker.step(t, observations[t], prop) for t in range(scene.n_frames)]
    return tracker, assignments, tracking_accuracy(observations, assignments)


def ground_truth_tracks(observations):
    """One track per ground-truth object, holding all its observations in frame order."""
    tracks = {}
    for t, frame in enumerate(observations):
        for obs in frame:
            if obs.object_id is None:
                continue
            if obs.object_id not in tracks:
                tracks[obs.object_id] = Track(len(tracks), obs.class_id)
            tr = tracks[obs.object_id]
            tr.frames.append(t)
            tr.observations.append(obs)
    return list(tracks.values())


def run_mapping(scene, mean_model, cfg=OptimConfig(), view_counts=(1, 2, 3, 5, 8),
                noise=NoiseModel(), association="ground_truth"):
    """Initialize and optimize every object seen in ``scene``.

    ``association`` is ``"ground_truth"`` (observations grouped by their
    object label) or ``"tracker"`` (frame-to-frame tracking, which needs
    closely spaced frames). Initialization triangulates keypoints from every
    frame of a track; the pose and shape stages then use only the first ``n``
    frames for each ``n`` in ``view_counts``. Metrics are taken against the
    ground-truth object the track mostly observed, over all scene cameras.
    """
    observations = [synthesize_observations(scene, t, noise) for t in range(scene.n_frames)]
    if association == "ground_truth":
        tracks = ground_truth_tracks(observations)
    elif association == "tracker":
        tracks = track_scene(scene, observations, noise)
    else:
        raise ValueError(f"unknown association mode {association!r}")
    results = []
    for track in tracks:
        ids = [o.object_id for o in track.observations if o.object_id is not None]
        oid = max(set(ids), key=ids.count) if ids else None
        res = MappingResult(track.track_id, oid, list(track.frames))
        results.append(res)
        meas = [(scene.cameras[t], kps, ok) for t, kps, ok in track.keypoint_measurements(cfg.q_min)]
        try:
            state = init_object(meas, mean_model.mesh, mean_model.kp_index, scene.intr, cfg,
                                mean_model.class_id, mean_model.symmetry)
        except InitializationError as exc:
            log.warning("track %d: initialization failed: %s", track.track_id, exc)
            res.error = str(exc)
            continue
        res.initial = state
        gt = scene.objects[oid] if oid is not None else None
        if gt is not None:
            res.initial_report = mapping_report(gt, state, scene.cameras, scene.intr,
                                                scene.width, scene.height)
        for n in view_counts:
            if n > len(track.frames):
                log.warning("track %d has %d frames; skipping %d views", track.track_id,
                            len(track.frames), n)
                continue
            views = [(scene.cameras[t], o) for t, o in
                     zip(track.frames[:n], track.observations[:n])]
            est, _ = optimize_object(state, views, scene.intr, cfg)
            res.states[n] = est
            if gt is not None:
                res.reports[n] = mapping_report(gt, est, scene.cameras, scene.intr,
                                                scene.width, scene.height)
    return results


# --- localization ---------------------------------------------------------------------

@dataclass
class LocalizationResult:
    ground_truth: list
    odometry: list          # odometry-only integration
    estimate: list
    traces: list            # per frame (frame 0 has none)
    ate_odometry: float
    ate_estimate: float
    ate_curve: np.ndarray   # ATE when every frame is capped at k iterations
    flags: dict             # frame -> flags


def _localize(scene, odom, observations, objects, cfg):
    est = [scene.cameras[0]]
    traces, flags = [], {}
    for t in range(1, scene.n_frames):
        pose, trace = optimize_camera_pose(est[-1], odom[t - 1], observations[t], objects,
                                           scene.intr, cfg)
        if trace.flags or trace.status == "diverged":
            flags[t] = list(trace.flags) + ([trace.status] if trace.status == "diverged" else [])
        est.append(pose)
        traces.append(trace)
    return est, traces, flags


def run_localization(scene, noise, cfg=OptimConfig(), objects=None, curve_iters=10):
    """Sequential camera localization against known objects.

    Frame 0 is taken as known. Each following frame starts from the previous
    estimate composed with the odometry and is refined on its observations.
    ``objects`` defaults to the ground-truth states.

    ``ate_curve[k]`` is the ATE of the whole run repeated with at most ``k``
    iterations per frame, for ``k = 0 .. curve_iters``; ``k = 0`` is the
    odometry-only trajectory.
    """
    if objects is None:
        objects = {i: o.as_state() for i, o in enumerate(scene.objects)}
    odom = noisy_odometry(scene.cameras, noise)
    observations = [synthesize_observations(scene, t, noise) for t in range(scene.n_frames)]
    est, traces, flags = _localize(scene, odom, observations, objects, cfg)
    odo = integrate_odometry(scene.cameras[0], odom)
    used = max((len(tr.losses) - 1 for tr in traces), default=0)
    curve = []
    for k in range(curve_iters + 1):
        if k >= used:
            # a larger cap cannot change any frame
            curve.append(ate(est, scene.cameras))
        elif k == 0:
            curve.append(ate(odo, scene.cameras))
        else:
            capped, _, _ = _localize(scene, odom, observations, objects,
                                     replace(cfg, camera_iters=k))
            curve.append(ate(capped, scene.cameras))
    return LocalizationResult(list(scene.cameras), odo, est, traces, ate(odo, scene.cameras),
                              ate(est, scene.cameras), np.array(curve), flags)
