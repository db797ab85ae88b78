"""Command-line entry point: ``meshmap {gradcheck,map,localize,render,simulate}``.

Every run writes into a fresh ``<out>/<command>-<timestamp>`` directory with
a ``manifest.json`` describing the run. Exit codes: 0 success, 1 tolerance or
acceptance failure, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from .assoc import SemanticObservation, write_observations
from .camera import CameraIntrinsics, transform_to_camera
from .gradcheck import run_gradcheck
from .liegroup import Pose, quaternion_to_rotvec, rotvec_to_quaternion
from .mesh import MeshError, default_keypoints, load_obj, save_obj
from .pipeline import (ConfigError, default_config, load_config, mean_model_from_config,
                       noise_from_config, optim_from_config, run_localization, run_mapping,
                       scene_from_config)
from .raster import bounding_box, pixel_covered, rasterize_silhouette, vertex_visibility
from .sim import integrate_odometry, make_shape, noisy_odometry, synthesize_observations

log = logging.getLogger("meshmap")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def fmt(x):
    return "%.17g" % x


def pose_line(t, pose):
    q = rotvec_to_quaternion(pose.rotvec)
    return " ".join(fmt(v) for v in (t, *pose.translation, *q))


def write_trajectory(path, stamps, poses):
    with open(path, "w") as fh:
        for t, p in zip(stamps, poses):
            fh.write(pose_line(t, p) + "\n")


def read_trajectory(path):
    stamps, poses = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            v = [float(x) for x in line.split()]
            stamps.append(v[0])
            poses.append(Pose(quaternion_to_rotvec(v[4:8]), v[1:4]))
    return np.array(stamps), poses


class Run:
    """Output directory plus the manifest written once at the end."""

    def __init__(self, command, args):
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        base = Path(args.out)
        path = base / f"{command}-{stamp}"
        n = 1
        while path.exists():
            path = base / f"{command}-{stamp}-{n}"
            n += 1
        path.mkdir(parents=True)
        self.dir = path
        self.manifest = {"command": command, "config": args.config, "seed": args.seed,
                         "output_dir": str(path), "timing_s": {}, "metrics": {}, "files": [],
                         "notes": []}
        self._t = time.perf_counter()

    def stage(self, name):
        now = time.perf_counter()
        self.manifest["timing_s"][name] = now - self._t
        self._t = now

    def file(self, name):
        self.manifest["files"].append(name)
        return self.dir / name

    def finish(self, exit_code):
        self.manifest["exit_code"] = exit_code
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
        return exit_code


def _config(args, kind):
    cfg = load_config(args.config) if args.config else default_config(kind)
    if args.seed is not None:
        cfg["seed"] = args.seed
    args.seed = int(cfg.get("seed", 0))
    return cfg


# --- commands ---------------------------------------------------------------------

def cmd_gradcheck(args):
    n_jac, n_loss = 200, 100
    if args.config:
        cfg = load_config(args.config)
        try:
            n_jac = int(cfg.get("jacobian_samples", n_jac))
            n_loss = int(cfg.get("loss_samples", n_loss))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad gradcheck config: {exc}") from exc
    run = Run("gradcheck", args)
    try:
        report = run_gradcheck(n_jac, n_loss, seed=args.seed or 0, fault=args.inject_sign_flip)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run.stage("gradcheck")
    for line in report.lines():
        print(line)
    with open(run.file("gradcheck.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "count", "max_rel_err", "tol", "ok"])
        for b in report.blocks:
            w.writerow([b.name, b.count, fmt(b.max_rel_err), fmt(b.tol), int(b.ok)])
    run.manifest["metrics"] = {b.name: b.max_rel_err for b in report.blocks}
    if not report.ok:
        print("FAILED blocks: " + ", ".join(report.failing))
        return run.finish(EXIT_FAIL)
    return run.finish(EXIT_OK)


def cmd_map(args):
    cfg = _config(args, "map")
    views = [args.views] if args.views is not None else [int(v) for v in cfg.get("views", [8])]
    if any(v < 1 for v in views):
        raise ConfigError("view counts must be positive")
    scene = scene_from_config(cfg)
    if max(views) > scene.n_frames:
        raise ConfigError(f"scene has only {scene.n_frames} views")
    mean = mean_model_from_config(cfg)
    optim = optim_from_config(cfg)
    noise = noise_from_config(cfg)
    association = cfg.get("association", "ground_truth")
    if association not in ("ground_truth", "tracker"):
        raise ConfigError(f"unknown association mode {association!r}")
    run = Run("map", args)
    run.stage("setup")
    results = run_mapping(scene, mean, optim, views, noise, association)
    run.stage("mapping")
    rows = []
    summary = {}
    for res in results:
        tag = f"object_{res.track_id:03d}"
        if res.error:
            run.manifest["notes"].append(f"{tag}: initialization failed: {res.error}")
            continue
        init = res.initial_report or {}
        for n in views:
            rep = res.reports.get(n)
            if rep is None:
                continue
            rows.append([res.track_id, res.object_id, n, fmt(rep["voxel_iou"]),
                         fmt(rep["mean_mask_iou"]), fmt(init.get("voxel_iou", np.nan)),
                         fmt(init.get("mean_mask_iou", np.nan))])
            summary[f"{tag}/views_{n}/voxel_iou"] = rep["voxel_iou"]
        n_best = max(res.states)
        est = res.states[n_best]
        save_obj(est.mesh, run.file(f"{tag}.obj"))
        with open(run.file(f"{tag}_pose.txt"), "w") as fh:
            fh.write(pose_line(0.0, est.pose) + "\n")
    with open(run.file("iou_vs_views.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object", "gt_object", "views", "voxel_iou", "mean_mask_iou",
                    "initial_voxel_iou", "initial_mean_mask_iou"])
        w.writerows(rows)
    run.stage("write")
    run.manifest["metrics"] = summary
    for line in rows:
        print(f"object {line[0]} views {line[2]}: voxel IoU {float(line[3]):.4f} "
              f"(initial {float(line[5]):.4f}), mean mask IoU {float(line[4]):.4f}")
    code = EXIT_OK
    accept = cfg.get("acceptance", {})
    if "min_voxel_iou" in accept:
        best = [float(r[3]) for r in rows if r[2] == max(views)]
        if not best or min(best) <= float(accept["min_voxel_iou"]):
            code = EXIT_FAIL
    return run.finish(code)


def cmd_localize(args):
    cfg = _config(args, "localize")
    scene = scene_from_config(cfg, n_frames=args.frames)
    noise = noise_from_config(cfg)
    optim = optim_from_config(cfg)
    run = Run("localize", args)
    run.stage("setup")
    res = run_localization(scene, noise, optim, curve_iters=int(cfg.get("curve_iters", 10)))
    run.stage("localization")
    write_trajectory(run.file("trajectory_gt.txt"), scene.timestamps, res.ground_truth)
    write_trajectory(run.file("trajectory_odometry.txt"), scene.timestamps, res.odometry)
    write_trajectory(run.file("trajectory_estimate.txt"), scene.timestamps, res.estimate)
    with open(run.file("ate_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "ate"])
        for k, a in enumerate(res.ate_curve):
            w.writerow([k, fmt(a)])
    with open(run.file("ate.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "ate"])
        w.writerow(["odometry", fmt(res.ate_odometry)])
        w.writerow(["estimate", fmt(res.ate_estimate)])
    run.stage("write")
    run.manifest["metrics"] = {"ate_odometry": res.ate_odometry, "ate_estimate": res.ate_estimate}
    for t, fl in sorted(res.flags.items()):
        run.manifest["notes"].append(f"frame {t}: {', '.join(fl)}")
    print(f"ATE odometry {res.ate_odometry:.4f} m, optimized {res.ate_estimate:.4f} m")
    code = EXIT_OK
    accept = cfg.get("acceptance", {})
    if "max_ate_ratio" in accept and res.ate_estimate > float(accept["max_ate_ratio"]) * res.ate_odometry:
        code = EXIT_FAIL
    return run.finish(code)


def _render_setup(cfg):
    try:
        size = cfg.get("image", {})
        width, height = int(size.get("width", 128)), int(size.get("height", 128))
        cam_spec = cfg.get("camera", {})
        intr_spec = cam_spec.get("intrinsics", {})
        fx = float(intr_spec.get("fx", 200.0))
        intr = CameraIntrinsics.from_pixels(fx, float(intr_spec.get("fy", fx)),
                                            float(intr_spec.get("cx", width / 2.0)),
                                            float(intr_spec.get("cy", height / 2.0)))
        cam = Pose(cam_spec.get("rotvec", (0.0, 0.0, 0.0)), cam_spec.get("translation", (0.0, 0.0, 0.0)))
        obj_spec = cfg.get("object", {})
        if "obj" in obj_spec:
            mesh = load_obj(obj_spec["obj"])
        else:
            mesh = make_shape(obj_spec.get("shape", {"type": "sphere", "radius": 1.0}))
        pose = obj_spec.get("pose", {})
        obj = Pose(pose.get("rotvec", (0.0, 0.0, 0.0)), pose.get("translation", (0.0, 0.0, 5.0)))
        kp = obj_spec.get("keypoints")
        kp = np.asarray(kp, dtype=int) if kp is not None else default_keypoints(mesh, 12)
    except (KeyError, TypeError, ValueError, OSError, MeshError) as exc:
        raise ConfigError(f"bad render config: {exc}") from exc
    return width, height, intr, cam, mesh, obj, kp


def cmd_render(args):
    cfg = _config(args, "render") if args.config else {}
    width, height, intr, cam, mesh, obj, kp = _render_setup(cfg)
    run = Run("render", args)
    Vc = transform_to_camera(cam, obj, mesh.vertices)
    mask, state = rasterize_silhouette(Vc, mesh.faces, intr.K, width, height)
    if not np.all(Vc[:, 2] > 0):
        run.manifest["notes"].append("object (partly) behind the camera; culled faces not drawn")
    visible = vertex_visibility(Vc, state, kp) & pixel_covered(state.vertices_img[kp], mask)
    kps = np.where(visible[:, None], state.vertices_img[kp], np.nan)
    bbox = bounding_box(mask) or (0, 0, 0, 0)
    obs = SemanticObservation(int(cfg.get("object", {}).get("class", 0)), mask, kps, visible,
                              visible.astype(float), bbox, 1.0, det_id=0)
    write_observations(run.dir, [obs])
    run.manifest["files"] += ["mask_000.pgm", "keypoints.csv"]
    run.stage("render")
    run.manifest["metrics"] = {"mask_pixels": int(mask.sum()),
                               "visible_keypoints": int(visible.sum())}
    print(f"mask pixels {int(mask.sum())}, visible keypoints {int(visible.sum())}/{len(kp)}")
    return run.finish(EXIT_OK)


def cmd_simulate(args):
    cfg = _config(args, "localize")
    scene = scene_from_config(cfg, n_frames=args.frames)
    noise = noise_from_config(cfg)
    run = Run("simulate", args)
    n_det = 0
    for t in range(scene.n_frames):
        obs = synthesize_observations(scene, t, noise)
        n_det += len(obs)
        write_observations(run.dir / f"frame_{t:04d}", obs)
        with open(run.dir / f"frame_{t:04d}" / "association.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["det_id", "object_id"])
            for o in obs:
                w.writerow([o.det_id, o.object_id])
    run.manifest["files"].append("frame_*/")
    write_trajectory(run.file("trajectory_gt.txt"), scene.timestamps, scene.cameras)
    if scene.n_frames >= 2:
        odo = integrate_odometry(scene.cameras[0], noisy_odometry(scene.cameras, noise))
        write_trajectory(run.file("trajectory_odometry.txt"), scene.timestamps, odo)
    for i, o in enumerate(scene.objects):
        save_obj(o.mesh, run.file(f"object_{i:03d}.obj"))
        with open(run.file(f"object_{i:03d}_pose.txt"), "w") as fh:
            fh.write(pose_line(0.0, o.pose) + "\n")
    run.stage("simulate")
    run.manifest["metrics"] = {"frames": scene.n_frames, "detections": n_det}
    print(f"{scene.n_frames} frames, {n_det} detections")
    return run.finish(EXIT_OK)


COMMANDS = {"gradcheck": cmd_gradcheck, "map": cmd_map, "localize": cmd_localize,
            "render": cmd_render, "simulate": cmd_simulate}


def build_parser():
    parser = argparse.ArgumentParser(prog="meshmap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="runs", help="parent directory for run outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "map":
            p.add_argument("--views", type=int, help="number of views to optimize on")
        if name in ("localize", "simulate"):
            p.add_argument("--frames", type=int, help="truncate the trajectory to N frames")
        if name == "gradcheck":
            p.add_argument("--inject-sign-flip", metavar="BLOCK", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
