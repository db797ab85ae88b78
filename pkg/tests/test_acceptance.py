"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[acceptance] Cn ...: PASS|FAIL`` line (visible
with or without ``-s``) before asserting. Run on its own with
``pytest tests/test_acceptance.py``.
"""
import time

import numpy as np
import yaml

from meshmap.cli import main
from meshmap.estimator import (OptimConfig, init_object, optimize_camera_pose,
                               optimize_object_pose, optimize_object_shape,
                               triangulate_keypoints)
from meshmap.gradcheck import check_jacobians, check_kps_loss, check_mask_loss
from meshmap.liegroup import rotation_angle_between, so3_exp, so3_log, so3_right_jacobian
from meshmap.mesh import find_symmetry
from meshmap.pipeline import (MAPPING_OPTIM, default_config, mean_model_from_config,
                              run_localization, run_mapping, run_tracking)
from meshmap.raster_tasks import TASK_NAMES, descend, make_task
from meshmap.sim import (NoiseModel, localization_scene, mapping_scene, relative_poses,
                         synthesize_observations, tracking_scene)


def report(capsys, n, title, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance] C{n} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def test_c1_projection_jacobians(capsys):
    t0 = time.perf_counter()
    blocks = check_jacobians(n=200, seed=0, h=1e-6)
    dt = time.perf_counter() - t0
    worst = max(b.max_rel_err for b in blocks)
    ok = all(b.max_rel_err < 1e-5 for b in blocks) and dt < 10.0
    report(capsys, 1, "projection Jacobians vs finite differences", ok,
           f"5 blocks x 200 samples, worst rel err {worst:.2e} < 1e-5, {dt:.1f} s < 10 s")


def test_c2_loss_gradients(capsys):
    t0 = time.perf_counter()
    blocks = [check_mask_loss(n=100, seed=0), check_kps_loss(n=100, seed=0)]
    dt = time.perf_counter() - t0
    worst = max(b.max_rel_err for b in blocks)
    ok = worst < 1e-8 and dt < 5.0
    report(capsys, 2, "mask and keypoint loss gradients", ok,
           f"100 samples each, worst rel err {worst:.2e} < 1e-8, {dt:.1f} s < 5 s")


def test_c3_right_jacobian_second_order(capsys):
    rng = np.random.default_rng(3)
    ratios = []
    for _ in range(100):
        axis = rng.normal(size=3)
        theta = axis / np.linalg.norm(axis) * rng.uniform(0.0, 3.0)
        d = rng.normal(size=3)
        d *= 1e-3 / np.linalg.norm(d)

        def residual(delta):
            lhs = so3_log(so3_exp(theta).T @ so3_exp(theta + delta))
            return np.linalg.norm(lhs - so3_right_jacobian(theta) @ delta)

        ratios.append(residual(d) / residual(0.5 * d))
    lo, hi = min(ratios), max(ratios)
    report(capsys, 3, "right Jacobian residual halving ratio", 3.5 <= lo and hi <= 4.5,
           f"100 angles, ratio in [{lo:.3f}, {hi:.3f}] within [3.5, 4.5]")


def test_c4_kabsch_and_triangulation(capsys):
    scene = mapping_scene(n_views=8)
    obj = scene.objects[0]
    meas = [(scene.cameras[t], o.keypoints, o.kp_valid)
            for t in range(scene.n_frames) for o in synthesize_observations(scene, t)]
    pts, valid = triangulate_keypoints(meas, scene.intr)
    gt_pts = obj.pose.apply(obj.mesh.vertices[obj.kp_index])
    # keypoints on the underside are never visible from the elevated ring
    seen3 = np.sum([m[2] for m in meas], axis=0) >= 3
    tri_err = np.linalg.norm(pts - gt_pts, axis=1)[seen3].max()
    state = init_object(meas, obj.mesh, obj.kp_index, scene.intr)
    rot_err = rotation_angle_between(state.pose.R, obj.pose.R)
    trans_err = np.abs(state.pose.translation - obj.pose.translation).max()
    ok = (valid[seen3].all() and seen3.sum() >= 3 and tri_err < 1e-6
          and rot_err < 1e-6 and trans_err < 1e-6)
    report(capsys, 4, "Kabsch and triangulation on noiseless tracks", ok,
           f"{seen3.sum()}/{len(valid)} keypoints seen in >= 3 views, "
           f"triangulation {tri_err:.1e} m, rotation {rot_err:.1e} rad, "
           f"translation {trans_err:.1e} m, all < 1e-6")


def test_c5_raster_descent_tasks(capsys):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in TASK_NAMES:
        hist, _ = descend(make_task(name, size=128), steps=300)
        hit = np.nonzero(hist > 0.9)[0]
        ok &= bool(hist[0] < 0.5 and len(hit) > 0)
        parts.append(f"{name} {hist[0]:.2f}->{hist[-1]:.3f}"
                     + (f" @{hit[0]}" if len(hit) else " never"))
    dt = time.perf_counter() - t0
    ok &= dt < 60.0
    report(capsys, 5, "rasterizer backward descent, 5 tasks at 128x128", ok,
           f"{'; '.join(parts)}; {dt:.1f} s < 60 s")


def test_c6_mapping_experiment(capsys):
    t0 = time.perf_counter()
    views = (1, 2, 3, 5, 8)
    res = run_mapping(mapping_scene(n_views=8), mean_model_from_config(default_config("map")),
                      OptimConfig(**MAPPING_OPTIM), views)[0]
    dt = time.perf_counter() - t0
    iou = [res.reports[n]["voxel_iou"] for n in views]
    init = res.initial_report["voxel_iou"]
    many = [v for n, v in zip(views, iou) if n >= 3]
    monotone = all(b >= a - 0.03 for a, b in zip(iou, iou[1:]))
    ok = min(many) > 0.8 and min(many) >= init + 0.1 and monotone and dt < 600
    report(capsys, 6, "mapping voxel IoU vs views", ok,
           "IoU by views " + ", ".join(f"{n}:{v:.3f}" for n, v in zip(views, iou))
           + f"; initial {init:.3f}; >=3 views > 0.8 and >= initial + 0.1; "
           f"monotone within 0.03: {monotone}; {dt:.0f} s < 600 s")


def test_c7_localization_experiment(capsys):
    cfg = default_config("localize")
    noise = cfg["noise"]
    t0 = time.perf_counter()
    res = run_localization(localization_scene(n_frames=70, n_objects=6),
                           NoiseModel(odom_rot_sigma=np.deg2rad(noise["odom_rot_sigma_deg"]),
                                      odom_trans_sigma=noise["odom_trans_sigma"],
                                      odom_bias=tuple(noise["odom_bias"]), seed=0),
                           curve_iters=10)
    dt = time.perf_counter() - t0
    curve = res.ate_curve
    tail = curve[5:]
    flat = all(b <= a * 1.05 for a, b in zip(tail, tail[1:]))
    ratio = res.ate_estimate / res.ate_odometry
    ok = ratio <= 0.7 and flat and dt < 300
    report(capsys, 7, "localization ATE", ok,
           f"odometry {res.ate_odometry:.3f} m -> optimized {res.ate_estimate:.3f} m, "
           f"ratio {ratio:.2f} <= 0.7; curve " + " ".join(f"{a:.3f}" for a in curve)
           + f"; non-increasing after 5 within 5%: {flat}; {dt:.0f} s < 300 s")


def _cli_run(tmp_path, tag, argv):
    out = tmp_path / tag
    assert main(argv + ["--out", str(out)]) == 0
    (run,) = out.iterdir()
    return run


def test_c8_fixed_points_and_determinism(capsys, tmp_path):
    drifts = {}
    scene = mapping_scene(n_views=5)
    views = [(scene.cameras[t], synthesize_observations(scene, t)[0]) for t in range(5)]
    gt = scene.objects[0].as_state()
    gt.symmetry = find_symmetry(gt.mesh)
    new, _ = optimize_object_pose(gt, views, scene.intr, OptimConfig(pose_iters=100))
    drifts["object pose"] = max(np.abs(new.pose.translation - gt.pose.translation).max(),
                                rotation_angle_between(new.pose.R, gt.pose.R))
    # the curvature term alone shrinks any curved surface, so the data term is checked
    # with lambda_reg = 0; the drift at the default weight is reported alongside
    shape_drift = {}
    for lam in (0.0, OptimConfig().lambda_reg):
        new, _ = optimize_object_shape(gt, views, scene.intr,
                                       OptimConfig(shape_iters=100, lambda_reg=lam))
        shape_drift[lam] = np.linalg.norm(new.mesh.vertices - gt.mesh.vertices, axis=1).max()
    drifts["object shape"] = shape_drift[0.0]
    loc = localization_scene(n_frames=70)
    objects = {i: o.as_state() for i, o in enumerate(loc.objects)}
    odom = relative_poses(loc.cameras)
    cam = 0.0
    for t in (1, 20, 45, 69):
        pose, _ = optimize_camera_pose(loc.cameras[t - 1], odom[t - 1],
                                       synthesize_observations(loc, t), objects, loc.intr)
        cam = max(cam, np.abs(pose.translation - loc.cameras[t].translation).max(),
                  rotation_angle_between(pose.R, loc.cameras[t].R))
    drifts["camera"] = cam
    fixed = all(d < 1e-3 for d in drifts.values())

    # determinism: every metric CSV of the CLI is byte-identical across reruns
    cfg = dict(default_config("map"), views=[1, 3])
    map_cfg = tmp_path / "map.yaml"
    map_cfg.write_text(yaml.safe_dump(cfg))
    loc_cfg = tmp_path / "loc.yaml"
    loc_cfg.write_text(yaml.safe_dump(dict(default_config("localize"), curve_iters=2)))
    commands = {
        "map": (["map", "--config", str(map_cfg)], ["iou_vs_views.csv"]),
        "localize": (["localize", "--config", str(loc_cfg), "--frames", "15"],
                     ["ate.csv", "ate_curve.csv"]),
        "gradcheck": (["gradcheck"], ["gradcheck.csv"]),
    }
    same = []
    for name, (argv, files) in commands.items():
        a = _cli_run(tmp_path, name + "_a", argv)
        b = _cli_run(tmp_path, name + "_b", argv)
        same += [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    ok = fixed and all(same)
    report(capsys, 8, "zero-noise fixed points and rerun determinism", ok,
           "drift " + ", ".join(f"{k} {v:.1e}" for k, v in drifts.items())
           + f" (< 1e-3); shape drift with default lambda_reg "
           f"{shape_drift[OptimConfig().lambda_reg]:.1e} (regularizer bias, not checked); {sum(same)}/{len(same)} metric CSVs byte-identical")


def test_c9_tracking(capsys):
    scene = tracking_scene(n_frames=20, n_objects=4, seed=0)
    _, _, clean = run_tracking(scene)
    _, _, noisy = run_tracking(scene, NoiseModel(kp_sigma=1.0, mask_pixels=2, seed=0))
    ok = clean == 1.0 and noisy >= 0.95
    report(capsys, 9, "tracking association accuracy", ok,
           f"20 frames, 4 objects: noiseless {clean:.1%} (need 100%), "
           f"kp 1 px + mask 2 px noise {noisy:.1%} (need >= 95%)")
