import numpy as np
import pytest

from meshmap.camera import CameraIntrinsics
from meshmap.liegroup import Pose, so3_exp
from meshmap.losses import LossWeights, total_objective
from meshmap.mesh import make_icosphere
from meshmap.raster import pixel_covered
from meshmap.sim import (MeanModel, NoiseModel, Scene, SceneObject, arc_trajectory, ate,
                         integrate_odometry, localization_scene, look_at, mapping_report,
                         mapping_scene, noisy_odometry, orbit_views, synthesize_observations,
                         tracking_scene)


def test_scene_timestamp_validation():
    intr = CameraIntrinsics.from_pixels(100, 100, 32, 32)
    cams = [Pose(), Pose()]
    with pytest.raises(ValueError):
        Scene([], cams, [0.0, 0.0], intr, 64, 64)
    with pytest.raises(ValueError):
        Scene([], cams, [0.0], intr, 64, 64)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(kp_sigma=-1.0)


def test_look_at_convention():
    cam = look_at([0, 0, 0], [5, 0, 0])
    # optical axis (+z camera) points at the target, image y points down
    assert np.allclose(cam.R[:, 2], [1, 0, 0])
    assert np.allclose(cam.R[:, 1], [0, 0, -1])
    views = orbit_views(4, 3.0)
    for c in views:
        assert np.allclose(c.R[:, 2], -c.translation / np.linalg.norm(c.translation))


def test_object_behind_camera_absent():
    scene = mapping_scene(n_views=1)
    cam = scene.cameras[0]
    # turn the camera around
    scene.cameras[0] = Pose.from_matrix(cam.R @ so3_exp([0, np.pi, 0]), cam.translation)
    assert synthesize_observations(scene, 0) == []


def test_zero_noise_objective_at_ground_truth():
    scene = tracking_scene(n_frames=3)
    obs = {t: synthesize_observations(scene, t) for t in range(3)}
    states = [o.as_state() for o in scene.objects]
    w = LossWeights(1.0, 1e-4)
    res = total_objective(obs, scene.cameras, states, scene.intr, w)
    n = sum(len(v) for v in obs.values())
    assert res.value == pytest.approx(-w.w_mask * n, abs=1e-12)


def test_visible_keypoints_lie_on_own_mask():
    scene = localization_scene(n_frames=70)
    for t in range(0, 70, 7):
        for o in synthesize_observations(scene, t):
            assert pixel_covered(o.keypoints[o.kp_valid], o.mask).all()
            assert 0 < o.confidence <= 1
            x, y, w, h = o.bbox
            assert o.mask[y:y + h, x:x + w].sum() == o.mask.sum()


def test_keypoint_noise_statistics():
    scene = localization_scene(n_frames=70)
    clean = [synthesize_observations(scene, t) for t in range(70)]
    noisy = [synthesize_observations(scene, t, NoiseModel(kp_sigma=1.0, seed=11))
             for t in range(70)]
    d = np.concatenate([(b.keypoints - a.keypoints)[a.kp_valid].ravel()
                        for fa, fb in zip(clean, noisy) for a, b in zip(fa, fb)])
    assert len(d) >= 1000
    assert abs(d.std() - 1.0) < 0.1


def test_mask_noise_changes_boundary_only():
    scene = mapping_scene(n_views=3)
    for t in range(3):
        a = synthesize_observations(scene, t)[0].mask
        b = synthesize_observations(scene, t, NoiseModel(mask_pixels=2, seed=t))[0].mask
        assert abs(a.sum() - b.sum()) < 0.5 * a.sum()


def test_observations_deterministic():
    scene = tracking_scene(n_frames=2)
    noise = NoiseModel(kp_sigma=1.0, mask_pixels=2, seed=4)
    a = synthesize_observations(scene, 1, noise)
    b = synthesize_observations(scene, 1, noise)
    for x, y in zip(a, b):
        assert np.array_equal(x.mask, y.mask)
        assert np.array_equal(x.keypoints, y.keypoints, equal_nan=True)


def test_zero_noise_odometry_reproduces_trajectory():
    traj = arc_trajectory(30)
    odo = integrate_odometry(traj[0], noisy_odometry(traj))
    assert max(np.abs(a.matrix() - b.matrix()).max() for a, b in zip(odo, traj)) < 1e-12


def test_bias_drift_on_straight_line():
    n, b = 40, 0.05
    traj = arc_trajectory(n + 1, yaw_rate_deg=0.0)
    odo = integrate_odometry(traj[0], noisy_odometry(traj, NoiseModel(odom_bias=(b, 0, 0))))
    assert np.linalg.norm(odo[-1].translation - traj[-1].translation) == pytest.approx(n * b)


def test_odometry_deterministic_and_needs_two_frames():
    traj = arc_trajectory(10)
    noise = NoiseModel.default_odometry(seed=3)
    a = noisy_odometry(traj, noise)
    b = noisy_odometry(traj, noise)
    assert all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a, b))
    c = noisy_odometry(traj, NoiseModel.default_odometry(seed=4))
    assert not np.array_equal(a[0].matrix(), c[0].matrix())
    with pytest.raises(ValueError):
        noisy_odometry(traj[:1])


def test_ate_examples(rng):
    traj = arc_trajectory(20)
    assert ate(traj, traj) == 0.0
    d = np.array([0.3, -0.4, 0.0])
    shifted = [Pose(p.rotvec, p.translation + d) for p in traj]
    assert ate(shifted, traj) == pytest.approx(0.5)
    assert ate(shifted, traj, align=True) < 1e-9
    with pytest.raises(ValueError):
        ate(traj[:-1], traj)


def test_ate_alignment_removes_rigid_motion(rng):
    pts = rng.normal(size=(30, 3))   # non-planar so the alignment is unique
    T = Pose(rng.normal(size=3), rng.normal(size=3))
    assert ate(T.apply(pts), pts, align=True) < 1e-9


def test_mapping_report_identity():
    scene = mapping_scene(n_views=4)
    gt = scene.objects[0]
    rep = mapping_report(gt, gt.as_state(), scene.cameras, scene.intr, scene.width, scene.height)
    assert rep["mask_iou"] == [1.0] * 4
    assert rep["mean_mask_iou"] == 1.0 and rep["voxel_iou"] == 1.0


def test_mapping_report_sphere_vs_ellipsoid_monte_carlo():
    scene = mapping_scene(n_views=2)
    gt = scene.objects[0]
    mean = MeanModel.sphere(0.62, 3)
    est = SceneObject(0, Pose(), mean.mesh, mean.kp_index)
    rep = mapping_report(gt, est, scene.cameras, scene.intr, scene.width, scene.height)
    # analytic shapes: sphere r=0.62 vs ellipsoid (1, .6, .4) yawed 20 degrees
    rng = np.random.default_rng(0)
    p = rng.uniform(-1.0, 1.0, (2_000_000, 3))
    in_s = np.sum(p ** 2, axis=1) <= 0.62 ** 2
    q = p @ gt.pose.R   # world -> ellipsoid frame (rows of R^T p)
    in_e = np.sum((q / [1.0, 0.6, 0.4]) ** 2, axis=1) <= 1.0
    mc = np.count_nonzero(in_s & in_e) / np.count_nonzero(in_s | in_e)
    assert abs(rep["voxel_iou"] - mc) < 0.03


def test_mapping_report_open_mesh_skips_voxels():
    from meshmap.mesh import TriMesh
    scene = mapping_scene(n_views=1)
    gt = scene.objects[0]
    m = gt.mesh
    opened = SceneObject(0, gt.pose, TriMesh(m.vertices, m.faces[1:]), gt.kp_index)
    rep = mapping_report(gt, opened, scene.cameras, scene.intr, scene.width, scene.height)
    assert rep["voxel_iou"] is None and rep["mean_mask_iou"] > 0.9


def test_scene_builders_keep_objects_visible():
    for scene in (mapping_scene(), localization_scene(), tracking_scene()):
        for t in range(scene.n_frames):
            assert len(synthesize_observations(scene, t)) >= 1
    scene = localization_scene()
    assert scene.n_frames == 70 and len(scene.objects) == 6
    tr = tracking_scene()
    assert tr.n_frames == 20 and len(tr.objects) == 4


def test_mean_model_sphere_topology():
    mm = MeanModel.sphere(0.62, 3)
    assert mm.mesh.n_vertices == 642 and len(mm.mesh.faces) == 1280
    assert len(mm.kp_index) == 12
    mm.symmetry.validate(mm.mesh)
    assert np.allclose(np.linalg.norm(mm.mesh.vertices, axis=1), 0.62)
    assert make_icosphere(3).n_vertices == mm.mesh.n_vertices
