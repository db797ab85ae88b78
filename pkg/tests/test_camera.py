import numpy as np
import pytest

from meshmap.camera import (BLOCKS, BehindCameraError, CameraIntrinsics, keypoint_jacobians,
                            perspective, perspective_jacobian, project_keypoints,
                            project_points, projection_jacobians, transform_to_camera)
from meshmap.gradcheck import numeric_jacobian, random_projection_instance
from meshmap.liegroup import Pose, hat
from meshmap.mesh import TriMesh

INTR = CameraIntrinsics(f=1.0, s_u=500.0, s_v=500.0, c_u=320.0, c_v=240.0)


def test_intrinsics_matrix_and_validation():
    intr = CameraIntrinsics(f=0.01, s_u=5e4, s_v=4e4, c_u=1.0, c_v=2.0, s_n=100.0)
    assert np.allclose(intr.K, [[500, 1, 1], [0, 400, 2]])
    with pytest.raises(ValueError):
        CameraIntrinsics(f=1.0, s_u=-1.0, s_v=1.0, c_u=0, c_v=0)


def test_perspective_examples():
    assert np.array_equal(perspective([2, 4, 2]), [1, 2, 1])
    assert np.array_equal(perspective([0, 0, 5]), [0, 0, 1])
    with pytest.raises(BehindCameraError):
        perspective([1, 1, 0])
    with pytest.raises(BehindCameraError):
        perspective([1, 1, -3])


def test_perspective_jacobian_fd(rng):
    for _ in range(20):
        x = rng.normal(size=3) + [0, 0, 4]
        fd = np.column_stack([(perspective(x + e) - perspective(x - e)) / 2e-6
                              for e in 1e-6 * np.eye(3)])
        assert np.allclose(perspective_jacobian(x), fd, atol=1e-8)
        assert np.array_equal(perspective_jacobian(x)[2], np.zeros(3))


def test_transform_to_camera_examples(rng):
    pts = rng.normal(size=(6, 3))
    ident = Pose.identity()
    assert np.allclose(transform_to_camera(ident, ident, pts), pts)
    t = rng.normal(size=3)
    assert np.allclose(transform_to_camera(ident, Pose(np.zeros(3), t), pts), pts + t)


def test_transform_matches_pose_composition(rng):
    for _ in range(20):
        c = Pose(rng.normal(size=3), rng.normal(size=3))
        o = Pose(rng.normal(size=3), rng.normal(size=3))
        pts = rng.normal(size=(5, 3))
        assert np.allclose(transform_to_camera(c, o, pts), (c.inverse() @ o).apply(pts), atol=1e-12)


def _single_kp_mesh(v):
    return TriMesh(np.array([v, [9, 9, 9], [8, 9, 9]], dtype=float), [[0, 1, 2]])


def test_project_keypoints_examples():
    ident = Pose.identity()
    y, ok = project_keypoints(ident, ident, _single_kp_mesh([0, 0, 5]), [0], INTR)
    assert ok[0] and np.allclose(y[0], [320, 240])
    y, ok = project_keypoints(ident, ident, _single_kp_mesh([1, 0, 5]), [0], INTR)
    assert np.allclose(y[0], [420, 240])


def test_project_keypoints_flags_behind_camera():
    ident = Pose.identity()
    mesh = TriMesh(np.array([[0, 0, 5], [0, 0, -1], [1, 1, 2]], float), [[0, 1, 2]])
    y, ok = project_keypoints(ident, ident, mesh, [0, 1, 2], INTR)
    assert ok.tolist() == [True, False, True]
    assert np.all(np.isnan(y[1])) and np.all(np.isfinite(y[[0, 2]]))


def test_projection_matches_homogeneous_oracle(rng):
    for _ in range(50):
        cam, obj, v, intr = random_projection_instance(rng)
        # world -> camera as a 3x4 matrix, then homogeneous K
        Tcw = cam.inverse().matrix()[:3]
        Xw = np.append(obj.apply(v[None])[0], 1.0)
        h = intr.K3 @ (Tcw @ Xw)
        px, ok = project_points(intr, transform_to_camera(cam, obj, v[None]))
        assert ok[0]
        assert np.abs(px[0] - h[:2] / h[2]).max() < 1e-10 * max(1.0, np.abs(h[:2] / h[2]).max())


def test_projection_equivariant_to_shared_translation(rng):
    cam, obj, v, intr = random_projection_instance(rng)
    t = rng.normal(size=3) * 10
    a, _ = project_points(intr, transform_to_camera(cam, obj, v[None]))
    cam2 = Pose(cam.rotvec, cam.translation + t)
    obj2 = Pose(obj.rotvec, obj.translation + t)
    b, _ = project_points(intr, transform_to_camera(cam2, obj2, v[None]))
    assert np.allclose(a, b, atol=1e-9)


def test_jacobian_examples_identity_poses():
    ident = Pose.identity()
    v = np.array([0.0, 0.0, 5.0])
    J = keypoint_jacobians(ident, ident, v, INTR)
    P = INTR.K @ perspective_jacobian(v)
    assert np.allclose(J.d_p_o, P)
    assert np.allclose(J.d_p_c, -P)
    assert np.allclose(J.d_v, P)
    # on the optical axis only the x / y columns survive, depth has no effect
    assert np.allclose(J.d_p_o[:, 2], 0)


def test_jacobian_theta_o_at_zero_rotation(rng):
    cam = Pose(rng.normal(size=3) * 0.2, [0, 0, -5])
    obj = Pose(np.zeros(3), rng.normal(size=3) * 0.1)
    v = rng.normal(size=3) * 0.5
    J = keypoint_jacobians(cam, obj, v, INTR)
    gamma = transform_to_camera(cam, obj, v[None])[0]
    P = INTR.K @ perspective_jacobian(gamma)
    assert np.allclose(J.d_theta_o, P @ (-cam.R.T @ hat(v)))


def test_jacobians_match_finite_differences(rng):
    for _ in range(200):
        cam, obj, v, intr = random_projection_instance(rng)
        J = keypoint_jacobians(cam, obj, v, intr)
        for name in BLOCKS:
            fd = numeric_jacobian(cam, obj, v, intr, name, 1e-6)
            err = np.linalg.norm(getattr(J, "d_" + name) - fd) / np.linalg.norm(fd)
            assert err < 1e-6, name


def test_chain_consistency_theta_o(rng):
    from meshmap.liegroup import so3_right_jacobian
    cam, obj, v, intr = random_projection_instance(rng)
    gamma = transform_to_camera(cam, obj, v[None])[0]
    dgamma = -cam.R.T @ obj.R @ hat(v) @ so3_right_jacobian(obj.rotvec)
    parts = intr.K @ perspective_jacobian(gamma) @ dgamma
    assert np.allclose(keypoint_jacobians(cam, obj, v, intr).d_theta_o, parts)


def test_batch_jacobians_agree_with_single(rng):
    cam, obj, v, intr = random_projection_instance(rng)
    pts = v + rng.normal(0, 0.1, (4, 3))
    batch = projection_jacobians(cam, obj, pts, intr)
    for i in range(4):
        single = keypoint_jacobians(cam, obj, pts[i], intr)
        for name in BLOCKS:
            assert np.allclose(getattr(batch, "d_" + name)[i], getattr(single, "d_" + name))


def test_jacobians_behind_camera_raise():
    ident = Pose.identity()
    with pytest.raises(BehindCameraError):
        keypoint_jacobians(ident, ident, [0, 0, -1], INTR)
