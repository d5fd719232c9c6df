"""
Poses, SE(3) maps, quaternions and pinhole projection
"""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.core.exceptions import BehindCameraError, ShapeMismatchError
from app.geometry import quaternion
from app.geometry.camera import pixel_grid, project, project_points, unproject
from app.geometry.se3 import (
    hat, left_jacobian, left_jacobian_inverse, pose_distance, retract, se3_exp, se3_log, vee,
)
from app.models.camera import CameraIntrinsics
from app.models.pose import Pose


def random_tangent(rng, max_angle=np.pi - 0.1):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([axis * rng.uniform(0.0, max_angle), rng.normal(size=3)])


class TestPose:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, 1.1]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3), [0.0, np.nan, 0.0])

    def test_is_immutable(self):
        pose = Pose.identity()
        with pytest.raises(ValueError):
            pose.translation[0] = 1.0

    def test_compose_with_inverse_is_identity(self, rng):
        pose = se3_exp(random_tangent(rng))
        assert pose.compose(pose.inverse()).allclose(Pose.identity())
        assert (pose.inverse() @ pose).allclose(Pose.identity())

    def test_quaternion_roundtrip_and_sign(self, rng):
        pose = se3_exp(random_tangent(rng))
        q = pose.quaternion()
        assert q[3] >= 0
        assert np.isclose(np.linalg.norm(q), 1.0)
        assert Pose.from_quaternion(q, pose.translation).allclose(pose, atol=1e-12)

    def test_center_maps_to_camera_origin(self, rng):
        pose = se3_exp(random_tangent(rng))
        np.testing.assert_allclose(pose.apply(pose.center()), np.zeros(3), atol=1e-12)


class TestSE3:
    def test_hat_vee(self, rng):
        w = rng.normal(size=3)
        np.testing.assert_array_equal(vee(hat(w)), w)
        np.testing.assert_allclose(hat(w) @ w, 0.0, atol=1e-15)

    def test_exp_of_zero_is_identity(self):
        assert se3_exp(np.zeros(6)).allclose(Pose.identity())

    def test_log_exp_roundtrip(self, rng):
        errors = []
        for _ in range(1000):
            xi = random_tangent(rng)
            errors.append(np.max(np.abs(se3_log(se3_exp(xi)) - xi)))
        assert max(errors) < 1e-9

    def test_exp_log_roundtrip(self, rng):
        for _ in range(50):
            pose = se3_exp(random_tangent(rng))
            assert se3_exp(se3_log(pose)).allclose(pose)

    def test_small_angle_branch(self):
        xi = np.array([1e-7, -2e-7, 3e-8, 0.1, 0.2, -0.3])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)

    @pytest.mark.parametrize("angle", [1e-7, 1e-3, 0.5, 3.0])
    def test_jacobian_inverse(self, angle):
        w = angle * np.array([0.6, -0.8, 0.0])
        np.testing.assert_allclose(left_jacobian(w) @ left_jacobian_inverse(w), np.eye(3), atol=1e-9)

    def test_retract_is_left_perturbation(self, rng):
        pose = se3_exp(random_tangent(rng))
        xi = 0.1 * random_tangent(rng)
        assert retract(pose, xi).allclose(se3_exp(xi) @ pose)

    def test_exp_rejects_non_finite(self):
        with pytest.raises(ValueError):
            se3_exp([np.inf, 0, 0, 0, 0, 0])

    def test_pose_distance(self):
        a = Pose(Rotation.from_euler("z", 0.3).as_matrix(), [1.0, 0.0, 0.0])
        angle, distance = pose_distance(a, Pose.identity())
        assert angle == pytest.approx(0.3)
        assert distance == pytest.approx(1.0)


class TestQuaternion:
    def test_to_matrix_matches_scipy(self, rng):
        q = rng.normal(size=(5, 4))
        expected = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
        np.testing.assert_allclose(quaternion.to_matrix(q), expected, atol=1e-12)

    def test_matrix_gradient_matches_finite_differences(self, rng):
        q = rng.normal(size=(3, 4))
        g = rng.normal(size=(3, 3, 3))
        analytic = quaternion.matrix_grad_to_quat(q, g)
        numeric = np.zeros_like(q)
        eps = 1e-6
        for n in range(3):
            for k in range(4):
                plus, minus = q.copy(), q.copy()
                plus[n, k] += eps
                minus[n, k] -= eps
                numeric[n, k] = (np.sum(g * quaternion.to_matrix(plus))
                                 - np.sum(g * quaternion.to_matrix(minus))) / (2 * eps)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestCamera:
    def test_intrinsics_reject_principal_point_outside(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=10, fy=10, cx=20, cy=5, width=16, height=12)

    def test_intrinsics_line_roundtrip(self, small_intrinsics):
        assert CameraIntrinsics.from_line(small_intrinsics.to_line()) == small_intrinsics

    def test_unproject_hand_evaluated(self):
        K = CameraIntrinsics(fx=100.0, fy=100.0, cx=150.0, cy=100.0, width=300, height=200)
        depth = np.full(K.shape, 2.0)
        pm = unproject(depth, K)
        # pixel (cx + fx, cy)
        np.testing.assert_allclose(pm.points[100, 250], [2.0, 0.0, 2.0])

    def test_zero_depth_is_invalid(self, small_intrinsics):
        depth = np.full(small_intrinsics.shape, 3.0)
        depth[2, 4] = 0.0
        pm = unproject(depth, small_intrinsics)
        assert not pm.valid[2, 4]
        assert pm.confidence[2, 4] == 0.0
        assert pm.valid.sum() == depth.size - 1

    def test_project_unproject_roundtrip(self, rng, intrinsics):
        depth = rng.uniform(0.5, 10.0, size=intrinsics.shape)
        pm = unproject(depth, intrinsics)
        uv, in_front = project_points(pm.points.reshape(-1, 3), intrinsics)
        i, j = pixel_grid(intrinsics)
        assert in_front.all()
        np.testing.assert_allclose(uv[:, 0], i.ravel(), atol=1e-9)
        np.testing.assert_allclose(uv[:, 1], j.ravel(), atol=1e-9)

    def test_project_behind_camera(self, small_intrinsics):
        with pytest.raises(BehindCameraError):
            project([0.0, 0.0, -1.0], small_intrinsics)
        uv, in_front = project_points(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]), small_intrinsics)
        assert not in_front[0] and in_front[1]
        assert np.isnan(uv[0]).all()
        np.testing.assert_allclose(uv[1], [small_intrinsics.cx, small_intrinsics.cy])

    def test_unproject_shape_mismatch(self, small_intrinsics):
        with pytest.raises(ShapeMismatchError):
            unproject(np.ones((3, 3)), small_intrinsics)
