"""
Point replacement, loss terms and windowed map optimization
"""
from types import SimpleNamespace

import numpy as np
import pytest

from app.geometry.se3 import retract
from app.models.gaussian import GaussianMap
from app.models.keyframe import Keyframe
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.rendering.splatting import SplatRenderer
from app.schemas.config import MapOptimConfig
from app.services.mapping_service import (
    MappingService, _Adam, geometric_loss, isotropic_loss, photometric_loss, replace_points,
)
from app.services.scene_service import GaussianSceneService


def depth_pointmap(depth, valid=None):
    h, w = depth.shape
    points = np.zeros((h, w, 3))
    points[..., 2] = depth
    valid = np.ones((h, w), dtype=bool) if valid is None else valid
    return Pointmap(points, np.ones((h, w)), valid)


@pytest.fixture
def service():
    return MappingService(SplatRenderer(), GaussianSceneService(), MapOptimConfig(iterations=5))


class TestReplacePoints:
    def test_swaps_disagreeing_points_and_fills_holes(self):
        xr_valid = np.ones((2, 3), dtype=bool)
        xr_valid[1, 2] = False
        xr = depth_pointmap(np.full((2, 3), 2.0), xr_valid)
        zp = np.array([[2.0, 2.2, 3.0], [1.9, 2.0, 4.0]])
        merged, fraction = replace_points(xr, depth_pointmap(zp), 0.15)

        # |2 - 3| > 0.15 * 3 swaps; 2.2 and 1.9 stay; the hole at (1, 2) is filled
        expected = np.array([[2.0, 2.0, 3.0], [2.0, 2.0, 4.0]])
        np.testing.assert_allclose(merged.depth, expected)
        assert merged.valid.all()
        assert fraction == pytest.approx(2 / 6)

    def test_infinite_threshold_only_fills_holes(self):
        valid = np.array([[True, False], [True, True]])
        xr = depth_pointmap(np.full((2, 2), 1.0), valid)
        merged, fraction = replace_points(xr, depth_pointmap(np.full((2, 2), 5.0)), np.inf)
        np.testing.assert_allclose(merged.depth, [[1.0, 5.0], [1.0, 1.0]])
        assert fraction == pytest.approx(0.25)

    def test_provider_invalid_keeps_rendered(self):
        xr = depth_pointmap(np.full((2, 2), 1.0))
        xp = depth_pointmap(np.full((2, 2), 9.0), np.zeros((2, 2), dtype=bool))
        merged, fraction = replace_points(xr, xp, 0.15)
        np.testing.assert_allclose(merged.depth, 1.0)
        assert fraction == 0.0

    def test_both_empty(self):
        merged, fraction = replace_points(Pointmap.empty(2, 2), Pointmap.empty(2, 2), 0.15)
        assert merged.valid_count() == 0
        assert fraction == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            replace_points(Pointmap.empty(2, 2), Pointmap.empty(3, 2), 0.15)


class TestLosses:
    def test_isotropic_zero_for_spheres(self):
        loss, grad = isotropic_loss(np.log(np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]])))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_isotropic_value(self):
        loss, _ = isotropic_loss(np.log(np.array([[1.0, 2.0, 3.0]])))
        assert loss == pytest.approx(2.0)

    def test_isotropic_sums_over_primitives(self):
        # |1-2| + |2-2| + |3-2| = 2 and |1-2| + |1-2| + |4-2| = 4
        loss, _ = isotropic_loss(np.log(np.array([[1.0, 2.0, 3.0], [1.0, 1.0, 4.0]])))
        assert loss == pytest.approx(6.0)

    def test_isotropic_gradient(self, rng):
        log_scales = rng.uniform(-2.0, 0.0, size=(5, 3))
        _, grad = isotropic_loss(log_scales)
        step = 1e-6
        numeric = np.zeros_like(log_scales)
        for idx in np.ndindex(*log_scales.shape):
            plus, minus = log_scales.copy(), log_scales.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric[idx] = (isotropic_loss(plus)[0] - isotropic_loss(minus)[0]) / (2 * step)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)

    def test_isotropic_empty(self):
        loss, grad = isotropic_loss(np.zeros((0, 3)))
        assert loss == 0.0
        assert grad.shape == (0, 3)

    def test_photometric(self):
        image = np.zeros((2, 2, 3))
        out = SimpleNamespace(color=np.full((2, 2, 3), 0.5))
        loss, grad = photometric_loss(out, image)
        assert loss == pytest.approx(0.5)
        np.testing.assert_allclose(grad, 1.0 / 12)

    def test_geometric_uses_pixels_valid_in_both(self):
        out = SimpleNamespace(depth=np.array([[1.0, 2.0], [3.0, 4.0]]),
                              alpha_sum=np.array([[1.0, 1.0], [0.1, 1.0]]))
        aligned = depth_pointmap(np.array([[1.5, 2.0], [0.0, 3.0]]),
                                 np.array([[True, True], [True, True]]))
        loss, grad = geometric_loss(out, aligned, 0.5)
        # (1, 0) fails the opacity test
        assert loss == pytest.approx((0.5 + 0.0 + 1.0) / 3)
        assert grad[1, 0] == 0.0
        assert grad[0, 0] == pytest.approx(-1 / 3)
        assert grad[1, 1] == pytest.approx(1 / 3)

    def test_geometric_without_overlap(self):
        out = SimpleNamespace(depth=np.ones((2, 2)), alpha_sum=np.ones((2, 2)))
        loss, grad = geometric_loss(out, Pointmap.empty(2, 2), 0.5)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)


class TestAdam:
    def test_first_step_is_signed_learning_rate(self):
        adam = _Adam({"a": (3,)}, {"a": np.full(1, 0.1)})
        steps, moments = adam.propose({"a": np.array([2.0, -0.5, 1e-3])}, 1.0)
        np.testing.assert_allclose(steps["a"], [-0.1, 0.1, -0.1], rtol=1e-6)
        assert adam.t == 0
        adam.commit(moments)
        assert adam.t == 1

    def test_step_scale(self):
        adam = _Adam({"a": (2,)}, {"a": np.full(1, 0.1)})
        steps, _ = adam.propose({"a": np.array([1.0, -1.0])}, 0.25)
        np.testing.assert_allclose(steps["a"], [-0.025, 0.025], rtol=1e-6)


def make_keyframe(renderer, gmap, pose, K, frame_id, with_geometry=True):
    out = renderer.render(gmap, pose, K)
    aligned = renderer.render_pointmap(gmap, pose, K, out) if with_geometry else None
    return Keyframe(frame_id=frame_id, pose=pose, image=out.color.copy(), aligned=aligned, median_depth=3.0)


class TestOptimizeWindow:
    def test_perfect_map_is_a_fixed_point(self, service, make_map, intrinsics):
        gmap = make_map(20, isotropic=True)
        moved = Pose(np.eye(3), [0.05, 0.0, 0.0])
        window = [make_keyframe(service.renderer, gmap, Pose.identity(), intrinsics, 0),
                  make_keyframe(service.renderer, gmap, moved, intrinsics, 1)]
        before = {name: value.copy() for name, value in gmap.params().items()}

        result = service.optimize_window(gmap, window, intrinsics, iterations=3)

        for name, value in before.items():
            np.testing.assert_allclose(getattr(gmap, name), value, atol=1e-12)
        assert result.poses[1].allclose(moved, atol=1e-12)
        assert result.final.total == pytest.approx(0.0, abs=1e-12)

    def test_loss_trace_never_increases(self, service, make_map, intrinsics, rng):
        target = make_map(20, isotropic=True)
        window = [make_keyframe(service.renderer, target, Pose.identity(), intrinsics, 0, with_geometry=False)]
        gmap = target.copy()
        gmap.set_params(colors=np.clip(gmap.colors + rng.normal(0.0, 0.2, size=gmap.colors.shape), 0.0, 1.0))

        result = service.optimize_window(gmap, window, intrinsics, iterations=20, use_geometry=False)

        assert np.all(np.diff(result.trace) <= 0.0)
        assert result.trace[-1] < result.trace[0]
        assert result.iterations == 20

    def test_oldest_pose_is_frozen(self, service, make_map, intrinsics, rng):
        target = make_map(20, isotropic=True)
        first = Pose.identity()
        second_true = Pose(np.eye(3), [0.05, 0.0, 0.0])
        window = [make_keyframe(service.renderer, target, first, intrinsics, 0),
                  make_keyframe(service.renderer, target, second_true, intrinsics, 1)]
        window[1].pose = retract(second_true, np.array([0.0, 0.01, 0.0, 0.01, 0.0, 0.0]))

        result = service.optimize_window(target, window, intrinsics, iterations=5)

        assert result.poses[0] is first
        assert window[0].pose is first
        assert window[1].pose is result.poses[1]

    def test_empty_window(self, service, make_map, intrinsics):
        with pytest.raises(ValueError):
            service.optimize_window(make_map(3), [], intrinsics)

    def test_empty_map(self, service, intrinsics):
        kf = Keyframe(frame_id=0, pose=Pose.identity(), image=np.zeros((24, 32, 3)), aligned=None)
        result = service.optimize_window(GaussianMap(), [kf], intrinsics)
        assert result.poses == [kf.pose]
        assert result.trace == []

    def test_initialize_holds_pose(self, service, make_map, intrinsics, rng):
        target = make_map(15, isotropic=True)
        kf = make_keyframe(service.renderer, target, Pose.identity(), intrinsics, 0)
        gmap = target.copy()
        gmap.set_params(means=gmap.means + rng.normal(0.0, 0.01, size=gmap.means.shape))

        result = service.initialize(gmap, kf, intrinsics, iterations=4)

        assert kf.pose.allclose(Pose.identity())
        assert result.iterations == 4
        assert result.final.geometric == 0.0


class TestInsertion:
    def test_counts_and_tags_new_gaussians(self, service, small_intrinsics, make_map):
        gmap = make_map(4)
        depth = np.full((small_intrinsics.height, small_intrinsics.width), 2.0)
        pm = depth_pointmap(depth)
        colors = np.full(depth.shape + (3,), 0.4)
        added = service.insert_keyframe_gaussians(gmap, pm, Pose.identity(), colors, small_intrinsics,
                                                  keyframe=3, seed=1)
        assert added == int(np.floor(depth.size / 16))
        assert len(gmap) == 4 + added
        np.testing.assert_array_equal(gmap.created_kf[4:], 3)
        np.testing.assert_allclose(gmap.colors[4:], 0.4)

    def test_nothing_to_insert(self, service, small_intrinsics):
        gmap = GaussianMap()
        pm = Pointmap.empty(small_intrinsics.height, small_intrinsics.width)
        added = service.insert_keyframe_gaussians(gmap, pm, Pose.identity(), np.zeros((12, 16, 3)),
                                                  small_intrinsics, keyframe=0)
        assert added == 0
