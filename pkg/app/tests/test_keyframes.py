"""
Covisibility measures, keyframe selection and window maintenance
"""
import numpy as np
import pytest

from app.models.gaussian import GaussianMap
from app.models.keyframe import Keyframe, KeyframeWindow
from app.models.pose import Pose
from app.rendering.splatting import SplatRenderer
from app.schemas.config import KeyframeConfig
from app.services.keyframe_service import KeyframeService, iou_cov, oc_cov


def keyframe(frame_id, visible, translation=(0.0, 0.0, 0.0)):
    return Keyframe(frame_id=frame_id, pose=Pose(np.eye(3), translation), image=np.zeros((2, 2, 3)),
                    aligned=None, visible=frozenset(visible))


@pytest.fixture
def service():
    return KeyframeService(SplatRenderer())


class TestCovisibility:
    def test_iou(self):
        assert iou_cov({1, 2, 3}, {2, 3, 4}) == pytest.approx(0.5)
        assert iou_cov(set(), set()) == 0.0

    def test_overlap_coefficient(self):
        assert oc_cov({1, 2}, {1, 2, 3, 4}) == 1.0
        assert oc_cov({1, 2, 3}, set()) == 0.0

    def test_accepts_keyframes(self):
        assert oc_cov(keyframe(0, {1, 2}), keyframe(1, {2, 3})) == 0.5
        assert iou_cov(keyframe(0, {1, 2}), {2, 3}) == pytest.approx(1 / 3)


class TestShouldAdd:
    def test_same_view_is_not_a_keyframe(self, service):
        latest = keyframe(0, range(10))
        assert not service.should_add_keyframe(frozenset(range(10)), Pose.identity(), 1.0, latest)

    def test_low_iou_adds(self, service):
        latest = keyframe(0, range(10))
        assert service.should_add_keyframe(frozenset(range(2, 10)), Pose.identity(), 1.0, latest)

    def test_iou_threshold_is_strict(self, service):
        latest = keyframe(0, range(10))
        # 9 / 10 equals k_iou exactly
        assert not service.should_add_keyframe(frozenset(range(9)), Pose.identity(), 1.0, latest)

    def test_translation_threshold_is_strict(self, service):
        latest = keyframe(0, range(10))
        at_limit = Pose(np.eye(3), [0.0, 0.0, 0.08])
        beyond = Pose(np.eye(3), [0.0, 0.0, 0.0801])
        assert not service.should_add_keyframe(frozenset(range(10)), at_limit, 1.0, latest)
        assert service.should_add_keyframe(frozenset(range(10)), beyond, 1.0, latest)

    def test_translation_scales_with_median_depth(self, service):
        latest = keyframe(0, range(10))
        pose = Pose(np.eye(3), [0.0, 0.0, 0.1])
        assert service.should_add_keyframe(frozenset(range(10)), pose, 1.0, latest)
        assert not service.should_add_keyframe(frozenset(range(10)), pose, 2.0, latest)


class TestWindow:
    def test_drops_low_overlap(self, service):
        window = KeyframeWindow(capacity=8, keyframes=[keyframe(0, {1, 2, 3}), keyframe(1, {10, 11, 12})])
        service.update_window(window, keyframe(2, {1, 2, 3, 4}))
        assert window.frame_ids() == [0, 2]

    def test_evicts_lowest_overlap_over_capacity(self, service):
        window = KeyframeWindow(capacity=3, keyframes=[
            keyframe(0, {1, 2, 3, 4}), keyframe(1, {1, 2, 3, 9}), keyframe(2, {1, 2, 7, 8}),
        ])
        service.update_window(window, keyframe(3, {1, 2, 3, 4}))
        assert window.frame_ids() == [0, 1, 3]

    def test_ties_evict_oldest(self, service):
        window = KeyframeWindow(capacity=2, keyframes=[keyframe(0, {1, 2}), keyframe(1, {1, 2})])
        service.update_window(window, keyframe(2, {1, 2}))
        assert window.frame_ids() == [1, 2]

    def test_capacity_never_exceeded(self, service, rng):
        config = KeyframeConfig(window_size=4, k_overlap=0.0)
        service = KeyframeService(SplatRenderer(), config)
        window = KeyframeWindow(capacity=config.window_size)
        for k in range(12):
            service.update_window(window, keyframe(k, set(rng.integers(0, 30, size=15).tolist())))
            assert len(window) <= 4
            assert window.latest.frame_id == k
        assert window.frame_ids() == sorted(window.frame_ids())


class TestVisibleSet:
    def test_empty_map(self, service, intrinsics):
        assert service.visible_set(GaussianMap(), Pose.identity(), intrinsics) == frozenset()

    def test_matches_renderer(self, service, make_map, intrinsics):
        gmap = make_map(10)
        out = service.renderer.render(gmap, Pose.identity(), intrinsics)
        assert service.visible_set(gmap, Pose.identity(), intrinsics) == service.renderer.visible_ids(out)
