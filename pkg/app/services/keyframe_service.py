"""
Keyframe service: covisibility-based keyframe selection and local window maintenance
"""
from typing import AbstractSet, Optional

import numpy as np
import structlog

from app.models.camera import CameraIntrinsics
from app.models.gaussian import GaussianMap
from app.models.keyframe import Keyframe, KeyframeWindow
from app.models.pose import Pose
from app.rendering.splatting import SplatRenderer
from app.schemas.config import KeyframeConfig

logger = structlog.get_logger()


def _as_set(x) -> AbstractSet[int]:
    return x.visible if isinstance(x, Keyframe) else x


def iou_cov(a, b) -> float:
    """|A ∩ B| / |A ∪ B| of two visible sets (or keyframes); 0 when both are empty"""
    sa, sb = _as_set(a), _as_set(b)
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def oc_cov(a, b) -> float:
    """|A ∩ B| / min(|A|, |B|); 0 when either set is empty"""
    sa, sb = _as_set(a), _as_set(b)
    smaller = min(len(sa), len(sb))
    return len(sa & sb) / smaller if smaller else 0.0


class KeyframeService:
    """Keyframe decisions over the sliding window"""

    def __init__(self, renderer: SplatRenderer, config: Optional[KeyframeConfig] = None):
        self.renderer = renderer
        self.config = config or KeyframeConfig()

    def visible_set(self, gmap: GaussianMap, pose: Pose, K: CameraIntrinsics):
        """Ids of primitives whose blend weight exceeds the visibility floor somewhere"""
        if len(gmap) == 0:
            return frozenset()
        return self.renderer.visible_ids(self.renderer.render(gmap, pose, K))

    def should_add_keyframe(self, visible: AbstractSet[int], pose: Pose, median_depth: float,
                            latest: Keyframe) -> bool:
        """True iff IOU < k_iou or the relative translation exceeds k_dist times the median depth"""
        cfg = self.config
        iou = iou_cov(visible, latest.visible)
        distance = float(np.linalg.norm(pose.compose(latest.pose.inverse()).translation))
        decision = iou < cfg.k_iou or distance > cfg.k_dist * median_depth
        logger.debug("Keyframe test", iou=iou, distance=distance, median_depth=median_depth, add=decision)
        return decision

    def update_window(self, window: KeyframeWindow, keyframe: Keyframe) -> KeyframeWindow:
        """Insert ``keyframe``, drop low-overlap keyframes, then evict the lowest overlap over capacity"""
        cfg = self.config
        survivors = []
        for kf in window.keyframes:
            overlap = oc_cov(keyframe, kf)
            if overlap < cfg.k_overlap:
                logger.debug("Keyframe left window", frame=kf.frame_id, overlap=overlap)
                continue
            survivors.append(kf)

        capacity = window.capacity
        while len(survivors) + 1 > capacity and survivors:
            overlaps = [oc_cov(keyframe, kf) for kf in survivors]
            # argmin returns the first minimum, which is the oldest keyframe
            evicted = survivors.pop(int(np.argmin(overlaps)))
            logger.debug("Keyframe evicted", frame=evicted.frame_id)

        window.keyframes = survivors + [keyframe]
        return window
