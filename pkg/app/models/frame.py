"""
Input frames
"""
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from app.models.camera import CameraIntrinsics
from app.models.pose import Pose


@dataclass(frozen=True, eq=False)
class FrameObservation:
    """One input image; gt_pose is only populated by the simulator loader"""

    index: int
    image: np.ndarray
    intrinsics: CameraIntrinsics
    timestamp: float = 0.0
    gt_pose: Optional[Pose] = None

    def blinded(self) -> "FrameObservation":
        """Copy without ground truth, as handed to tracking and mapping"""
        return replace(self, gt_pose=None)
