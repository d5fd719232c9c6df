"""
Keyframes and the local optimization window
"""
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional

import numpy as np

from app.models.pointmap import Pointmap
from app.models.pose import Pose

DEFAULT_WINDOW_CAPACITY = 8


@dataclass(eq=False)
class Keyframe:
    """A keyframe; ``aligned`` is None when scale alignment failed for it"""

    frame_id: int
    pose: Pose
    image: np.ndarray
    aligned: Optional[Pointmap]
    visible: FrozenSet[int] = frozenset()
    median_depth: float = 1.0
    scale: Optional[float] = None
    used_remedy: bool = False


@dataclass
class KeyframeWindow:
    """Ordered oldest -> newest"""

    capacity: int = DEFAULT_WINDOW_CAPACITY
    keyframes: List[Keyframe] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    def __getitem__(self, index) -> Keyframe:
        return self.keyframes[index]

    @property
    def latest(self) -> Optional[Keyframe]:
        return self.keyframes[-1] if self.keyframes else None

    def frame_ids(self) -> List[int]:
        return [kf.frame_id for kf in self.keyframes]
