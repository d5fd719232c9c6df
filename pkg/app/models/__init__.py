# Domain models package
from .camera import CameraIntrinsics
from .pose import Pose
from .pointmap import Pointmap
from .gaussian import GaussianMap, GaussianPrimitive
from .frame import FrameObservation
from .keyframe import Keyframe, KeyframeWindow

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "Pointmap",
    "GaussianMap",
    "GaussianPrimitive",
    "FrameObservation",
    "Keyframe",
    "KeyframeWindow",
]
