"""
Pixel <-> point conversions for the pinhole model
"""
from typing import Tuple

import numpy as np

from app.core.exceptions import BehindCameraError, ShapeMismatchError
from app.models.camera import CameraIntrinsics
from app.models.pointmap import Pointmap


def pixel_grid(K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """(i, j) = (column, row) coordinate grids of shape (H, W)"""
    j, i = np.mgrid[0:K.height, 0:K.width]
    return i.astype(np.float64), j.astype(np.float64)


def unproject(depth: np.ndarray, K: CameraIntrinsics, confidence: np.ndarray = None) -> Pointmap:
    """Lift a depth map to a camera-frame pointmap; depth 0 marks invalid pixels"""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != K.shape:
        raise ShapeMismatchError(f"Depth shape {depth.shape} does not match intrinsics {K.shape}")
    i, j = pixel_grid(K)
    points = np.stack([
        (i * depth - K.cx * depth) / K.fx,
        (j * depth - K.cy * depth) / K.fy,
        depth,
    ], axis=-1)
    valid = np.isfinite(depth) & (depth > 0)
    if confidence is None:
        confidence = valid.astype(np.float64)
    return Pointmap(points, confidence, valid)


def project(point: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = np.asarray(point, dtype=np.float64).reshape(3)
    if z <= 0:
        raise BehindCameraError(f"Cannot project point with z={z}")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def project_points(points: np.ndarray, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (uv, in_front) and leaves uv = nan behind the camera"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    uv = np.stack([K.fx * points[:, 0] / safe_z + K.cx, K.fy * points[:, 1] / safe_z + K.cy], axis=1)
    uv[~in_front] = np.nan
    return uv, in_front
