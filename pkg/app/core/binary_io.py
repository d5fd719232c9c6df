"""
Binary grid formats: depth grids, pointmap files and the 16-byte header they share
"""
from pathlib import Path
from typing import Tuple

import numpy as np
import structlog

from app.core.exceptions import ArtifactIOError, IngestionError

logger = structlog.get_logger()

DEPTH_MAGIC = b"DPTH"
POINTMAP_MAGIC = b"PMAP"

# magic, width, height, reserved
_HEADER = np.dtype([("magic", "S4"), ("width", "<u4"), ("height", "<u4"), ("reserved", "<u4")])


def _pack_header(magic: bytes, width: int, height: int) -> bytes:
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = magic
    header["width"] = width
    header["height"] = height
    return header.tobytes()


def _read_header(raw: bytes, magic: bytes, path: Path) -> Tuple[int, int]:
    if len(raw) < _HEADER.itemsize:
        raise IngestionError("File too short for header", path)
    header = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    if header["magic"] != magic:
        raise IngestionError(f"Bad magic {header['magic']!r}, expected {magic!r}", path)
    return int(header["width"]), int(header["height"])


def write_depth(path, depth: np.ndarray) -> None:
    """Write an H x W float grid as a little-endian float32 file"""
    path = Path(path)
    height, width = depth.shape
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_pack_header(DEPTH_MAGIC, width, height))
            fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())
    except OSError as e:
        logger.error("Failed to write depth grid", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write depth grid", path) from e


def read_depth(path) -> np.ndarray:
    """Read a depth grid written by write_depth"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError("Cannot read depth grid", path) from e
    width, height = _read_header(raw, DEPTH_MAGIC, path)
    body = raw[_HEADER.itemsize:]
    if len(body) != 4 * width * height:
        raise IngestionError(f"Depth payload size mismatch for {width}x{height}", path)
    return np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float64)


def write_pointmap_file(path, points: np.ndarray, confidence: np.ndarray) -> None:
    """Write H x W x 3 points followed by H x W confidences, both float32"""
    path = Path(path)
    height, width = confidence.shape
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_pack_header(POINTMAP_MAGIC, width, height))
            fh.write(np.ascontiguousarray(points, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(confidence, dtype="<f4").tobytes())
    except OSError as e:
        logger.error("Failed to write pointmap", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write pointmap", path) from e


def read_pointmap_file(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read (points, confidence) from a pointmap file"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError("Cannot read pointmap", path) from e
    width, height = _read_header(raw, POINTMAP_MAGIC, path)
    body = raw[_HEADER.itemsize:]
    n = width * height
    if len(body) != 4 * 4 * n:
        raise IngestionError(f"Pointmap payload size mismatch for {width}x{height}", path)
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    points = values[: 3 * n].reshape(height, width, 3)
    confidence = values[3 * n:].reshape(height, width)
    if not np.all(np.isfinite(points)) or not np.all(np.isfinite(confidence)):
        raise IngestionError("Pointmap contains non-finite values", path)
    return points, confidence
