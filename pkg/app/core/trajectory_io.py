"""
TUM trajectory files: one ``t tx ty tz qx qy qz qw`` line per frame, camera -> world
"""
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from app.core.exceptions import ArtifactIOError, IngestionError
from app.models.pose import Pose

logger = structlog.get_logger()

TUM_COLUMNS = ["t", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


def write_tum(path, timestamps: Sequence[float], poses: Sequence[Pose]) -> None:
    """Write world -> camera poses as a TUM (camera -> world) trajectory"""
    path = Path(path)
    rows = []
    for t, pose in zip(timestamps, poses):
        c2w = pose.inverse()
        rows.append([float(t), *c2w.translation, *c2w.quaternion()])
    lines = [" ".join(f"{v:.17g}" for v in row) for row in rows]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as e:
        logger.error("Failed to write trajectory", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write trajectory", path) from e


def read_tum(path) -> Tuple[np.ndarray, List[Pose]]:
    """Timestamps and world -> camera poses from a TUM trajectory"""
    path = Path(path)
    if not path.exists():
        raise IngestionError("Trajectory file not found", path)
    try:
        frame = pd.read_csv(path, sep=r"\s+", comment="#", header=None, names=TUM_COLUMNS,
                            dtype=np.float64)
    except (ValueError, pd.errors.ParserError) as e:
        raise IngestionError(f"Malformed trajectory ({e})", path) from e
    except pd.errors.EmptyDataError:
        return np.zeros(0), []
    if frame.isnull().values.any():
        raise IngestionError("Trajectory lines need 8 numbers", path)

    poses = []
    for row in frame.itertuples(index=False):
        quat = np.array([row.qx, row.qy, row.qz, row.qw])
        if not np.isfinite(quat).all() or np.linalg.norm(quat) == 0:
            raise IngestionError(f"Invalid quaternion at t={row.t}", path)
        c2w = Pose.from_quaternion(quat / np.linalg.norm(quat), [row.tx, row.ty, row.tz])
        poses.append(c2w.inverse())
    return frame["t"].to_numpy(), poses
