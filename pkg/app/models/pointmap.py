"""
Per-pixel camera-frame point grids
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(eq=False)
class Pointmap:
    """H x W grid of camera-frame points with confidence and a validity mask.

    Invalid pixels always carry confidence 0 and a zero point; valid pixels have z > 0.
    """

    points: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError("points must be an H x W x 3 grid")
        if self.confidence.shape != self.points.shape[:2] or valid.shape != self.points.shape[:2]:
            raise ValueError("points, confidence and valid must share dimensions")
        valid = (valid & np.all(np.isfinite(self.points), axis=2)
                 & (np.nan_to_num(self.points[..., 2]) > 0.0)
                 & np.isfinite(self.confidence) & (self.confidence > 0.0))
        self.points = np.where(valid[..., None], self.points, 0.0)
        self.confidence = np.where(valid, self.confidence, 0.0)
        self.valid = valid

    @classmethod
    def from_points(cls, points: np.ndarray, confidence: Optional[np.ndarray] = None) -> "Pointmap":
        """Valid wherever the point is finite with positive depth"""
        points = np.asarray(points, dtype=np.float64)
        if confidence is None:
            confidence = np.ones(points.shape[:2])
        return cls(points, confidence, np.ones(points.shape[:2], dtype=bool))

    @classmethod
    def empty(cls, height: int, width: int) -> "Pointmap":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width), dtype=bool))

    @property
    def shape(self):
        return self.confidence.shape

    @property
    def depth(self) -> np.ndarray:
        """z channel, 0 where invalid"""
        return self.points[..., 2]

    def norm(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=2)

    def scaled(self, factor: float) -> "Pointmap":
        return Pointmap(self.points * factor, self.confidence, self.valid)

    def with_valid(self, mask: np.ndarray) -> "Pointmap":
        return Pointmap(self.points, self.confidence, self.valid & mask)

    def copy(self) -> "Pointmap":
        return Pointmap(self.points.copy(), self.confidence.copy(), self.valid.copy())

    def median_depth(self) -> float:
        if not self.valid.any():
            return 0.0
        return float(np.median(self.depth[self.valid]))

    def valid_count(self) -> int:
        return int(self.valid.sum())
