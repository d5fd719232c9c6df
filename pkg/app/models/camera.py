"""
Pinhole camera intrinsics
"""
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics in pixels; pixel (i, j) = (column, row) with centers on integers"""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)

    @model_validator(mode="after")
    def validate_principal_point(self):
        if not 0 < self.cx < self.width:
            raise ValueError("cx must lie inside the image width")
        if not 0 < self.cy < self.height:
            raise ValueError("cy must lie inside the image height")
        return self

    @property
    def shape(self):
        """(height, width)"""
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix"""
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def to_line(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}"

    @classmethod
    def from_line(cls, line: str) -> "CameraIntrinsics":
        fx, fy, cx, cy, width, height = line.split()
        return cls(fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
                   width=int(width), height=int(height))
