"""
Rigid camera pose
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x' = R x + t. Camera poses are stored world -> camera."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("Pose entries must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("Pose rotation must have determinant +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, orthonormalize: bool = False) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        rotation = matrix[:3, :3]
        if orthonormalize:
            u, _, vt = np.linalg.svd(rotation)
            rotation = u @ vt
            if np.linalg.det(rotation) < 0:
                rotation = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        return cls(rotation, matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "Pose":
        """Build from a scalar-last quaternion (TUM order)"""
        rotation = Rotation.from_quat(np.asarray(quat_xyzw, dtype=np.float64)).as_matrix()
        return cls.from_matrix(np.block([[rotation, np.reshape(translation, (3, 1))],
                                         [np.zeros((1, 3)), np.ones((1, 1))]]),
                               orthonormalize=True)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Scalar-last unit quaternion (qx, qy, qz, qw) with qw >= 0"""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def compose(self, other: "Pose") -> "Pose":
        """self * other, i.e. apply other first"""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points"""
        return points @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera center in world coordinates for a world -> camera pose"""
        return -self.rotation.T @ self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self):
        return f"Pose(q={np.round(self.quaternion(), 6)}, t={np.round(self.translation, 6)})"
