"""
SE(3) exponential and logarithm.

Tangent vectors are ordered (omega, v): three rotational then three translational
components. Pose updates use left perturbation, T' = exp(xi) * T.
"""
import numpy as np
from scipy.spatial.transform import Rotation

from app.models.pose import Pose

_SMALL_ANGLE = 1e-5


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector"""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def so3_log(rotation: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(rotation).as_rotvec()


def left_jacobian(w: np.ndarray) -> np.ndarray:
    """V(w) = I + (1 - cos t)/t^2 K + (t - sin t)/t^3 K^2"""
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < _SMALL_ANGLE:
        a = 0.5 - theta ** 2 / 24.0
        b = 1.0 / 6.0 - theta ** 2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta ** 2
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian_inverse(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < _SMALL_ANGLE:
        c = 1.0 / 12.0 + theta ** 2 / 720.0
    else:
        # cot(t/2) stays finite up to t = pi
        c = 1.0 / theta ** 2 - 1.0 / (2.0 * theta * np.tan(0.5 * theta))
    return np.eye(3) - 0.5 * k + c * (k @ k)


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("Tangent vector must be finite")
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), left_jacobian(w) @ v)


def se3_log(pose: Pose) -> np.ndarray:
    w = so3_log(pose.rotation)
    v = left_jacobian_inverse(w) @ pose.translation
    return np.concatenate([w, v])


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def retract(pose: Pose, xi: np.ndarray) -> Pose:
    """exp(xi) * pose"""
    return se3_exp(xi).compose(pose)


def pose_distance(a: Pose, b: Pose):
    """(rotation angle in radians, translation distance) between two poses"""
    delta = a.compose(b.inverse())
    return float(np.linalg.norm(so3_log(delta.rotation))), float(np.linalg.norm(delta.translation))
