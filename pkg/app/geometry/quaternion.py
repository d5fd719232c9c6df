"""
Batched scalar-first quaternion helpers used by the Gaussian map and the renderer
"""
import numpy as np


def normalize(quats: np.ndarray) -> np.ndarray:
    return quats / np.linalg.norm(quats, axis=-1, keepdims=True)


def to_matrix(quats: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z), normalized internally, to (N, 3, 3) rotations"""
    q = normalize(np.asarray(quats, dtype=np.float64).reshape(-1, 4))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def matrix_grad_to_quat(quats: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull dL/dR (N, 3, 3) back to dL/dq for the unnormalized quaternions"""
    q_raw = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = grad_r

    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    g_unit = np.stack([gw, gx, gy, gz], axis=1)
    # project out the radial component of the normalization
    radial = np.sum(g_unit * q, axis=1, keepdims=True)
    return (g_unit - radial * q) / norm


def to_covariance(quats: np.ndarray, scales: np.ndarray):
    """Rotations R and covariances R S S^T R^T for rows of quaternions and scales"""
    rot = to_matrix(quats)
    m = rot * np.asarray(scales, dtype=np.float64).reshape(-1, 3)[:, None, :]
    return rot, m @ np.transpose(m, (0, 2, 1))
