"""
Tracking service: pointmap-anchored PnP/RANSAC followed by photometric pose refinement
"""
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import structlog

from app.core.exceptions import DegenerateGeometryError
from app.geometry.camera import project_points, unproject
from app.geometry.se3 import retract
from app.models.camera import CameraIntrinsics
from app.models.gaussian import GaussianMap
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.rendering.splatting import RenderOutput, SplatRenderer
from app.schemas.config import TrackingConfig

logger = structlog.get_logger()

MIN_CORRESPONDENCES = 4
_LM_CRITERIA = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_COUNT, 100, 1e-14)


@dataclass(frozen=True)
class Correspondence2D3D:
    """Pixel (u, v) of the current frame and a point in the keyframe's camera frame"""

    pixel: Tuple[float, float]
    point: Tuple[float, float, float]


@dataclass
class CorrespondenceSet:
    """Array-backed list of 2D-3D correspondences"""

    pixels: np.ndarray
    points: np.ndarray

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    def __iter__(self) -> Iterator[Correspondence2D3D]:
        for uv, xyz in zip(self.pixels, self.points):
            yield Correspondence2D3D(tuple(uv), tuple(xyz))

    def __getitem__(self, index: int) -> Correspondence2D3D:
        return Correspondence2D3D(tuple(self.pixels[index]), tuple(self.points[index]))


@dataclass
class TrackingResult:
    """Estimated world -> camera pose of the current frame"""

    pose: Pose
    inlier_count: int = 0
    refinement_iterations: int = 0
    loss_trace: List[float] = field(default_factory=list)
    fallback: bool = False

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else float("nan")


def constant_velocity(history: Sequence[Pose]) -> Pose:
    """Predict the next pose from the last two; repeat the last one when only one exists"""
    if not history:
        return Pose.identity()
    if len(history) == 1:
        return history[-1]
    last, before = history[-1], history[-2]
    delta = last.compose(before.inverse())
    return delta.compose(last)


class TrackingService:
    """Pose estimation for one frame against the current map"""

    def __init__(self, renderer: SplatRenderer, config: Optional[TrackingConfig] = None):
        self.renderer = renderer
        self.config = config or TrackingConfig()

    def build_correspondences(self, xr_ak: Pointmap, matches: np.ndarray) -> CorrespondenceSet:
        """Attach rendered keyframe points to current-frame pixels; drop invalid rendered pixels"""
        matches = np.asarray(matches, dtype=np.int64).reshape(-1, 4)
        keep = xr_ak.valid[matches[:, 1], matches[:, 0]]
        kept = matches[keep]
        points = xr_ak.points[kept[:, 1], kept[:, 0]]
        pixels = kept[:, 2:4].astype(np.float64)
        return CorrespondenceSet(pixels=pixels, points=points)

    def solve_pnp_ransac(self, corrs: CorrespondenceSet, K: CameraIntrinsics,
                         seed: int = 0) -> Tuple[Pose, np.ndarray]:
        """Relative pose mapping keyframe-frame points onto current pixels, with its inlier mask"""
        cfg = self.config
        n = len(corrs)
        if n < MIN_CORRESPONDENCES:
            raise DegenerateGeometryError(f"PnP needs at least 4 correspondences, got {n}")

        obj = np.ascontiguousarray(corrs.points, dtype=np.float64)
        img = np.ascontiguousarray(corrs.pixels, dtype=np.float64)
        kmat = K.matrix()
        rng = np.random.default_rng(seed)

        best_mask = np.zeros(n, dtype=bool)
        best_count = 0
        needed = cfg.ransac_max_iterations
        iteration = 0
        while iteration < min(needed, cfg.ransac_max_iterations):
            iteration += 1
            sample = rng.choice(n, size=MIN_CORRESPONDENCES, replace=False)
            model = self._epnp(obj[sample], img[sample], kmat)
            if model is None:
                continue
            mask = self._inliers(obj, img, *model, K)
            count = int(mask.sum())
            if count > best_count:
                best_count, best_mask = count, mask
                ratio = count / n
                if ratio >= 1.0:
                    needed = iteration
                elif ratio > 0.0:
                    needed = int(np.ceil(np.log(1.0 - cfg.ransac_confidence)
                                         / np.log(1.0 - ratio ** MIN_CORRESPONDENCES)))

        if best_count < MIN_CORRESPONDENCES:
            raise DegenerateGeometryError(f"No PnP model with 4 inliers ({best_count} best)")

        model = self._epnp(obj[best_mask], img[best_mask], kmat)
        if model is None:
            raise DegenerateGeometryError("EPnP refit on inliers failed")
        rvec, tvec = cv2.solvePnPRefineLM(obj[best_mask], img[best_mask], kmat, None,
                                          model[0], model[1], criteria=_LM_CRITERIA)
        mask = self._inliers(obj, img, rvec, tvec, K)
        if mask.sum() < MIN_CORRESPONDENCES:
            raise DegenerateGeometryError("Refined PnP pose lost its inliers")

        rotation, _ = cv2.Rodrigues(rvec)
        matrix = np.eye(4)
        matrix[:3, :3] = rotation
        matrix[:3, 3] = tvec.reshape(3)
        logger.debug("PnP solved", inliers=int(mask.sum()), correspondences=n, iterations=iteration)
        return Pose.from_matrix(matrix, orthonormalize=True), mask

    @staticmethod
    def _epnp(obj: np.ndarray, img: np.ndarray, kmat: np.ndarray):
        try:
            ok, rvec, tvec = cv2.solvePnP(obj, img, kmat, None, flags=cv2.SOLVEPNP_EPNP)
        except cv2.error:
            return None
        if not ok or not (np.all(np.isfinite(rvec)) and np.all(np.isfinite(tvec))):
            return None
        return rvec, tvec

    def _inliers(self, obj, img, rvec, tvec, K: CameraIntrinsics) -> np.ndarray:
        rotation, _ = cv2.Rodrigues(rvec)
        uv, front = project_points(obj @ rotation.T + tvec.reshape(1, 3), K)
        err = np.hypot(uv[:, 0] - img[:, 0], uv[:, 1] - img[:, 1])
        return front & (np.nan_to_num(err, nan=np.inf) < self.config.ransac_px_threshold)

    def edge_weights(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel weight: edge pixels 1, others edge_weight_floor"""
        cfg = self.config
        gray = cv2.cvtColor(np.asarray(image, dtype=np.float32), cv2.COLOR_RGB2GRAY)
        gx = cv2.Sobel(gray, cv2.CV_32F, 1, 0, ksize=3)
        gy = cv2.Sobel(gray, cv2.CV_32F, 0, 1, ksize=3)
        magnitude = np.hypot(gx, gy).astype(np.float64)
        edge = magnitude > np.percentile(magnitude, cfg.edge_percentile)
        return cfg.edge_weight_floor + (1.0 - cfg.edge_weight_floor) * edge

    @staticmethod
    def photometric(out: RenderOutput, image: np.ndarray, weights: np.ndarray):
        """Weighted L1 loss and its gradient w.r.t. the rendered color"""
        diff = out.color - image
        n = weights.size
        loss = float(np.sum(weights[..., None] * np.abs(diff)) / n)
        grad = weights[..., None] * np.sign(diff) / n
        return loss, grad

    @staticmethod
    def squared(out: RenderOutput, image: np.ndarray, weights: np.ndarray):
        """Gradient w.r.t. the rendered color of sum(w * r^2) / 2n"""
        return weights[..., None] * (out.color - image) / weights.size

    @staticmethod
    def pose_hessian(out: RenderOutput, weights: np.ndarray) -> np.ndarray:
        """Gauss-Newton approximation J^T W J of the squared residual, from image gradients and depth"""
        K = out.intrinsics
        alpha = np.where(out.alpha_sum > 0, out.alpha_sum, 1.0)
        pts = unproject(np.where(weights > 0, out.depth / alpha, 0.0), K)
        x, y = pts.points[..., 0], pts.points[..., 1]
        z = np.where(pts.valid, pts.points[..., 2], 1.0)
        zero = np.zeros_like(z)
        ju = np.stack([-K.fx * x * y / z ** 2, K.fx * (1.0 + x ** 2 / z ** 2), -K.fx * y / z,
                       K.fx / z, zero, -K.fx * x / z ** 2], axis=-1)
        jv = np.stack([-K.fy * (1.0 + y ** 2 / z ** 2), K.fy * x * y / z ** 2, K.fy * x / z,
                       zero, K.fy / z, -K.fy * y / z ** 2], axis=-1)
        gu = np.gradient(out.color, axis=1)
        gv = np.gradient(out.color, axis=0)
        jac = gu[..., None] * ju[:, :, None, :] + gv[..., None] * jv[:, :, None, :]
        w = np.where(pts.valid, weights, 0.0)
        return np.einsum("hwck,hwcl,hw->kl", jac, jac, w) / weights.size

    def refine_pose(self, gmap: GaussianMap, init: Pose, image: np.ndarray,
                    K: CameraIntrinsics, iterations: Optional[int] = None) -> TrackingResult:
        """Damped Gauss-Newton steps on the pose; a step is kept only if the weighted L1 loss does not grow"""
        cfg = self.config
        iterations = cfg.refine_iterations if iterations is None else iterations

        out = self.renderer.render(gmap, init, K)
        valid = out.valid_mask(self.renderer.settings.alpha_valid_threshold)
        if not valid.any():
            logger.warning("Pose refinement skipped, nothing rendered")
            return TrackingResult(pose=init, refinement_iterations=0)
        weights = self.edge_weights(image) * valid

        pose = init
        loss, _ = self.photometric(out, image, weights)
        trace = [loss]
        damping = cfg.lm_damping
        gradient = self.renderer.backward_pose(out, self.squared(out, image, weights))
        hessian = self.pose_hessian(out, weights)
        used = 0
        for _ in range(iterations):
            if not np.any(gradient):
                break
            system = hessian + damping * np.diag(np.diag(hessian)) + 1e-12 * np.eye(6)
            try:
                xi = -np.linalg.solve(system, gradient)
            except np.linalg.LinAlgError:
                xi = -np.linalg.lstsq(system, gradient, rcond=None)[0]
            candidate = retract(pose, xi)
            cand_out = self.renderer.render(gmap, candidate, K)
            cand_loss, _ = self.photometric(cand_out, image, weights)
            used += 1
            if cand_loss <= loss:
                pose, loss = candidate, cand_loss
                trace.append(loss)
                gradient = self.renderer.backward_pose(cand_out, self.squared(cand_out, image, weights))
                hessian = self.pose_hessian(cand_out, weights)
                damping /= cfg.damping_factor
            else:
                damping *= cfg.damping_factor

        return TrackingResult(pose=pose, refinement_iterations=used, loss_trace=trace)

    def track(
        self,
        gmap: GaussianMap,
        keyframe_pose: Pose,
        anchor_points: Pointmap,
        matches: np.ndarray,
        image: np.ndarray,
        K: CameraIntrinsics,
        history: Sequence[Pose],
        seed: int = 0,
        use_pape: bool = True,
    ) -> TrackingResult:
        """PnP initialization (or the motion model) followed by refinement"""
        init: Optional[Pose] = None
        inliers = 0
        fallback = False
        if use_pape:
            corrs = self.build_correspondences(anchor_points, matches)
            try:
                t_rel, mask = self.solve_pnp_ransac(corrs, K, seed)
                init = t_rel.compose(keyframe_pose)
                inliers = int(mask.sum())
            except DegenerateGeometryError as e:
                logger.warning("PnP failed, using constant velocity", error=str(e), correspondences=len(corrs))
                fallback = True
        if init is None:
            init = constant_velocity(history)

        result = self.refine_pose(gmap, init, image, K)
        result.inlier_count = inliers
        result.fallback = fallback
        return result
