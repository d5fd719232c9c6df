"""
Mapping service: pointmap replacement, Gaussian insertion and windowed joint optimization
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core.exceptions import NumericalError
from app.geometry.quaternion import normalize
from app.geometry.se3 import retract
from app.models.camera import CameraIntrinsics
from app.models.gaussian import PARAM_BLOCKS, GaussianMap
from app.models.keyframe import Keyframe
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.rendering.splatting import RenderOutput, SplatRenderer
from app.schemas.config import MapOptimConfig
from app.services.scene_service import GaussianSceneService

logger = structlog.get_logger()

_ADAM_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-15
_MAX_STEP_SCALE = 1.0


@dataclass
class LossTerms:
    photometric: float = 0.0
    geometric: float = 0.0
    isotropic: float = 0.0
    total: float = 0.0


@dataclass
class WindowOptimizationResult:
    """Optimized keyframe poses (window order) and the accepted total-loss trace"""

    poses: List[Pose]
    trace: List[float] = field(default_factory=list)
    final: LossTerms = field(default_factory=LossTerms)
    iterations: int = 0


def photometric_loss(out: RenderOutput, image: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute color error and its gradient w.r.t. the rendered color"""
    diff = out.color - image
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def geometric_loss(out: RenderOutput, aligned: Pointmap, alpha_threshold: float) -> Tuple[float, np.ndarray]:
    """Mean |rendered depth - aligned depth| over pixels valid in both"""
    mask = (out.alpha_sum >= alpha_threshold) & aligned.valid
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(out.depth)
    diff = out.depth - aligned.depth
    loss = float(np.sum(np.abs(diff[mask])) / count)
    return loss, np.where(mask, np.sign(diff), 0.0) / count


def isotropic_loss(log_scales: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sum over primitives of ||s - mean(s)||_1 and its gradient w.r.t. the log-scales"""
    if log_scales.shape[0] == 0:
        return 0.0, np.zeros_like(log_scales)
    s = np.exp(log_scales)
    d = s - s.mean(axis=1, keepdims=True)
    sgn = np.sign(d)
    grad_s = sgn - sgn.mean(axis=1, keepdims=True)
    return float(np.abs(d).sum()), grad_s * s


def replace_points(xr: Pointmap, xp_aligned: Pointmap, epsilon_m: float) -> Tuple[Pointmap, float]:
    """Swap rendered points that disagree with the aligned provider points; fill holes from it.

    Returns the merged pointmap and the fraction of its valid pixels taken from the provider.
    """
    if xr.shape != xp_aligned.shape:
        raise ValueError(f"Pointmap shapes differ: {xr.shape} vs {xp_aligned.shape}")
    both = xr.valid & xp_aligned.valid
    zr, zp = xr.depth, xp_aligned.depth
    wrong = both & (np.abs(zr - zp) > epsilon_m * zp)
    holes = xp_aligned.valid & ~xr.valid
    take = wrong | holes

    points = np.where(take[..., None], xp_aligned.points, xr.points)
    confidence = np.where(take, xp_aligned.confidence, xr.confidence)
    merged = Pointmap(points, confidence, xr.valid | xp_aligned.valid)
    n_valid = merged.valid_count()
    fraction = float(take.sum() / n_valid) if n_valid else 0.0
    return merged, fraction


class _Adam:
    """Adam moments for one optimize call; steps are proposed, then committed or dropped"""

    def __init__(self, shapes: Dict[str, tuple], lrs: Dict[str, np.ndarray]):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.lrs = lrs
        self.t = 0

    def propose(self, grads: Dict[str, np.ndarray], scale: float):
        b1, b2 = _ADAM_BETAS
        t = self.t + 1
        m = {k: b1 * self.m[k] + (1 - b1) * g for k, g in grads.items()}
        v = {k: b2 * self.v[k] + (1 - b2) * g * g for k, g in grads.items()}
        steps = {}
        for k in grads:
            m_hat = m[k] / (1 - b1 ** t)
            v_hat = v[k] / (1 - b2 ** t)
            steps[k] = -scale * self.lrs[k] * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        return steps, (m, v)

    def commit(self, moments) -> None:
        self.m, self.v = moments
        self.t += 1


class MappingService:
    """Map growth and windowed optimization at keyframes"""

    def __init__(self, renderer: SplatRenderer, scene: GaussianSceneService,
                 config: Optional[MapOptimConfig] = None):
        self.renderer = renderer
        self.scene = scene
        self.config = config or MapOptimConfig()

    def replace_points(self, xr: Pointmap, xp_aligned: Pointmap) -> Tuple[Pointmap, float]:
        return replace_points(xr, xp_aligned, self.config.epsilon_m)

    def insert_keyframe_gaussians(self, gmap: GaussianMap, xhat_r: Pointmap, pose: Pose,
                                  colors: np.ndarray, K: CameraIntrinsics, keyframe: int,
                                  seed: int = 0) -> int:
        """Insert primitives from the merged pointmap; returns how many were added"""
        before = len(gmap)
        self.scene.insert_from_pointmap(gmap, xhat_r, pose, colors, seed=seed, fx=K.fx, keyframe=keyframe)
        return len(gmap) - before

    def initialize(self, gmap: GaussianMap, keyframe: Keyframe, K: CameraIntrinsics,
                   iterations: Optional[int] = None) -> WindowOptimizationResult:
        """First-frame optimization of the photometric and isotropic terms with the pose held fixed"""
        iterations = self.config.init_iterations if iterations is None else iterations
        return self.optimize_window(gmap, [keyframe], K, iterations=iterations, use_geometry=False)

    def optimize_window(
        self,
        gmap: GaussianMap,
        window: Sequence[Keyframe],
        K: CameraIntrinsics,
        iterations: Optional[int] = None,
        use_geometry: bool = True,
    ) -> WindowOptimizationResult:
        """Joint descent on the map and every window pose except the oldest.

        Each keyframe contributes alpha * L_pho + (1 - alpha) * L_geo; keyframes without an
        aligned pointmap (or with geometry disabled) contribute L_pho alone. Candidate steps
        that raise the total loss are dropped and the step scale is halved.
        """
        cfg = self.config
        iterations = cfg.iterations if iterations is None else iterations
        keyframes = list(window)
        if not keyframes:
            raise ValueError("optimize_window needs at least one keyframe")
        poses = [kf.pose for kf in keyframes]
        if len(gmap) == 0:
            logger.warning("Window optimization skipped, map is empty")
            return WindowOptimizationResult(poses=poses)

        alphas = [cfg.alpha if (use_geometry and kf.aligned is not None) else 1.0 for kf in keyframes]
        extent = max(float(np.mean([kf.median_depth for kf in keyframes])), 1e-6)
        n_free = len(keyframes) - 1

        shapes = {name: getattr(gmap, name).shape for name in PARAM_BLOCKS}
        lrs = {
            "means": np.full(1, cfg.lr_means * extent), "quats": np.full(1, cfg.lr_quats),
            "log_scales": np.full(1, cfg.lr_scales), "opacity_logits": np.full(1, cfg.lr_opacity),
            "colors": np.full(1, cfg.lr_colors),
        }
        if n_free:
            shapes["poses"] = (n_free, 6)
            lrs["poses"] = np.array([cfg.lr_pose_rot] * 3 + [cfg.lr_pose_trans] * 3)
        adam = _Adam(shapes, lrs)

        terms, outs, image_grads = self._evaluate(gmap, keyframes, poses, K, alphas)
        trace = [terms.total]
        scale = _MAX_STEP_SCALE
        for it in range(iterations):
            grads = self._gradients(gmap, outs, image_grads)
            steps, moments = adam.propose(grads, scale)

            # renders keep a reference to the map they came from, so candidates live on a copy
            candidate = gmap.copy()
            blocks = {name: getattr(gmap, name) + steps[name] for name in PARAM_BLOCKS}
            blocks["quats"] = normalize(blocks["quats"])
            candidate.set_params(**blocks)
            cand_poses = list(poses)
            for k in range(n_free):
                cand_poses[k + 1] = retract(poses[k + 1], steps["poses"][k])

            cand_terms, cand_outs, cand_grads = self._evaluate(candidate, keyframes, cand_poses, K, alphas)
            if np.isfinite(cand_terms.total) and cand_terms.total <= terms.total:
                adam.commit(moments)
                gmap.set_params(**candidate.params())
                poses, terms, outs, image_grads = cand_poses, cand_terms, cand_outs, cand_grads
                trace.append(terms.total)
                scale = min(scale * 2.0, _MAX_STEP_SCALE)
            else:
                scale *= 0.5
            logger.debug("Window step", iteration=it, loss=terms.total, step_scale=scale)

        if not gmap.is_finite():
            logger.error("Map parameters became non-finite")
            raise NumericalError("Map optimization produced non-finite parameters")

        for kf, pose in zip(keyframes[1:], poses[1:]):
            kf.pose = pose
        logger.debug("Window optimized", keyframes=len(keyframes), loss=terms.total, gaussians=len(gmap))
        return WindowOptimizationResult(poses=poses, trace=trace, final=terms, iterations=iterations)

    def _evaluate(self, gmap: GaussianMap, keyframes: Sequence[Keyframe], poses: Sequence[Pose],
                  K: CameraIntrinsics, alphas: Sequence[float]):
        terms = LossTerms()
        outs, image_grads = [], []
        threshold = self.renderer.settings.alpha_valid_threshold
        for kf, pose, alpha in zip(keyframes, poses, alphas):
            out = self.renderer.render(gmap, pose, K)
            l_pho, g_pho = photometric_loss(out, kf.image)
            l_geo, g_geo = (0.0, None)
            if alpha < 1.0:
                l_geo, g_geo = geometric_loss(out, kf.aligned, threshold)
            terms.photometric += l_pho
            terms.geometric += l_geo
            terms.total += alpha * l_pho + (1.0 - alpha) * l_geo
            outs.append(out)
            image_grads.append((alpha * g_pho, None if g_geo is None else (1.0 - alpha) * g_geo))

        l_iso, _ = isotropic_loss(gmap.log_scales)
        terms.isotropic = l_iso
        terms.total += self.config.lambda_iso * l_iso
        return terms, outs, image_grads

    def _gradients(self, gmap: GaussianMap, outs, image_grads) -> Dict[str, np.ndarray]:
        grads = {name: np.zeros_like(getattr(gmap, name)) for name in PARAM_BLOCKS}
        pose_grads = []
        for k, (out, (g_color, g_depth)) in enumerate(zip(outs, image_grads)):
            g = self.renderer.backward(out, grad_color=g_color, grad_depth=g_depth)
            for name, value in g.blocks().items():
                grads[name] += value
            if k > 0:
                pose_grads.append(g.pose)
        _, g_iso = isotropic_loss(gmap.log_scales)
        grads["log_scales"] += self.config.lambda_iso * g_iso
        if pose_grads:
            grads["poses"] = np.stack(pose_grads)
        return grads
