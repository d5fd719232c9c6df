"""
Differentiable Gaussian splatting on the CPU.

The forward pass projects every primitive with the EWA Jacobian, enumerates the pixels
inside each primitive's alpha cutoff ellipse, sorts the (pixel, primitive) pairs front to
back by camera-space mean depth and alpha-blends color, depth and opacity. The backward
pass walks the same pairs in reverse and pulls image-space gradients back to every
Gaussian parameter block and to a left-perturbed camera pose.
"""
from dataclasses import dataclass
from typing import FrozenSet, Optional

import numpy as np
import structlog

from app.core.exceptions import StaleRenderError
from app.geometry import quaternion
from app.geometry.camera import unproject
from app.models.camera import CameraIntrinsics
from app.models.gaussian import GaussianMap
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.schemas.config import RenderSettings

logger = structlog.get_logger()


@dataclass
class ProjectedGaussians:
    """Per-primitive quantities of the primitives in front of the near plane"""

    index: np.ndarray      # rows into the map
    ids: np.ndarray
    t: np.ndarray          # camera-frame means (M, 3)
    uv: np.ndarray         # projected means (M, 2)
    rot: np.ndarray        # quaternion rotations (M, 3, 3)
    scales: np.ndarray     # (M, 3)
    cov3: np.ndarray       # world covariance (M, 3, 3)
    jac: np.ndarray        # perspective Jacobian (M, 2, 3)
    jw: np.ndarray         # J W (M, 2, 3)
    conic: np.ndarray      # inverse screen covariance (M, 2, 2)
    opacity: np.ndarray
    colors: np.ndarray


@dataclass
class RenderCache:
    """Sorted per-pixel contribution lists, padded to a rectangle"""

    gmap: GaussianMap
    map_version: int
    proj: ProjectedGaussians
    pixel: np.ndarray      # flat pixel index of each active row (P,)
    prim: np.ndarray       # local primitive index (P, K), 0 where padded
    alpha: np.ndarray      # (P, K), 0 where padded
    trans: np.ndarray      # transmittance before each contribution (P, K)
    included: np.ndarray   # (P, K) contributes to the blend
    dx: np.ndarray
    dy: np.ndarray


@dataclass
class RenderOutput:
    """Rendered color, blended depth and accumulated opacity"""

    color: np.ndarray
    depth: np.ndarray
    alpha_sum: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics
    cache: Optional[RenderCache]

    def valid_mask(self, threshold: float) -> np.ndarray:
        return self.alpha_sum >= threshold


@dataclass
class RenderGradients:
    """Gradients for every map row (zeros for culled primitives) and the camera pose"""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    pose: np.ndarray

    def blocks(self):
        return {
            "means": self.means,
            "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }


class SplatRenderer:
    """Forward and backward splatting for one camera model"""

    def __init__(self, settings: Optional[RenderSettings] = None):
        self.settings = settings or RenderSettings()

    # Forward

    def render(self, gmap: GaussianMap, pose: Pose, K: CameraIntrinsics) -> RenderOutput:
        height, width = K.height, K.width
        color = np.zeros((height * width, 3))
        depth = np.zeros(height * width)
        alpha_sum = np.zeros(height * width)

        proj = self._project(gmap, pose, K)
        cache = self._rasterize(gmap, proj, K)
        if cache is not None:
            weights = cache.alpha * cache.trans * cache.included
            prim = cache.prim
            color[cache.pixel] = np.einsum("pk,pkc->pc", weights, proj.colors[prim])
            depth[cache.pixel] = np.sum(weights * proj.t[prim, 2], axis=1)
            alpha_sum[cache.pixel] = np.sum(weights, axis=1)

        return RenderOutput(
            color=color.reshape(height, width, 3),
            depth=depth.reshape(height, width),
            alpha_sum=np.clip(alpha_sum, 0.0, 1.0).reshape(height, width),
            pose=pose,
            intrinsics=K,
            cache=cache,
        )

    def render_pointmap(self, gmap: GaussianMap, pose: Pose, K: CameraIntrinsics,
                        out: Optional[RenderOutput] = None) -> Pointmap:
        """Unprojected blended depth, invalid where accumulated opacity is low"""
        out = out if out is not None else self.render(gmap, pose, K)
        valid = out.alpha_sum >= self.settings.alpha_valid_threshold
        pm = unproject(np.where(valid, out.depth, 0.0), K)
        return pm.with_valid(valid)

    def _project(self, gmap: GaussianMap, pose: Pose, K: CameraIntrinsics) -> ProjectedGaussians:
        s = self.settings
        w = pose.rotation
        t_all = gmap.means @ w.T + pose.translation if len(gmap) else np.zeros((0, 3))
        opacity_all = gmap.opacities
        keep = (t_all[:, 2] > s.near) & (opacity_all > s.alpha_min)
        index = np.nonzero(keep)[0]

        t = t_all[index]
        scales = gmap.scales[index]
        if index.size:
            rot, cov3 = quaternion.to_covariance(gmap.quats[index], scales)
        else:
            rot, cov3 = np.zeros((0, 3, 3)), np.zeros((0, 3, 3))

        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        jac = np.zeros((index.size, 2, 3))
        jac[:, 0, 0] = K.fx / tz
        jac[:, 0, 2] = -K.fx * tx / tz ** 2
        jac[:, 1, 1] = K.fy / tz
        jac[:, 1, 2] = -K.fy * ty / tz ** 2
        jw = jac @ w
        cov2 = jw @ cov3 @ np.transpose(jw, (0, 2, 1)) + s.blur * np.eye(2)

        a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
        det = a * c - b * b
        conic = np.empty((index.size, 2, 2))
        conic[:, 0, 0] = c / det
        conic[:, 0, 1] = conic[:, 1, 0] = -b / det
        conic[:, 1, 1] = a / det

        uv = np.stack([K.fx * tx / tz + K.cx, K.fy * ty / tz + K.cy], axis=1)
        return ProjectedGaussians(
            index=index, ids=gmap.ids[index], t=t, uv=uv, rot=rot, scales=scales, cov3=cov3,
            jac=jac, jw=jw, conic=conic, opacity=opacity_all[index], colors=gmap.colors[index],
        )

    def _rasterize(self, gmap: GaussianMap, proj: ProjectedGaussians,
                   K: CameraIntrinsics) -> Optional[RenderCache]:
        s = self.settings
        n = proj.index.size
        if n == 0:
            return None

        # axis-aligned bounds of the ellipse where alpha >= alpha_min
        cutoff = 2.0 * np.log(proj.opacity / s.alpha_min)
        cov_xx = proj.conic[:, 1, 1] / (proj.conic[:, 0, 0] * proj.conic[:, 1, 1] - proj.conic[:, 0, 1] ** 2)
        cov_yy = proj.conic[:, 0, 0] / (proj.conic[:, 0, 0] * proj.conic[:, 1, 1] - proj.conic[:, 0, 1] ** 2)
        rx = np.sqrt(cutoff * cov_xx)
        ry = np.sqrt(cutoff * cov_yy)
        u, v = proj.uv[:, 0], proj.uv[:, 1]
        x0 = np.maximum(np.ceil(u - rx), 0).astype(np.int64)
        x1 = np.minimum(np.floor(u + rx), K.width - 1).astype(np.int64)
        y0 = np.maximum(np.ceil(v - ry), 0).astype(np.int64)
        y1 = np.minimum(np.floor(v + ry), K.height - 1).astype(np.int64)
        nx = np.maximum(x1 - x0 + 1, 0)
        ny = np.maximum(y1 - y0 + 1, 0)
        counts = nx * ny
        total = int(counts.sum())
        if total == 0:
            return None

        owner = np.repeat(np.arange(n), counts)
        offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        px = x0[owner] + offset % nx[owner]
        py = y0[owner] + offset // nx[owner]

        dx = px - u[owner]
        dy = py - v[owner]
        q = proj.conic[owner]
        power = 0.5 * (q[:, 0, 0] * dx * dx + 2.0 * q[:, 0, 1] * dx * dy + q[:, 1, 1] * dy * dy)
        alpha = proj.opacity[owner] * np.exp(-power)
        live = alpha >= s.alpha_min
        if not live.any():
            return None
        owner, px, py, dx, dy, alpha = owner[live], px[live], py[live], dx[live], dy[live], alpha[live]

        # front to back by mean depth, ties by map order
        rank = np.empty(n, dtype=np.int64)
        rank[np.argsort(proj.t[:, 2], kind="stable")] = np.arange(n)
        pixel = py * K.width + px
        order = np.lexsort((rank[owner], pixel))
        owner, pixel, dx, dy, alpha = owner[order], pixel[order], dx[order], dy[order], alpha[order]

        active, first, per_pixel = np.unique(pixel, return_index=True, return_counts=True)
        rows = np.repeat(np.arange(active.size), per_pixel)
        slots = np.arange(pixel.size) - np.repeat(first, per_pixel)
        depth_k = int(per_pixel.max())

        shape = (active.size, depth_k)
        prim = np.zeros(shape, dtype=np.int64)
        a = np.zeros(shape)
        pdx = np.zeros(shape)
        pdy = np.zeros(shape)
        occupied = np.zeros(shape, dtype=bool)
        prim[rows, slots] = owner
        a[rows, slots] = alpha
        pdx[rows, slots] = dx
        pdy[rows, slots] = dy
        occupied[rows, slots] = True

        trans = np.ones(shape)
        if depth_k > 1:
            trans[:, 1:] = np.cumprod(1.0 - a[:, :-1], axis=1)
        included = occupied & (trans >= s.transmittance_floor)

        return RenderCache(
            gmap=gmap, map_version=gmap.version, proj=proj, pixel=active, prim=prim,
            alpha=a, trans=trans, included=included, dx=pdx, dy=pdy,
        )

    # Visibility

    def contributions(self, out: RenderOutput) -> np.ndarray:
        """Largest blend weight of each projected primitive over all pixels"""
        cache = out.cache
        if cache is None:
            return np.zeros(0)
        weights = (cache.alpha * cache.trans * cache.included).ravel()
        best = np.zeros(cache.proj.index.size)
        np.maximum.at(best, cache.prim.ravel(), weights)
        return best

    def visible_ids(self, out: RenderOutput, floor: Optional[float] = None) -> FrozenSet[int]:
        floor = self.settings.visibility_floor if floor is None else floor
        if out.cache is None:
            return frozenset()
        best = self.contributions(out)
        return frozenset(int(g) for g in out.cache.proj.ids[best >= floor])

    # Backward

    def backward(
        self,
        out: RenderOutput,
        grad_color: Optional[np.ndarray] = None,
        grad_depth: Optional[np.ndarray] = None,
        grad_alpha: Optional[np.ndarray] = None,
    ) -> RenderGradients:
        """Gradients of a scalar loss given its image-space gradients"""
        cache = out.cache
        n_map = len(cache.gmap) if cache is not None else 0
        grads = RenderGradients(
            means=np.zeros((n_map, 3)), quats=np.zeros((n_map, 4)), log_scales=np.zeros((n_map, 3)),
            opacity_logits=np.zeros(n_map), colors=np.zeros((n_map, 3)), pose=np.zeros(6),
        )
        if cache is None:
            return grads
        if cache.gmap.version != cache.map_version:
            raise StaleRenderError("Map changed since this render; re-render before backward")

        proj = cache.proj
        m = proj.index.size
        n_pix = out.intrinsics.width * out.intrinsics.height
        g_c = np.zeros((cache.pixel.size, 3)) if grad_color is None else \
            np.asarray(grad_color, dtype=np.float64).reshape(n_pix, 3)[cache.pixel]
        g_d = np.zeros(cache.pixel.size) if grad_depth is None else \
            np.asarray(grad_depth, dtype=np.float64).reshape(n_pix)[cache.pixel]
        g_a = np.zeros(cache.pixel.size) if grad_alpha is None else \
            np.asarray(grad_alpha, dtype=np.float64).reshape(n_pix)[cache.pixel]
        if not (np.any(g_c) or np.any(g_d) or np.any(g_a)):
            return grads

        prim = cache.prim
        inc = cache.included
        a_eff = cache.alpha * inc
        weights = a_eff * cache.trans
        z = proj.t[:, 2]

        # per-contribution feature gradient: color, depth and unit alpha channels
        feat = (np.einsum("pc,pkc->pk", g_c, proj.colors[prim])
                + g_d[:, None] * z[prim] + g_a[:, None]) * inc

        suffix = np.zeros_like(a_eff)
        for k in range(a_eff.shape[1] - 2, -1, -1):
            suffix[:, k] = feat[:, k + 1] * a_eff[:, k + 1] + (1.0 - a_eff[:, k + 1]) * suffix[:, k + 1]
        d_alpha = cache.trans * (feat - suffix) * inc

        pix_rows = np.nonzero(inc)[0]
        flat = prim[inc]
        alpha_i = cache.alpha[inc]
        d_alpha_i = d_alpha[inc]
        dx, dy = cache.dx[inc], cache.dy[inc]
        w_i = weights[inc]

        def accumulate(values):
            return np.bincount(flat, weights=values, minlength=m)

        g_colors = np.stack([accumulate(w_i * g_c[pix_rows, c]) for c in range(3)], axis=1)
        g_z = accumulate(w_i * g_d[pix_rows])
        g_opacity = accumulate(d_alpha_i * alpha_i) / proj.opacity
        g_power = -alpha_i * d_alpha_i

        conic = proj.conic[flat]
        g_q00 = accumulate(0.5 * g_power * dx * dx)
        g_q01 = accumulate(0.5 * g_power * dx * dy)
        g_q11 = accumulate(0.5 * g_power * dy * dy)
        g_u = accumulate(-g_power * (conic[:, 0, 0] * dx + conic[:, 0, 1] * dy))
        g_v = accumulate(-g_power * (conic[:, 0, 1] * dx + conic[:, 1, 1] * dy))

        g_conic = np.empty((m, 2, 2))
        g_conic[:, 0, 0] = g_q00
        g_conic[:, 0, 1] = g_conic[:, 1, 0] = g_q01
        g_conic[:, 1, 1] = g_q11

        # conic = cov2^-1, cov2 = JW cov3 (JW)^T + blur I
        g_cov2 = -proj.conic @ g_conic @ proj.conic
        jw = proj.jw
        g_jw = 2.0 * g_cov2 @ jw @ proj.cov3
        g_cov3 = np.transpose(jw, (0, 2, 1)) @ g_cov2 @ jw
        w = out.pose.rotation
        g_jac = g_jw @ w.T
        g_w = np.einsum("mji,mjk->ik", proj.jac, g_jw)

        fx, fy = out.intrinsics.fx, out.intrinsics.fy
        tx, ty, tz = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
        g_t = np.zeros((m, 3))
        g_t[:, 0] = -fx / tz ** 2 * g_jac[:, 0, 2] + fx / tz * g_u
        g_t[:, 1] = -fy / tz ** 2 * g_jac[:, 1, 2] + fy / tz * g_v
        g_t[:, 2] = (
            -fx / tz ** 2 * g_jac[:, 0, 0]
            + 2.0 * fx * tx / tz ** 3 * g_jac[:, 0, 2]
            - fy / tz ** 2 * g_jac[:, 1, 1]
            + 2.0 * fy * ty / tz ** 3 * g_jac[:, 1, 2]
            - fx * tx / tz ** 2 * g_u
            - fy * ty / tz ** 2 * g_v
            + g_z
        )

        # cov3 = M M^T with M = R_q S
        rs = proj.rot * proj.scales[:, None, :]
        g_m = 2.0 * g_cov3 @ rs
        g_scales = np.einsum("mri,mri->mi", proj.rot, g_m)
        g_rot = g_m * proj.scales[:, None, :]

        rows = proj.index
        grads.means[rows] = g_t @ w
        grads.log_scales[rows] = g_scales * proj.scales
        grads.quats[rows] = quaternion.matrix_grad_to_quat(cache.gmap.quats[rows], g_rot)
        grads.opacity_logits[rows] = g_opacity * proj.opacity * (1.0 - proj.opacity)
        grads.colors[rows] = g_colors

        # left perturbation exp(xi) T: t -> t + omega x t + v and W -> (I + omega^) W
        g_v_pose = g_t.sum(axis=0)
        a_mat = w @ g_w.T
        g_omega = np.cross(proj.t, g_t).sum(axis=0) + np.array([
            a_mat[1, 2] - a_mat[2, 1],
            a_mat[2, 0] - a_mat[0, 2],
            a_mat[0, 1] - a_mat[1, 0],
        ])
        grads.pose = np.concatenate([g_omega, g_v_pose])
        return grads

    def backward_pose(self, out: RenderOutput, residual_grad: np.ndarray,
                      grad_depth: Optional[np.ndarray] = None) -> np.ndarray:
        """Tangent-space gradient (omega, v) of the loss w.r.t. the camera pose"""
        return self.backward(out, residual_grad, grad_depth).pose

    def backward_params(self, out: RenderOutput, residual_grad: np.ndarray,
                        grad_depth: Optional[np.ndarray] = None) -> RenderGradients:
        return self.backward(out, residual_grad, grad_depth)
