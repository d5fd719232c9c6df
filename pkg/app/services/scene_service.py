"""
Gaussian scene service: covariance construction, seeding from pointmaps, pruning and checkpoints
"""
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from app.core.exceptions import ArtifactIOError, IngestionError
from app.geometry import quaternion
from app.models.gaussian import GaussianMap, GaussianPrimitive, logit
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.schemas.config import GaussianSettings

logger = structlog.get_logger()

CHECKPOINT_MAGIC = b"GSMAP\x00\x00\x00"
CHECKPOINT_VERSION = 1
# id, mean(3), quat(4), log_scale(3), opacity_logit, color(3), obs_count, created_kf
RECORD_WIDTH = 17


def covariance(g: GaussianPrimitive) -> np.ndarray:
    """Sigma = R S S^T R^T"""
    return quaternion.to_covariance(g.rot, g.scale)[1][0]


class GaussianSceneService:
    """Insertion and maintenance of the Gaussian map"""

    def __init__(self, settings: Optional[GaussianSettings] = None):
        self.settings = settings or GaussianSettings()

    def insert_from_pointmap(
        self,
        gmap: GaussianMap,
        pm: Pointmap,
        pose: Pose,
        colors: np.ndarray,
        keep_fraction: Optional[float] = None,
        seed: int = 0,
        fx: Optional[float] = None,
        keyframe: int = 0,
    ) -> GaussianMap:
        """Seed Gaussians at a random subset of valid pixels; ``pose`` is world -> camera"""
        keep_fraction = self.settings.keep_fraction if keep_fraction is None else keep_fraction
        if not 0.0 < keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")

        rows, cols = np.nonzero(pm.valid)
        n_valid = rows.shape[0]
        count = int(np.floor(keep_fraction * n_valid))
        if count == 0:
            logger.warning("No Gaussians inserted", valid_pixels=n_valid, keep_fraction=keep_fraction)
            return gmap

        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(n_valid, size=count, replace=False))
        rows, cols = rows[chosen], cols[chosen]

        cam_points = pm.points[rows, cols]
        world_points = pose.inverse().apply(cam_points)
        depth = cam_points[:, 2]

        # pixel footprint at this depth, widened to the spacing of the kept samples
        focal = fx if fx is not None else _focal_from_pointmap(pm)
        spacing = depth / focal / np.sqrt(keep_fraction)
        scale = np.maximum(self.settings.init_scale_factor * spacing, 1e-6)

        quats = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
        log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
        opacity_logits = np.full(count, float(logit(self.settings.init_opacity)))
        point_colors = np.clip(np.asarray(colors, dtype=np.float64)[rows, cols], 0.0, 1.0)

        gmap.append(world_points, quats, log_scales, opacity_logits, point_colors, keyframe)
        logger.debug("Inserted Gaussians", count=count, keyframe=keyframe, total=len(gmap))
        return gmap

    def prune(
        self,
        gmap: GaussianMap,
        current_keyframe: int,
        opacity_floor: Optional[float] = None,
        min_observations: Optional[int] = None,
        age_window: Optional[int] = None,
    ) -> GaussianMap:
        """Remove transparent primitives and old primitives that are rarely observed"""
        opacity_floor = self.settings.opacity_floor if opacity_floor is None else opacity_floor
        min_observations = self.settings.min_observations if min_observations is None else min_observations
        age_window = self.settings.age_window if age_window is None else age_window

        if len(gmap) == 0:
            return gmap
        transparent = gmap.opacities < opacity_floor
        stale = ((current_keyframe - gmap.created_kf) > age_window) & (gmap.obs_counts < min_observations)
        removed = transparent | stale
        if removed.any():
            gmap.keep(~removed)
            logger.debug("Pruned Gaussians", removed=int(removed.sum()), remaining=len(gmap))
        return gmap

    @staticmethod
    def record_observations(gmap: GaussianMap, visible_ids) -> None:
        """Increment observation counts of the given primitive ids"""
        ids = np.fromiter(visible_ids, dtype=np.int64)
        if ids.size:
            gmap.obs_counts[np.isin(gmap.ids, ids)] += 1


def _focal_from_pointmap(pm: Pointmap) -> float:
    """Recover fx from neighbouring valid pixels when the caller does not pass it"""
    pts = pm.points
    both = pm.valid[:, 1:] & pm.valid[:, :-1]
    if not both.any():
        return 1.0
    dx = (pts[:, 1:, 0] / pts[:, 1:, 2] - pts[:, :-1, 0] / pts[:, :-1, 2])[both]
    step = np.median(dx)
    return float(1.0 / step) if step > 0 else 1.0


def save_map(gmap: GaussianMap, path) -> None:
    """Binary checkpoint: magic, version, count, then float64 records"""
    path = Path(path)
    records = np.column_stack([
        gmap.ids.astype(np.float64), gmap.means, gmap.quats, gmap.log_scales,
        gmap.opacity_logits, gmap.colors, gmap.obs_counts.astype(np.float64),
        gmap.created_kf.astype(np.float64),
    ]) if len(gmap) else np.zeros((0, RECORD_WIDTH))
    header = np.array([CHECKPOINT_VERSION, len(gmap)], dtype="<u8").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(header)
            fh.write(np.ascontiguousarray(records, dtype="<f8").tobytes())
    except OSError as e:
        logger.error("Failed to write map checkpoint", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write map checkpoint", path) from e


def load_map(path) -> GaussianMap:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError("Cannot read map checkpoint", path) from e
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 24:
        raise IngestionError("Not a map checkpoint", path)
    version, count = np.frombuffer(raw[8:24], dtype="<u8")
    if version != CHECKPOINT_VERSION:
        raise IngestionError(f"Unsupported checkpoint version {version}", path)
    body = raw[24:]
    if len(body) != int(count) * RECORD_WIDTH * 8:
        raise IngestionError("Checkpoint payload size mismatch", path)
    records = np.frombuffer(body, dtype="<f8").reshape(int(count), RECORD_WIDTH)
    if not np.all(np.isfinite(records)):
        raise IngestionError("Checkpoint contains non-finite values", path)
    ids = records[:, 0].astype(np.int64)
    return GaussianMap(
        ids=ids,
        means=records[:, 1:4].copy(),
        quats=records[:, 4:8].copy(),
        log_scales=records[:, 8:11].copy(),
        opacity_logits=records[:, 11].copy(),
        colors=records[:, 12:15].copy(),
        obs_counts=records[:, 15].astype(np.int64),
        created_kf=records[:, 16].astype(np.int64),
        next_id=int(ids.max()) + 1 if ids.size else 0,
    )
