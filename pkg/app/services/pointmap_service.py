"""
Pointmap provider service: synthetic oracle or file ingestion, plus reciprocal matching
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import structlog
from sklearn.neighbors import NearestNeighbors

from app.core.binary_io import read_pointmap_file
from app.core.exceptions import IngestionError
from app.geometry.camera import unproject
from app.models.camera import CameraIntrinsics
from app.models.frame import FrameObservation
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.schemas.config import OracleConfig, ProviderModeEnum, ProviderSettings

logger = structlog.get_logger()

MIN_MATCHES = 4


class GroundTruthSource(Protocol):
    """What the oracle may read from a dataset"""

    intrinsics: CameraIntrinsics

    def gt_depth(self, index: int) -> np.ndarray: ...

    def gt_pose(self, index: int) -> Optional[Pose]: ...


@dataclass
class PairPointmaps:
    """Provider output for a (keyframe a, frame b) pair.

    ``pm_a`` and ``pm_b`` share one scale and are both expressed in camera a's frame;
    ``pm_b_local`` is frame b's pointmap in its own camera frame at the same scale.
    ``matches`` rows are (i_a, j_a, i_b, j_b) pixel coordinates, (column, row).
    """

    pm_a: Pointmap
    pm_b: Pointmap
    pm_b_local: Pointmap
    matches: np.ndarray
    provenance: str
    scale: float = 1.0


def match(pm_a: Pointmap, pm_b: Pointmap, threshold: float) -> np.ndarray:
    """Reciprocal nearest neighbours in 3D among confident pixels, sorted by pixel of a"""
    sel_a = pm_a.valid & (pm_a.confidence >= threshold)
    sel_b = pm_b.valid & (pm_b.confidence >= threshold)
    rows_a, cols_a = np.nonzero(sel_a)
    rows_b, cols_b = np.nonzero(sel_b)
    if rows_a.size == 0 or rows_b.size == 0:
        return np.zeros((0, 4), dtype=np.int64)

    pts_a = pm_a.points[rows_a, cols_a]
    pts_b = pm_b.points[rows_b, cols_b]
    nn_ab = NearestNeighbors(n_neighbors=1).fit(pts_b).kneighbors(pts_a, return_distance=False)[:, 0]
    nn_ba = NearestNeighbors(n_neighbors=1).fit(pts_a).kneighbors(pts_b, return_distance=False)[:, 0]

    idx_a = np.arange(rows_a.size)
    mutual = nn_ba[nn_ab] == idx_a
    ia, ib = idx_a[mutual], nn_ab[mutual]
    matches = np.column_stack([cols_a[ia], rows_a[ia], cols_b[ib], rows_b[ib]]).astype(np.int64)
    if matches.shape[0] < MIN_MATCHES:
        logger.debug("Few reciprocal matches", matches=int(matches.shape[0]))
    return matches


class OraclePointmapProvider:
    """Ground-truth depth with compounding scale drift, noise, dropout and edge-aware confidence"""

    provenance = "oracle"

    def __init__(self, source: GroundTruthSource, config: Optional[OracleConfig] = None,
                 confidence_threshold: float = 1.2):
        self.source = source
        self.config = config or OracleConfig()
        self.confidence_threshold = confidence_threshold

    def scale_factor(self, frame_b: FrameObservation) -> float:
        return float(self.config.scale_drift_per_frame ** frame_b.index)

    def provide(self, frame_a: FrameObservation, frame_b: FrameObservation) -> PairPointmaps:
        cfg = self.config
        K = self.source.intrinsics
        factor = self.scale_factor(frame_b)
        rng = np.random.default_rng([cfg.seed, frame_a.index, frame_b.index])

        pm_a = self._noisy_pointmap(self.source.gt_depth(frame_a.index), K, factor, rng)
        pm_b_local = self._noisy_pointmap(self.source.gt_depth(frame_b.index), K, factor, rng)

        pose_a = self.source.gt_pose(frame_a.index)
        pose_b = self.source.gt_pose(frame_b.index)
        if pose_a is None or pose_b is None:
            raise IngestionError(f"Oracle needs ground-truth poses for frames {frame_a.index} and {frame_b.index}")
        # b camera -> a camera, translation at the provider's scale
        rel = pose_a.compose(pose_b.inverse())
        rel = Pose(rel.rotation, rel.translation * factor)
        pm_b = Pointmap(rel.apply(pm_b_local.points), pm_b_local.confidence, pm_b_local.valid)

        matches = match(pm_a, pm_b, self.confidence_threshold)
        return PairPointmaps(pm_a=pm_a, pm_b=pm_b, pm_b_local=pm_b_local, matches=matches,
                             provenance=self.provenance, scale=factor)

    def _noisy_pointmap(self, depth: np.ndarray, K: CameraIntrinsics, factor: float,
                        rng: np.random.Generator) -> Pointmap:
        cfg = self.config
        pm = unproject(depth, K)
        points = pm.points * factor
        if cfg.noise_sigma_rel > 0:
            points = points * (1.0 + cfg.noise_sigma_rel * rng.standard_normal(depth.shape))[..., None]

        confidence = self._confidence(depth, pm.valid)
        valid = pm.valid.copy()
        if cfg.dropout_fraction > 0:
            valid &= rng.random(depth.shape) >= cfg.dropout_fraction
        return Pointmap(points, confidence, valid)

    def _confidence(self, depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """High on smooth surfaces, low across depth discontinuities"""
        cfg = self.config
        safe = np.where(valid, depth, np.nan)
        gy, gx = np.gradient(safe)
        rel = np.hypot(gx, gy) / safe
        rel = np.where(np.isfinite(rel), rel, np.inf)
        span = cfg.confidence_ceiling - cfg.confidence_floor
        return np.where(valid, cfg.confidence_floor + span * np.exp(-cfg.edge_sensitivity * rel), 0.0)


class FilePointmapProvider:
    """Reads precomputed pair pointmaps named ``{a:06d}_{b:06d}_{a|b|b_local}.pmap``"""

    provenance = "file"

    def __init__(self, directory, confidence_threshold: float = 1.2):
        self.directory = Path(directory)
        self.confidence_threshold = confidence_threshold
        if not self.directory.is_dir():
            raise IngestionError("Pointmap directory not found", self.directory)

    def path_for(self, a: int, b: int, part: str) -> Path:
        return self.directory / f"{a:06d}_{b:06d}_{part}.pmap"

    def provide(self, frame_a: FrameObservation, frame_b: FrameObservation) -> PairPointmaps:
        maps = {}
        for part in ("a", "b", "b_local"):
            path = self.path_for(frame_a.index, frame_b.index, part)
            if not path.exists():
                raise IngestionError("Missing pointmap file", path)
            points, confidence = read_pointmap_file(path)
            if points.shape[:2] != frame_a.intrinsics.shape:
                raise IngestionError(f"Pointmap size {points.shape[:2]} does not match the frames", path)
            maps[part] = Pointmap(points, confidence, confidence > 0)

        matches = match(maps["a"], maps["b"], self.confidence_threshold)
        return PairPointmaps(pm_a=maps["a"], pm_b=maps["b"], pm_b_local=maps["b_local"],
                             matches=matches, provenance=self.provenance)


def build_provider(settings: ProviderSettings, oracle: OracleConfig,
                   source: Optional[GroundTruthSource] = None):
    """Provider selected by the pipeline configuration"""
    if settings.mode == ProviderModeEnum.FILES:
        return FilePointmapProvider(settings.directory, settings.confidence_threshold)
    if source is None:
        raise IngestionError("Oracle provider needs a dataset with ground-truth depth")
    return OraclePointmapProvider(source, oracle, settings.confidence_threshold)
