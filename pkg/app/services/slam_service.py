"""
SLAM service: the frame loop tying tracking, keyframing, alignment and mapping together
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Type

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel

from app.core.config import write_config_file
from app.core.exceptions import ArtifactIOError, ScaleAlignmentError, TrackingFailureError, UsageError
from app.core.trajectory_io import write_tum
from app.models.camera import CameraIntrinsics
from app.models.frame import FrameObservation
from app.models.gaussian import GaussianMap
from app.models.keyframe import Keyframe, KeyframeWindow
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.rendering.splatting import SplatRenderer
from app.schemas.config import PipelineConfig, PointSourceEnum
from app.schemas.records import AblationRow, KeyframeRecord, MappingRecord, TrackingRecord
from app.services.alignment_service import AlignmentResult, ScaleAlignmentService
from app.services.evaluation_service import TrajectoryPair, ate
from app.services.keyframe_service import KeyframeService
from app.services.mapping_service import MappingService, replace_points
from app.services.pointmap_service import PairPointmaps, build_provider
from app.services.scene_service import GaussianSceneService, save_map
from app.services.simulation_service import Dataset
from app.services.tracking_service import TrackingService

logger = structlog.get_logger()


@dataclass
class RunArtifacts:
    """In-memory result of a run; the same content is written to ``out_dir``"""

    out_dir: Path
    poses: List[Pose]
    keyframe_ids: List[int]
    gmap: GaussianMap
    tracking: List[TrackingRecord] = field(default_factory=list)
    mapping: List[MappingRecord] = field(default_factory=list)
    keyframes: List[KeyframeRecord] = field(default_factory=list)
    hard_failures: int = 0


def _seed(base: int, frame: int) -> int:
    return base * 1_000_003 + frame


def _write_records(path: Path, records: Sequence[BaseModel], model: Type[BaseModel]) -> None:
    frame = pd.DataFrame([r.model_dump() for r in records], columns=list(model.model_fields))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        logger.error("Failed to write log", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write log", path) from e


def write_poses_csv(path: Path, poses: Sequence[Pose]) -> None:
    rows = []
    for index, pose in enumerate(poses):
        qx, qy, qz, qw = pose.quaternion()
        tx, ty, tz = pose.translation
        rows.append({"frame": index, "qx": qx, "qy": qy, "qz": qz, "qw": qw, "tx": tx, "ty": ty, "tz": tz})
    frame = pd.DataFrame(rows, columns=["frame", "qx", "qy", "qz", "qw", "tx", "ty", "tz"])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        logger.error("Failed to write poses", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write poses", path) from e


class SlamService:
    """Runs the full pipeline over one dataset"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        cfg = self.config
        self.renderer = SplatRenderer(cfg.render)
        self.scene = GaussianSceneService(cfg.gaussians)
        self.tracker = TrackingService(self.renderer, cfg.tracking)
        self.aligner = ScaleAlignmentService(cfg.alignment)
        self.mapper = MappingService(self.renderer, self.scene, cfg.mapping)
        self.keyframer = KeyframeService(self.renderer, cfg.keyframes)
        self.hard_failures = 0

    def run(self, dataset: Dataset, out_dir, provider=None) -> RunArtifacts:
        cfg = self.config
        out = Path(out_dir)
        if len(dataset) < 2:
            raise UsageError("A run needs at least two frames")
        K = dataset.intrinsics
        cfg.check_image(K.width, K.height)
        provider = provider or build_provider(cfg.provider, cfg.oracle, dataset)
        timestamps = list(dataset.timestamps)
        logger.info("Run started", frames=len(dataset), provider=provider.provenance, out=str(out))

        self.hard_failures = 0
        first = dataset[0].blinded()
        gmap, window, artifacts = self._initialize(first, dataset[1].blinded(), provider, K, out)
        keyframe_count = 1
        frames: Dict[int, FrameObservation] = {0: first}

        for n in range(1, len(dataset)):
            frame = dataset[n].blinded()
            latest = window.latest
            pair = provider.provide(frames[latest.frame_id], frame)

            result = self._track(gmap, latest, pair, frame, K, artifacts.poses, n)
            pose = result.pose
            artifacts.poses.append(pose)
            if result.fallback:
                self.hard_failures += 1
            q = pose.quaternion()
            artifacts.tracking.append(TrackingRecord(
                frame=n, inliers=result.inlier_count, iterations=result.refinement_iterations,
                loss=result.final_loss, fallback=result.fallback,
                qx=q[0], qy=q[1], qz=q[2], qw=q[3],
                tx=pose.translation[0], ty=pose.translation[1], tz=pose.translation[2],
            ))
            self._check_failures(n + 1, artifacts, timestamps, out, final=False)

            out_n = self.renderer.render(gmap, pose, K)
            visible = self.renderer.visible_ids(out_n)
            xr_n = self.renderer.render_pointmap(gmap, pose, K, out_n)
            median = xr_n.median_depth() or latest.median_depth
            if self.keyframer.should_add_keyframe(visible, pose, median, latest):
                keyframe = self._add_keyframe(gmap, window, latest, pair, frame, pose, xr_n, K,
                                              keyframe_count, artifacts, out)
                keyframe_count += 1
                frames[n] = frame
                artifacts.poses[n] = keyframe.pose
                artifacts.keyframe_ids.append(n)

            if (n + 1) % cfg.checkpoint_every == 0:
                save_map(gmap, out / "checkpoints" / f"map_{n:06d}.gsm")
                write_tum(out / "checkpoints" / f"traj_{n:06d}.txt", timestamps[: n + 1], artifacts.poses)

        artifacts.hard_failures = self.hard_failures
        self._write_artifacts(artifacts, timestamps, out)
        self._check_failures(len(dataset), artifacts, timestamps, out, final=True)
        logger.info("Run finished", frames=len(dataset), keyframes=len(artifacts.keyframe_ids),
                    gaussians=len(gmap), hard_failures=self.hard_failures)
        return artifacts

    def _initialize(self, first: FrameObservation, second: FrameObservation, provider,
                    K: CameraIntrinsics, out: Path):
        """Map from the first provider pointmap at the identity pose, then photometric fitting"""
        cfg = self.config
        pair = provider.provide(first, second)
        pose = Pose.identity()
        gmap = GaussianMap()
        self.scene.insert_from_pointmap(gmap, pair.pm_a, pose, first.image,
                                        seed=_seed(cfg.seed, 0), fx=K.fx, keyframe=0)
        keyframe = Keyframe(frame_id=0, pose=pose, image=first.image, aligned=pair.pm_a,
                            median_depth=pair.pm_a.median_depth() or 1.0, scale=1.0)
        fit = self.mapper.initialize(gmap, keyframe, K)

        keyframe.visible = self.keyframer.visible_set(gmap, pose, K)
        self.scene.record_observations(gmap, keyframe.visible)
        window = KeyframeWindow(capacity=cfg.keyframes.window_size, keyframes=[keyframe])

        artifacts = RunArtifacts(out_dir=out, poses=[pose], keyframe_ids=[0], gmap=gmap)
        artifacts.keyframes.append(KeyframeRecord(frame=0, median_depth=keyframe.median_depth,
                                                  visible=len(keyframe.visible)))
        artifacts.mapping.append(MappingRecord(
            keyframe=0, scale=1.0, inserted=len(gmap), gaussians=len(gmap), window="0",
            loss_photometric=fit.final.photometric, loss_geometric=fit.final.geometric,
            loss_isotropic=fit.final.isotropic, loss_total=fit.final.total,
        ))
        logger.info("Map initialized", gaussians=len(gmap), loss=fit.final.total)
        return gmap, window, artifacts

    def _track(self, gmap: GaussianMap, latest: Keyframe, pair: PairPointmaps, frame: FrameObservation,
               K: CameraIntrinsics, history: List[Pose], n: int):
        ablation = self.config.ablation
        if ablation.pnp_point_source == PointSourceEnum.PROVIDER:
            anchor = pair.pm_a
        else:
            anchor = self.renderer.render_pointmap(gmap, latest.pose, K)
        return self.tracker.track(gmap, latest.pose, anchor, pair.matches, frame.image, K, history,
                                  seed=_seed(self.config.seed, n), use_pape=ablation.use_pape)

    def _align(self, xr_n: Pointmap, pair: PairPointmaps, latest: Keyframe, gmap: GaussianMap,
               K: CameraIntrinsics) -> Optional[AlignmentResult]:
        """Aligned provider pointmap of the new keyframe; None when alignment failed outright"""
        xp_n = pair.pm_b_local
        if not self.config.ablation.use_scale_alignment:
            return AlignmentResult(scale=1.0, aligned=xp_n, correct_points=np.zeros(xp_n.shape, dtype=bool))
        result = self.aligner.align(xr_n, xp_n)
        if result.sufficient:
            return result
        aligned_prev = latest.aligned
        if aligned_prev is None:
            aligned_prev = self.renderer.render_pointmap(gmap, latest.pose, K)
        try:
            return self.aligner.align_with_remedy(xr_n, xp_n, aligned_prev, pair.matches, reference=pair.pm_b)
        except ScaleAlignmentError as e:
            logger.warning("Keyframe left without an aligned pointmap", error=str(e))
            return None

    def _add_keyframe(self, gmap: GaussianMap, window: KeyframeWindow, latest: Keyframe,
                      pair: PairPointmaps, frame: FrameObservation, pose: Pose, xr_n: Pointmap,
                      K: CameraIntrinsics, ordinal: int, artifacts: RunArtifacts, out: Path) -> Keyframe:
        cfg = self.config
        n = frame.index
        alignment = self._align(xr_n, pair, latest, gmap, K)
        aligned = alignment.aligned if alignment is not None else None
        if alignment is not None and cfg.alignment.debug_dump and alignment.trace:
            self.aligner.dump_trace(alignment, out / "alignment" / f"{n:06d}.csv")

        replaced = 0.0
        merged = xr_n
        if aligned is not None:
            epsilon = cfg.mapping.epsilon_m if cfg.ablation.use_replacement else np.inf
            merged, replaced = replace_points(xr_n, aligned, epsilon)
        inserted = self.mapper.insert_keyframe_gaussians(gmap, merged, pose, frame.image, K,
                                                         keyframe=ordinal, seed=_seed(cfg.seed, n))

        keyframe = Keyframe(
            frame_id=n, pose=pose, image=frame.image, aligned=aligned,
            visible=self.keyframer.visible_set(gmap, pose, K),
            median_depth=merged.median_depth() or latest.median_depth,
            scale=alignment.scale if alignment is not None else None,
            used_remedy=alignment.used_remedy if alignment is not None else False,
        )
        self.scene.record_observations(gmap, keyframe.visible)
        self.keyframer.update_window(window, keyframe)
        fit = self.mapper.optimize_window(gmap, window.keyframes, K, use_geometry=cfg.ablation.use_geometry_loss)
        self.scene.prune(gmap, current_keyframe=ordinal)

        artifacts.keyframes.append(KeyframeRecord(frame=n, median_depth=keyframe.median_depth,
                                                  visible=len(keyframe.visible)))
        artifacts.mapping.append(MappingRecord(
            keyframe=n, scale=keyframe.scale, used_remedy=keyframe.used_remedy,
            alignment_failed=alignment is None, replaced_fraction=replaced, inserted=inserted,
            gaussians=len(gmap), window=" ".join(str(i) for i in window.frame_ids()),
            loss_photometric=fit.final.photometric, loss_geometric=fit.final.geometric,
            loss_isotropic=fit.final.isotropic, loss_total=fit.final.total,
        ))
        logger.info("Keyframe added", frame=n, scale=keyframe.scale, remedy=keyframe.used_remedy,
                    replaced=replaced, inserted=inserted, gaussians=len(gmap), window=len(window))
        return keyframe

    def _check_failures(self, done: int, artifacts: RunArtifacts, timestamps, out: Path, final: bool) -> None:
        cfg = self.config
        tracked = max(done - 1, 1)
        ratio = self.hard_failures / tracked
        if (final or done >= cfg.failure_check_after) and ratio > cfg.max_failure_ratio:
            artifacts.hard_failures = self.hard_failures
            self._write_artifacts(artifacts, timestamps, out)
            logger.error("Tracking failed on too many frames", failures=self.hard_failures, frames=tracked)
            raise TrackingFailureError(
                f"Hard tracking failure on {self.hard_failures} of {tracked} frames "
                f"(limit {cfg.max_failure_ratio:.0%})"
            )

    def _write_artifacts(self, artifacts: RunArtifacts, timestamps, out: Path) -> None:
        write_poses_csv(out / "poses.csv", artifacts.poses)
        write_tum(out / "est_traj.txt", timestamps[: len(artifacts.poses)], artifacts.poses)
        _write_records(out / "tracking.csv", artifacts.tracking, TrackingRecord)
        _write_records(out / "mapping.csv", artifacts.mapping, MappingRecord)
        _write_records(out / "keyframes.csv", artifacts.keyframes, KeyframeRecord)
        save_map(artifacts.gmap, out / "map.gsm")
        write_config_file(out / "config.txt", self.config)


ABLATIONS = {
    "full": {},
    "no_pape": {"use_pape": False},
    "provider_points": {"pnp_point_source": PointSourceEnum.PROVIDER.value},
    "no_scale_alignment": {"use_scale_alignment": False},
    "no_replacement": {"use_replacement": False},
    "no_geometry_loss": {"use_geometry_loss": False},
}


def run_ablation(dataset: Dataset, config: PipelineConfig, out_dir,
                 variants: Optional[Sequence[str]] = None) -> List[AblationRow]:
    """Run the full system and each single ablation; writes ablation.csv"""
    out = Path(out_dir)
    names = list(variants) if variants else list(ABLATIONS)
    unknown = [name for name in names if name not in ABLATIONS]
    if unknown:
        raise UsageError(f"Unknown ablation variants: {', '.join(unknown)}")
    gt = dataset.gt_poses()
    if gt is None:
        raise UsageError("Ablation needs a dataset with a ground-truth trajectory")

    rows = []
    for name in names:
        variant_config = config.with_overrides(ablation=ABLATIONS[name])
        service = SlamService(variant_config)
        try:
            artifacts = service.run(dataset, out / name)
        except TrackingFailureError as e:
            logger.warning("Ablation variant aborted", variant=name, error=str(e))
            rows.append(AblationRow(variant=name, ate_sim3=float("nan"), ate_se3=float("nan"),
                                    keyframes=0, hard_failures=service.hard_failures))
            continue
        pair = TrajectoryPair(artifacts.poses, gt[: len(artifacts.poses)])
        rows.append(AblationRow(variant=name, ate_sim3=ate(pair, "sim3").rmse, ate_se3=ate(pair, "se3").rmse,
                                keyframes=len(artifacts.keyframe_ids), hard_failures=artifacts.hard_failures))
        logger.info("Ablation variant done", variant=name, ate_sim3=rows[-1].ate_sim3)

    _write_records(out / "ablation.csv", rows, AblationRow)
    return rows
