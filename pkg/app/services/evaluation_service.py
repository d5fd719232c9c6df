"""
Evaluation service: ATE RMSE with similarity or rigid alignment, PSNR, SSIM and run reports
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import structlog  # noqa: E402
from scipy.ndimage import gaussian_filter  # noqa: E402

from app.core.config import read_config_file  # noqa: E402
from app.core.exceptions import ArtifactIOError, IngestionError  # noqa: E402
from app.core.trajectory_io import read_tum  # noqa: E402
from app.models.pose import Pose  # noqa: E402
from app.rendering.splatting import SplatRenderer  # noqa: E402
from app.schemas.config import RenderSettings  # noqa: E402
from app.schemas.records import EvaluationSummary, FrameMetricRow  # noqa: E402
from app.services.scene_service import load_map  # noqa: E402
from app.services.simulation_service import Dataset  # noqa: E402

logger = structlog.get_logger()

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_COLLINEAR_TOLERANCE = 1e-9


@dataclass
class TrajectoryPair:
    """Index-aligned estimated and ground-truth world -> camera poses"""

    estimated: List[Pose]
    ground_truth: List[Pose]

    def __post_init__(self):
        if len(self.estimated) != len(self.ground_truth):
            raise ValueError(f"Trajectories differ in length: {len(self.estimated)} vs {len(self.ground_truth)}")
        if len(self.estimated) < 2:
            raise ValueError("Trajectories need at least two poses")

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        return (np.array([p.center() for p in self.estimated]),
                np.array([p.center() for p in self.ground_truth]))


@dataclass
class AteResult:
    rmse: float
    mode: str
    degenerate: bool
    aligned: np.ndarray


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Tuple[float, np.ndarray, np.ndarray]:
    """Least-squares (s, R, t) with dst ~ s * R @ src + t"""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rotation = u @ sign @ vt
    scale = 1.0
    if with_scale:
        var_s = float(np.sum(xs ** 2) / n)
        scale = float(np.trace(np.diag(d) @ sign) / var_s) if var_s > 0 else 1.0
    translation = mu_d - scale * rotation @ mu_s
    return scale, rotation, translation


def _is_degenerate(gt: np.ndarray) -> bool:
    distinct = np.unique(np.round(gt, 12), axis=0)
    if distinct.shape[0] < 3:
        return True
    sv = np.linalg.svd(gt - gt.mean(axis=0), compute_uv=False)
    return sv[1] <= _COLLINEAR_TOLERANCE * max(sv[0], 1e-300)


def ate(pair: TrajectoryPair, mode: str = "sim3") -> AteResult:
    """Align camera centers, then RMSE of the translation residuals"""
    if mode not in ("sim3", "se3"):
        raise ValueError(f"Unknown ATE mode {mode}")
    est, gt = pair.centers()
    degenerate = False
    if mode == "sim3" and _is_degenerate(gt):
        logger.warning("Degenerate trajectory for sim3 alignment, using se3", poses=len(gt))
        mode, degenerate = "se3", True
    scale, rotation, translation = umeyama(est, gt, with_scale=(mode == "sim3"))
    aligned = scale * est @ rotation.T + translation
    rmse = float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))
    return AteResult(rmse=rmse, mode=mode, degenerate=degenerate, aligned=aligned)


def ate_rmse(pair: TrajectoryPair, mode: str = "sim3") -> float:
    return ate(pair, mode).rmse


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio of [0, 1] images; inf for identical images"""
    if a.shape != b.shape:
        raise ValueError(f"Image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over 11x11 Gaussian windows fully inside the image, averaged over channels"""
    if a.shape != b.shape:
        raise ValueError(f"Image shapes differ: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]

    def blur(x):
        return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="reflect")

    r = SSIM_RADIUS
    crop = (slice(r, -r), slice(r, -r)) if min(a.shape[:2]) > 2 * r else (slice(None), slice(None))
    values = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mu_x, mu_y = blur(x), blur(y)
        var_x = blur(x * x) - mu_x ** 2
        var_y = blur(y * y) - mu_y ** 2
        cov = blur(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        values.append((num / den)[crop])
    return float(np.clip(np.mean(values), -1.0, 1.0))


def trajectory_length(poses: Sequence[Pose]) -> float:
    centers = np.array([p.center() for p in poses])
    return float(np.sum(np.linalg.norm(np.diff(centers, axis=0), axis=1))) if len(centers) > 1 else 0.0


def plot_trajectory(gt: np.ndarray, estimate: np.ndarray, keyframes: Sequence[int], path):
    """Top-down (x, z) plot of ground truth against the aligned estimate; returns the figure"""
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(gt[:, 0], gt[:, 2], color="black", linewidth=1.5, label="ground truth")
    ax.plot(estimate[:, 0], estimate[:, 2], color="tab:blue", linewidth=1.0, label="estimate")
    kf = [k for k in keyframes if 0 <= k < len(estimate)]
    if kf:
        ax.scatter(estimate[kf, 0], estimate[kf, 2], s=12, color="tab:red", label="keyframes", zorder=3)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    try:
        fig.savefig(Path(path), format="svg", bbox_inches="tight")
    except OSError as e:
        plt.close(fig)
        logger.error("Failed to write trajectory plot", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write trajectory plot", path) from e
    return fig


def read_keyframe_ids(path) -> List[int]:
    path = Path(path)
    if not path.exists():
        raise IngestionError("Missing keyframe list", path)
    try:
        frame = pd.read_csv(path)
    except (ValueError, pd.errors.ParserError) as e:
        raise IngestionError(f"Malformed keyframe list ({e})", path) from e
    if "frame" not in frame.columns:
        raise IngestionError("Keyframe list needs a 'frame' column", path)
    return [int(v) for v in frame["frame"]]


class EvaluationService:
    """Metrics for a finished run against its dataset"""

    def __init__(self, render_settings: Optional[RenderSettings] = None):
        self.render_settings = render_settings

    def evaluate_run(self, dataset_dir, run_dir, out_dir=None) -> EvaluationSummary:
        """Write report.csv, summary.txt and trajectory.svg; returns the summary"""
        run = Path(run_dir)
        out = Path(out_dir) if out_dir is not None else run
        dataset = Dataset(dataset_dir)
        if not dataset.has_ground_truth:
            raise IngestionError("Evaluation needs a ground-truth trajectory", Path(dataset_dir) / "gt_traj.txt")

        _, estimated = read_tum(run / "est_traj.txt")
        keyframes = read_keyframe_ids(run / "keyframes.csv")
        map_path = run / "map.gsm"
        if not map_path.exists():
            raise IngestionError("Missing map checkpoint", map_path)
        gmap = load_map(map_path)

        gt = dataset.gt_poses()
        n = len(estimated)
        if n > len(gt):
            raise IngestionError(f"Run has {n} poses, dataset only {len(gt)}", run / "est_traj.txt")
        pair = TrajectoryPair(estimated, gt[:n])

        settings = self.render_settings
        if settings is None:
            config_path = run / "config.txt"
            settings = read_config_file(config_path).render if config_path.exists() else RenderSettings()
        renderer = SplatRenderer(settings)

        key_set = set(keyframes)
        rows = []
        for index in range(n):
            if index in key_set:
                continue
            frame = dataset[index]
            rendered = renderer.render(gmap, estimated[index], dataset.intrinsics)
            color = np.clip(rendered.color, 0.0, 1.0)
            rows.append(FrameMetricRow(frame=index, psnr=psnr(color, frame.image), ssim=ssim(color, frame.image)))

        sim3 = ate(pair, "sim3")
        se3 = ate(pair, "se3")
        summary = EvaluationSummary(
            frames=n,
            keyframes=len(key_set),
            evaluated_frames=len(rows),
            ate_sim3=sim3.rmse,
            ate_se3=se3.rmse,
            ate_sim3_degenerate=sim3.degenerate,
            psnr_mean=float(np.mean([r.psnr for r in rows])) if rows else None,
            ssim_mean=float(np.mean([r.ssim for r in rows])) if rows else None,
            trajectory_length=trajectory_length(gt[:n]),
        )

        self._write_report(out, rows, summary)
        _, gt_centers = pair.centers()
        fig = plot_trajectory(gt_centers, sim3.aligned, sorted(key_set), out / "trajectory.svg")
        plt.close(fig)
        logger.info("Run evaluated", ate_sim3=summary.ate_sim3, ate_se3=summary.ate_se3,
                    psnr=summary.psnr_mean, frames=len(rows))
        return summary

    @staticmethod
    def _write_report(out: Path, rows: List[FrameMetricRow], summary: EvaluationSummary) -> None:
        report = pd.DataFrame([r.model_dump() for r in rows], columns=list(FrameMetricRow.model_fields))
        lines = [f"{key}: {value}" for key, value in summary.model_dump().items()]
        try:
            out.mkdir(parents=True, exist_ok=True)
            report.to_csv(out / "report.csv", index=False, float_format="%.6f")
            (out / "summary.txt").write_text("\n".join(lines) + "\n")
        except OSError as e:
            logger.error("Failed to write report", path=str(out), error=str(e))
            raise ArtifactIOError("Cannot write evaluation report", out) from e
