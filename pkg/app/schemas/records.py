"""
Pydantic schemas for rows of the CSV logs and reports
"""
from typing import Optional

from pydantic import BaseModel, Field


class AlignmentTraceRow(BaseModel):
    """One patch-alignment iteration"""
    iteration: int = Field(..., ge=0)
    candidate_patches: int = Field(..., ge=0)
    correct_points: int = Field(..., ge=0)
    scale: float = Field(..., gt=0)


class TrackingRecord(BaseModel):
    """Per-frame tracking log line; pose is world -> camera"""
    frame: int = Field(..., ge=0)
    inliers: int = Field(..., ge=0)
    iterations: int = Field(..., ge=0)
    loss: float
    fallback: bool = False
    qx: float
    qy: float
    qz: float
    qw: float
    tx: float
    ty: float
    tz: float


class MappingRecord(BaseModel):
    """Per-keyframe mapping log line"""
    keyframe: int = Field(..., ge=0)
    scale: Optional[float] = None
    used_remedy: bool = False
    alignment_failed: bool = False
    replaced_fraction: float = Field(0.0, ge=0.0, le=1.0)
    inserted: int = Field(0, ge=0)
    gaussians: int = Field(0, ge=0)
    window: str = ""
    loss_photometric: float = 0.0
    loss_geometric: float = 0.0
    loss_isotropic: float = 0.0
    loss_total: float = 0.0


class KeyframeRecord(BaseModel):
    """Keyframe list entry"""
    frame: int = Field(..., ge=0)
    median_depth: float = Field(..., ge=0)
    visible: int = Field(..., ge=0)


class FrameMetricRow(BaseModel):
    """Novel-view metrics of one non-keyframe"""
    frame: int = Field(..., ge=0)
    psnr: float
    ssim: float = Field(..., ge=-1.0, le=1.0)


class EvaluationSummary(BaseModel):
    """Run-level metrics"""
    frames: int = Field(..., ge=0)
    keyframes: int = Field(..., ge=0)
    evaluated_frames: int = Field(..., ge=0)
    ate_sim3: float = Field(..., ge=0)
    ate_se3: float = Field(..., ge=0)
    ate_sim3_degenerate: bool = False
    psnr_mean: Optional[float] = None
    ssim_mean: Optional[float] = None
    trajectory_length: float = Field(0.0, ge=0)
    lpips: str = "not computed (needs a pre-trained perceptual network)"


class AblationRow(BaseModel):
    """One variant of an ablation sweep"""
    variant: str
    ate_sim3: float
    ate_se3: float
    keyframes: int = Field(..., ge=0)
    hard_failures: int = Field(..., ge=0)
