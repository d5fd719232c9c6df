"""
Pydantic schemas for every tunable of the engine
"""
from enum import Enum
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.exceptions import UsageError


def published(default, description: str, **kwargs):
    """Field whose default comes from the published method description"""
    return Field(default, description=description, json_schema_extra={"published": True}, **kwargs)


class ConfigBlock(BaseModel):
    """Base for config sections: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ProviderModeEnum(str, Enum):
    """Pointmap provider backends"""
    ORACLE = "oracle"
    FILES = "files"


class AlignmentStatisticEnum(str, Enum):
    """Scalar statistic used by patch alignment"""
    Z = "z"
    NORM = "norm"


class PointSourceEnum(str, Enum):
    """Where the 3D side of PnP correspondences comes from"""
    RENDERED = "rendered"
    PROVIDER = "provider"


class TrajectoryKindEnum(str, Enum):
    """Synthetic camera paths"""
    STRAIGHT = "straight"
    ARC = "arc"
    SHARP_TURN = "sharp-turn"
    FIGURE_EIGHT = "figure-eight"


class RenderSettings(ConfigBlock):
    """Splat rasterization settings"""
    blur: float = Field(0.3, ge=0.0, description="screen-space covariance dilation in px^2")
    alpha_min: float = Field(1e-8, gt=0.0, lt=1.0, description="smallest alpha a splat may contribute")
    transmittance_floor: float = Field(1e-4, ge=0.0, lt=1.0, description="blending stops once transmittance falls below")
    near: float = Field(0.01, gt=0.0, description="near plane in scene units")
    alpha_valid_threshold: float = Field(0.5, gt=0.0, le=1.0, description="accumulated opacity for a valid rendered pixel")
    visibility_floor: float = Field(1e-3, gt=0.0, description="blend weight for a primitive to count as visible")


class OracleConfig(ConfigBlock):
    """Synthetic stand-in for a pre-trained pointmap network"""
    scale_drift_per_frame: float = Field(1.0, gt=0.0, description="multiplicative scale drift per frame index")
    noise_sigma_rel: float = Field(0.0, ge=0.0, description="multiplicative point noise, fraction of depth")
    confidence_floor: float = Field(1.0, ge=0.0, description="confidence at depth discontinuities")
    confidence_ceiling: float = Field(3.0, ge=0.0, description="confidence on smooth surfaces")
    edge_sensitivity: float = Field(20.0, ge=0.0, description="how fast confidence decays with relative depth gradient")
    dropout_fraction: float = Field(0.0, ge=0.0, lt=1.0, description="fraction of pixels randomly invalidated")
    seed: int = Field(0, ge=0, description="oracle RNG seed")

    @model_validator(mode="after")
    def validate_confidence_range(self):
        if self.confidence_floor > self.confidence_ceiling:
            raise ValueError("confidence_floor must not exceed confidence_ceiling")
        return self


class ProviderSettings(ConfigBlock):
    """Pointmap provider selection"""
    mode: ProviderModeEnum = Field(ProviderModeEnum.ORACLE, description="oracle or files")
    directory: Optional[str] = Field(None, description="pointmap directory for files mode")
    confidence_threshold: float = Field(1.2, ge=0.0, description="minimum confidence for matching")

    @model_validator(mode="after")
    def validate_directory(self):
        if self.mode == ProviderModeEnum.FILES and not self.directory:
            raise ValueError("files mode needs a directory")
        return self


class TrackingConfig(ConfigBlock):
    """Pose estimation and photometric refinement"""
    refine_iterations: int = Field(10, ge=0, description="photometric refinement iterations per frame")
    lm_damping: float = Field(1e-3, gt=0.0, description="initial Levenberg-Marquardt damping relative to the Hessian diagonal")
    damping_factor: float = Field(10.0, gt=1.0, description="damping divisor after an accepted step, multiplier after a rejected one")
    ransac_px_threshold: float = Field(2.0, gt=0.0, description="inlier reprojection error in px")
    ransac_max_iterations: int = Field(500, ge=1, description="RANSAC iteration cap")
    ransac_confidence: float = Field(0.99, gt=0.0, lt=1.0, description="adaptive RANSAC early-exit confidence")
    edge_percentile: float = Field(75.0, ge=0.0, le=100.0, description="Sobel percentile marking edge pixels")
    edge_weight_floor: float = Field(0.2, ge=0.0, le=1.0, description="loss weight of non-edge pixels")


class AlignmentConfig(ConfigBlock):
    """Patch-based pointmap scale alignment"""
    patch_size: int = published(10, "patch edge P in pixels", ge=2)
    delta_mu: float = published(0.3, "relative tolerance on patch means", gt=0.0)
    delta_sigma: float = published(0.3, "relative tolerance on patch deviations", gt=0.0)
    epsilon_r: float = published(0.1, "normalized residual threshold for correct points", gt=0.0)
    max_iter: int = published(3, "alignment iterations", ge=1)
    tau: float = published(0.01, "minimum correct-point fraction", gt=0.0, lt=1.0)
    statistic: AlignmentStatisticEnum = Field(AlignmentStatisticEnum.Z, description="z or norm")
    stop_tolerance: float = Field(1e-4, gt=0.0, description="early stop when the step scale is this close to 1")
    debug_dump: bool = Field(False, description="write per-keyframe alignment traces")


class GaussianSettings(ConfigBlock):
    """Insertion and pruning of Gaussians"""
    keep_fraction: float = Field(1.0 / 16.0, gt=0.0, le=1.0, description="random sparse downsampling ratio")
    init_opacity: float = Field(0.5, gt=0.0, lt=1.0, description="opacity of inserted Gaussians")
    init_scale_factor: float = Field(1.0, gt=0.0, description="inserted scale in units of sampled pixel spacing")
    opacity_floor: float = Field(0.005, ge=0.0, lt=1.0, description="prune below this opacity")
    min_observations: int = Field(3, ge=0, description="prune old Gaussians seen fewer times")
    age_window: int = Field(3, ge=0, description="keyframes before the observation rule applies")


class MapOptimConfig(ConfigBlock):
    """Windowed joint optimization of map and keyframe poses"""
    alpha: float = published(0.98, "photometric weight against geometry", ge=0.0, le=1.0)
    lambda_iso: float = published(10.0, "isotropic regularization weight", ge=0.0)
    epsilon_m: float = published(0.15, "relative depth tolerance for keeping rendered points", gt=0.0)
    init_iterations: int = published(1000, "optimization steps on the first frame", ge=0)
    iterations: int = Field(60, ge=0, description="optimization steps per keyframe")
    lr_means: float = Field(1.6e-3, gt=0.0, description="mean learning rate, times scene extent")
    lr_quats: float = Field(1e-3, gt=0.0, description="rotation learning rate")
    lr_scales: float = Field(5e-3, gt=0.0, description="log-scale learning rate")
    lr_opacity: float = Field(5e-2, gt=0.0, description="opacity-logit learning rate")
    lr_colors: float = Field(2.5e-3, gt=0.0, description="color learning rate")
    lr_pose_rot: float = Field(3e-3, gt=0.0, description="keyframe rotation learning rate")
    lr_pose_trans: float = Field(1e-3, gt=0.0, description="keyframe translation learning rate")


class KeyframeConfig(ConfigBlock):
    """Covisibility keyframe selection"""
    k_iou: float = published(0.9, "add keyframe when covisibility IOU drops below", gt=0.0, le=1.0)
    k_dist: float = published(0.08, "add keyframe when translation exceeds this times median depth", gt=0.0)
    k_overlap: float = published(0.3, "drop window keyframes with overlap below", ge=0.0, le=1.0)
    window_size: int = published(8, "keyframe window capacity", ge=1)


class AblationConfig(ConfigBlock):
    """Component switches"""
    use_pape: bool = Field(True, description="seed refinement with pointmap-anchored PnP")
    pnp_point_source: PointSourceEnum = Field(PointSourceEnum.RENDERED, description="rendered or provider")
    use_scale_alignment: bool = Field(True, description="align provider pointmaps to the map scale")
    use_replacement: bool = Field(True, description="replace inconsistent rendered points")
    use_geometry_loss: bool = Field(True, description="supervise depth with aligned pointmaps")


class PipelineConfig(ConfigBlock):
    """Everything a run needs"""
    seed: int = Field(0, ge=0, description="global seed")
    checkpoint_every: int = Field(50, ge=1, description="frames between checkpoints")
    max_failure_ratio: float = Field(0.25, ge=0.0, le=1.0, description="abort above this tracking failure ratio")
    failure_check_after: int = Field(20, ge=1, description="frames before the failure ratio is enforced")
    render: RenderSettings = Field(default_factory=RenderSettings)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    provider: ProviderSettings = Field(default_factory=ProviderSettings)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    alignment: AlignmentConfig = Field(default_factory=AlignmentConfig)
    gaussians: GaussianSettings = Field(default_factory=GaussianSettings)
    mapping: MapOptimConfig = Field(default_factory=MapOptimConfig)
    keyframes: KeyframeConfig = Field(default_factory=KeyframeConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def validate_ablation(self):
        if not self.ablation.use_pape and self.ablation.pnp_point_source == PointSourceEnum.PROVIDER:
            raise ValueError("pnp_point_source only applies when use_pape is enabled")
        return self

    def check_image(self, width: int, height: int) -> None:
        """Cross-field checks that need the image size"""
        if self.alignment.patch_size > min(width, height):
            raise UsageError(
                f"alignment.patch_size={self.alignment.patch_size} exceeds image size {width}x{height}"
            )

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> "PipelineConfig":
        """Build from dotted keys such as ``alignment.patch_size``"""
        nested: Dict[str, Any] = {}
        for key, value in values.items():
            parts = key.strip().split(".")
            node = nested
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise UsageError(f"Config key {key} conflicts with a scalar key")
            node[parts[-1]] = value.strip() if isinstance(value, str) else value
        try:
            return cls.model_validate(nested)
        except ValidationError as e:
            raise UsageError(f"Invalid configuration: {e}") from e

    def to_flat(self) -> Dict[str, Any]:
        return {key: value for key, value, _, _ in self.describe(current=True)}

    def describe(self, current: bool = False) -> Iterator[Tuple[str, Any, bool, str]]:
        """Yield (dotted key, value, published default, description) for every leaf"""
        yield from _walk(self if current else type(self)(), "")

    def with_overrides(self, **sections: Dict[str, Any]) -> "PipelineConfig":
        """Copy with some section fields replaced, validated"""
        data = self.model_dump()
        for section, fields in sections.items():
            if isinstance(fields, dict):
                data[section].update(fields)
            else:
                data[section] = fields
        return type(self).model_validate(data)


def _walk(model: BaseModel, prefix: str) -> Iterator[Tuple[str, Any, bool, str]]:
    for name, info in type(model).model_fields.items():
        value = getattr(model, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            yield from _walk(value, f"{key}.")
            continue
        extra = info.json_schema_extra or {}
        if isinstance(value, Enum):
            value = value.value
        yield key, value, bool(extra.get("published")), info.description or ""


def config_help_lines() -> List[str]:
    """One line per config key for CLI help"""
    lines = []
    for key, value, is_published, description in PipelineConfig().describe():
        marker = " [published]" if is_published else ""
        lines.append(f"  {key} = {value}{marker}  {description}")
    return lines


class SimSceneSpec(ConfigBlock):
    """Synthetic room scene"""
    n_objects: int = Field(6, ge=0, le=32, description="ellipsoids and boxes placed in the room")
    texture_frequency: float = Field(6.0, gt=0.0, description="base frequency of procedural textures")
    seed: int = Field(0, ge=0)


class TrajectorySpec(ConfigBlock):
    """Synthetic camera path"""
    kind: TrajectoryKindEnum = TrajectoryKindEnum.STRAIGHT
    frames: int = Field(100, ge=2)
    speed: float = Field(0.01, gt=0.0, description="translation per frame in scene units")
    turn_angle: float = Field(90.0, ge=0.0, le=360.0, description="total yaw change in degrees")


class CameraSpec(ConfigBlock):
    """Synthetic camera"""
    width: int = Field(128, ge=8)
    height: int = Field(96, ge=8)
    fov_deg: float = Field(60.0, gt=10.0, lt=150.0, description="horizontal field of view")
