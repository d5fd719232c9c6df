"""
Simulation service: textured room scenes, camera paths and dataset I/O with exact ground truth
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import cv2
import numpy as np
import structlog
from scipy.spatial.transform import Rotation

from app.core.binary_io import read_depth, write_depth
from app.core.exceptions import ArtifactIOError, IngestionError, UsageError
from app.core.trajectory_io import read_tum, write_tum
from app.geometry.camera import pixel_grid
from app.models.camera import CameraIntrinsics
from app.models.frame import FrameObservation
from app.models.pose import Pose
from app.schemas.config import CameraSpec, SimSceneSpec, TrajectoryKindEnum, TrajectorySpec

logger = structlog.get_logger()

FRAME_RATE = 30.0
ROOM_LO = np.array([-3.0, -2.0, -3.0])
ROOM_HI = np.array([3.0, 1.2, 4.0])
MAX_STEP_ROTATION_DEG = 10.0
MAX_STEP_TRANSLATION_FRACTION = 0.05
_ROOM_MARGIN = 0.5
_OBJECT_CLEARANCE = 0.6
_PLACEMENT_ATTEMPTS = 1000


@dataclass
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = (origin - self.center) / self.radii
        d = dirs / self.radii
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * d @ o
        c = o @ o - 1.0
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        t = np.full(dirs.shape[0], np.inf)
        root = np.sqrt(np.where(hit, disc, 0.0))
        near = (-b - root) / (2.0 * a)
        t[hit & (near > 0)] = near[hit & (near > 0)]
        return t


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - origin) / dirs
            t2 = (self.hi - origin) / dirs
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (t_near <= t_far) & (t_near > 0)
        return np.where(hit, t_near, np.inf)


@dataclass
class SyntheticScene:
    """Closed room with ellipsoids and boxes; every surface carries a procedural texture.

    Surface ids: 0-5 room faces (axis * 2 + positive side), 6+ objects in order.
    """

    objects: List[object] = field(default_factory=list)
    texture_frequency: float = 6.0
    seed: int = 0
    base_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    phases: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def extent(self) -> float:
        return float(np.linalg.norm(ROOM_HI - ROOM_LO))

    def trace(self, origin: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Ray parameter and surface id of the first hit along ``origin + t * dirs``"""
        origin = np.asarray(origin, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_axes = np.where(dirs > 0, (ROOM_HI - origin) / dirs,
                              np.where(dirs < 0, (ROOM_LO - origin) / dirs, np.inf))
        axis = np.argmin(t_axes, axis=1)
        t = t_axes[np.arange(dirs.shape[0]), axis]
        surface = 2 * axis + (dirs[np.arange(dirs.shape[0]), axis] > 0)

        for k, obj in enumerate(self.objects):
            t_obj = obj.intersect(origin, dirs)
            closer = t_obj < t
            t = np.where(closer, t_obj, t)
            surface = np.where(closer, 6 + k, surface)
        return t, surface

    def shade(self, points: np.ndarray, surface: np.ndarray) -> np.ndarray:
        """Procedural texture color in [0, 1] at world points on the given surfaces"""
        phase = self.phases[surface]
        pattern = 0.7 * _octave(points, self.texture_frequency, phase) \
            + 0.3 * _octave(points, 2.7 * self.texture_frequency, 2.0 * phase)
        return np.clip(self.base_colors[surface] * (0.35 + 0.65 * pattern[:, None]), 0.0, 1.0)

    def render_view(self, pose: Pose, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
        """RGB image and camera-z depth seen from a world -> camera pose"""
        i, j = pixel_grid(K)
        rays = np.stack([(i - K.cx) / K.fx, (j - K.cy) / K.fy, np.ones_like(i)], axis=-1).reshape(-1, 3)
        c2w = pose.inverse()
        dirs = rays @ c2w.rotation.T
        # rays have unit camera z, so the ray parameter is the depth
        t, surface = self.trace(c2w.translation, dirs)
        points = c2w.translation + t[:, None] * dirs
        image = self.shade(points, surface).reshape(K.height, K.width, 3)
        return image, t.reshape(K.height, K.width)


def _octave(points: np.ndarray, frequency: float, phase: np.ndarray) -> np.ndarray:
    s = np.sin(frequency * points + phase)
    mixed = s[:, 0] * s[:, 1] + s[:, 1] * s[:, 2] + s[:, 2] * s[:, 0]
    return 0.5 + mixed / 6.0


def make_intrinsics(spec: CameraSpec) -> CameraIntrinsics:
    """Square-pixel pinhole with the principal point at the image center"""
    fx = 0.5 * spec.width / np.tan(0.5 * np.radians(spec.fov_deg))
    return CameraIntrinsics(fx=fx, fy=fx, cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
                            width=spec.width, height=spec.height)


def _yaw_rotation(yaw: float) -> np.ndarray:
    return Rotation.from_euler("y", yaw).as_matrix()


def make_trajectory(spec: TrajectorySpec) -> List[Pose]:
    """World -> camera poses; yaw about the vertical axis, camera starting at the origin looking +z"""
    n = spec.frames
    turn = np.radians(spec.turn_angle)
    s = np.arange(n, dtype=np.float64)

    if spec.kind == TrajectoryKindEnum.FIGURE_EIGHT:
        phase = 2.0 * np.pi * s / n
        amplitude = spec.speed * n / (2.0 * np.pi * 1.2)
        positions = np.stack([amplitude * np.sin(phase), np.zeros(n),
                              amplitude * np.sin(phase) * np.cos(phase)], axis=1)
        yaws = 0.5 * turn * np.sin(phase)
    else:
        if spec.kind == TrajectoryKindEnum.STRAIGHT:
            yaws = np.zeros(n)
        elif spec.kind == TrajectoryKindEnum.ARC:
            yaws = turn * s / max(n - 1, 1)
        else:
            # straight, a turn over the middle fifth, straight again
            start, stop = 0.4 * (n - 1), 0.6 * (n - 1)
            yaws = turn * np.clip((s - start) / max(stop - start, 1.0), 0.0, 1.0)
        headings = np.stack([np.sin(yaws), np.zeros(n), np.cos(yaws)], axis=1)
        steps = np.vstack([np.zeros((1, 3)), spec.speed * headings[:-1]])
        positions = np.cumsum(steps, axis=0)

    _check_trajectory(positions, yaws)
    return [Pose(_yaw_rotation(yaw), p).inverse() for p, yaw in zip(positions, yaws)]


def _check_trajectory(positions: np.ndarray, yaws: np.ndarray) -> None:
    extent = float(np.linalg.norm(ROOM_HI - ROOM_LO))
    if len(positions) > 1:
        rot_steps = np.degrees(np.abs(np.diff(yaws)))
        trans_steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        if rot_steps.max() > MAX_STEP_ROTATION_DEG:
            raise UsageError(f"Trajectory rotates {rot_steps.max():.2f} deg per frame, limit is 10")
        if trans_steps.max() > MAX_STEP_TRANSLATION_FRACTION * extent:
            raise UsageError(f"Trajectory moves {trans_steps.max():.3f} per frame, limit is 5% of the scene")
    if np.any(positions < ROOM_LO + _ROOM_MARGIN) or np.any(positions > ROOM_HI - _ROOM_MARGIN):
        raise UsageError("Trajectory leaves the room; reduce frames or speed")


def make_scene(spec: SimSceneSpec, camera_centers: np.ndarray, seed: Optional[int] = None) -> SyntheticScene:
    """Random objects kept clear of the camera path, plus per-surface colors and phases"""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    objects: List[object] = []
    lo, hi = ROOM_LO + _ROOM_MARGIN, ROOM_HI - _ROOM_MARGIN
    for k in range(spec.n_objects):
        for _ in range(_PLACEMENT_ATTEMPTS):
            center = rng.uniform(lo, hi)
            half = rng.uniform(0.2, 0.5, size=3)
            clearance = np.linalg.norm(camera_centers - center, axis=1).min()
            if clearance > half.max() + _OBJECT_CLEARANCE:
                break
        else:
            logger.warning("Object skipped, no free spot", object=k)
            continue
        objects.append(Ellipsoid(center, half) if k % 2 == 0 else Box(center - half, center + half))

    n_surfaces = 6 + len(objects)
    base_colors = rng.uniform(0.25, 1.0, size=(n_surfaces, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_surfaces, 3))
    return SyntheticScene(objects=objects, texture_frequency=spec.texture_frequency, seed=seed,
                          base_colors=base_colors, phases=phases)


def write_image(path, image: np.ndarray) -> None:
    """Write an RGB float image in [0, 1] as 8-bit PNG"""
    path = Path(path)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        written = cv2.imwrite(str(path), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR))
    except OSError as e:
        logger.error("Failed to write image", path=str(path), error=str(e))
        raise ArtifactIOError("Cannot write image", path) from e
    if not written:
        raise ArtifactIOError("Cannot write image", path)


def read_image(path) -> np.ndarray:
    """RGB float image in [0, 1]"""
    pixels = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if pixels is None:
        raise IngestionError("Cannot read image", path)
    return cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


class SimulationService:
    """Writes synthetic datasets"""

    def __init__(self, scene_spec: Optional[SimSceneSpec] = None,
                 trajectory_spec: Optional[TrajectorySpec] = None,
                 camera_spec: Optional[CameraSpec] = None):
        self.scene_spec = scene_spec or SimSceneSpec()
        self.trajectory_spec = trajectory_spec or TrajectorySpec()
        self.camera_spec = camera_spec or CameraSpec()

    def generate(self, out_dir, seed: Optional[int] = None) -> Path:
        """Write frames, GT depth, GT trajectory and intrinsics; deterministic under seed"""
        out = Path(out_dir)
        K = make_intrinsics(self.camera_spec)
        poses = make_trajectory(self.trajectory_spec)
        centers = np.array([p.center() for p in poses])
        scene = make_scene(self.scene_spec, centers, seed)
        logger.info("Generating dataset", path=str(out), frames=len(poses),
                    trajectory=self.trajectory_spec.kind.value, objects=len(scene.objects))

        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "intrinsics.txt").write_text(K.to_line() + "\n")
        except OSError as e:
            logger.error("Failed to create dataset", path=str(out), error=str(e))
            raise ArtifactIOError("Cannot create dataset directory", out) from e

        for index, pose in enumerate(poses):
            image, depth = scene.render_view(pose, K)
            write_image(out / "frames" / f"{index:06d}.png", image)
            write_depth(out / "depth" / f"{index:06d}.f32", depth)
        write_tum(out / "gt_traj.txt", np.arange(len(poses)) / FRAME_RATE, poses)
        return out


class Dataset:
    """Frames of a dataset directory, read lazily; ground truth only when present"""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise IngestionError("Dataset directory not found", self.root)

        intrinsics_path = self.root / "intrinsics.txt"
        if not intrinsics_path.exists():
            raise IngestionError("Missing intrinsics file", intrinsics_path)
        try:
            self.intrinsics = CameraIntrinsics.from_line(intrinsics_path.read_text().strip())
        except ValueError as e:
            raise IngestionError(f"Malformed intrinsics ({e})", intrinsics_path) from e

        self._frame_paths = sorted((self.root / "frames").glob("*.png"))
        if not self._frame_paths:
            raise IngestionError("No frames found", self.root / "frames")
        indices = [int(p.stem) if p.stem.isdigit() else -1 for p in self._frame_paths]
        if indices != list(range(len(indices))):
            raise IngestionError("Frames must be numbered 000000.png, 000001.png, ... without gaps",
                                 self.root / "frames")

        traj_path = self.root / "gt_traj.txt"
        self.timestamps = np.arange(len(self)) / FRAME_RATE
        self._gt_poses: Optional[List[Pose]] = None
        if traj_path.exists():
            timestamps, poses = read_tum(traj_path)
            if len(poses) != len(self):
                raise IngestionError(f"Trajectory has {len(poses)} poses for {len(self)} frames", traj_path)
            self.timestamps, self._gt_poses = timestamps, poses

    def __len__(self) -> int:
        return len(self._frame_paths)

    def __iter__(self) -> Iterator[FrameObservation]:
        for index in range(len(self)):
            yield self[index]

    def __getitem__(self, index: int) -> FrameObservation:
        if not 0 <= index < len(self):
            raise IndexError(index)
        image = read_image(self._frame_paths[index])
        if image.shape[:2] != self.intrinsics.shape:
            raise IngestionError(f"Image size {image.shape[:2]} differs from intrinsics", self._frame_paths[index])
        return FrameObservation(index=index, image=image, intrinsics=self.intrinsics,
                                timestamp=float(self.timestamps[index]), gt_pose=self.gt_pose(index))

    @property
    def has_ground_truth(self) -> bool:
        return self._gt_poses is not None

    def gt_poses(self) -> Optional[List[Pose]]:
        return None if self._gt_poses is None else list(self._gt_poses)

    def gt_pose(self, index: int) -> Optional[Pose]:
        return None if self._gt_poses is None else self._gt_poses[index]

    def gt_depth(self, index: int) -> np.ndarray:
        depth = read_depth(self.root / "depth" / f"{index:06d}.f32")
        if depth.shape != self.intrinsics.shape:
            raise IngestionError("Depth size differs from intrinsics", self.root / "depth")
        return depth


def load(root) -> Dataset:
    return Dataset(root)

