"""
Synthetic scenes, camera paths and dataset reading
"""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.core.exceptions import IngestionError, UsageError
from app.core.trajectory_io import write_tum
from app.models.pose import Pose
from app.schemas.config import CameraSpec, SimSceneSpec, TrajectoryKindEnum, TrajectorySpec
from app.services.simulation_service import (
    FRAME_RATE, Box, Dataset, Ellipsoid, SimulationService, SyntheticScene, load, make_intrinsics,
    make_scene, make_trajectory, read_image, write_image,
)


def centers(poses):
    return np.array([p.center() for p in poses])


class TestIntrinsics:
    def test_center_and_fov(self):
        K = make_intrinsics(CameraSpec(width=64, height=48, fov_deg=90.0))
        assert K.fx == pytest.approx(32.0)
        assert K.fy == K.fx
        assert (K.cx, K.cy) == (31.5, 23.5)
        assert K.shape == (48, 64)


class TestTrajectory:
    def test_straight(self):
        poses = make_trajectory(TrajectorySpec(kind=TrajectoryKindEnum.STRAIGHT, frames=10, speed=0.1))
        assert len(poses) == 10
        assert poses[0].allclose(Pose.identity())
        np.testing.assert_allclose(np.diff(centers(poses), axis=0), np.tile([0.0, 0.0, 0.1], (9, 1)), atol=1e-12)

    def test_arc_turns_by_the_requested_angle(self):
        poses = make_trajectory(TrajectorySpec(kind=TrajectoryKindEnum.ARC, frames=20, speed=0.05, turn_angle=90.0))
        expected = Rotation.from_euler("y", 90.0, degrees=True).as_matrix()
        np.testing.assert_allclose(poses[-1].inverse().rotation, expected, atol=1e-12)
        steps = np.linalg.norm(np.diff(centers(poses), axis=0), axis=1)
        np.testing.assert_allclose(steps, 0.05)

    def test_figure_eight_returns_near_start(self):
        spec = TrajectorySpec(kind=TrajectoryKindEnum.FIGURE_EIGHT, frames=100, speed=0.01, turn_angle=90.0)
        path = centers(make_trajectory(spec))
        assert path.shape == (100, 3)
        np.testing.assert_allclose(path[0], 0.0, atol=1e-12)
        assert np.linalg.norm(path[-1] - path[0]) < 0.02
        assert np.ptp(path[:, 0]) > 0.1

    def test_sharp_turn_within_limits(self):
        poses = make_trajectory(TrajectorySpec(kind=TrajectoryKindEnum.SHARP_TURN, frames=60, speed=0.02))
        yaws = [Rotation.from_matrix(p.inverse().rotation).as_euler("yxz", degrees=True)[0] for p in poses]
        assert yaws[0] == pytest.approx(0.0)
        assert yaws[-1] == pytest.approx(90.0)

    def test_sharp_turn_too_fast(self):
        with pytest.raises(UsageError):
            make_trajectory(TrajectorySpec(kind=TrajectoryKindEnum.SHARP_TURN, frames=10, speed=0.02))

    def test_translation_limit(self):
        with pytest.raises(UsageError):
            make_trajectory(TrajectorySpec(kind=TrajectoryKindEnum.STRAIGHT, frames=3, speed=0.6))

    def test_leaving_the_room(self):
        with pytest.raises(UsageError):
            make_trajectory(TrajectorySpec(kind=TrajectoryKindEnum.STRAIGHT, frames=40, speed=0.1))


class TestScene:
    def test_empty_room_depth(self):
        scene = make_scene(SimSceneSpec(n_objects=0), np.zeros((1, 3)))
        K = make_intrinsics(CameraSpec(width=9, height=9, fov_deg=60.0))
        image, depth = scene.render_view(Pose.identity(), K)
        assert depth[4, 4] == pytest.approx(4.0)
        assert image.shape == (9, 9, 3)
        assert image.min() >= 0.0 and image.max() <= 1.0
        assert np.all(depth > 0.0) and np.all(np.isfinite(depth))

    def test_objects_keep_clear_of_the_path(self):
        path = centers(make_trajectory(TrajectorySpec(frames=50, speed=0.04)))
        scene = make_scene(SimSceneSpec(n_objects=8, seed=3), path)
        assert scene.objects
        for obj in scene.objects:
            if isinstance(obj, Ellipsoid):
                center, half = obj.center, obj.radii
            else:
                assert isinstance(obj, Box)
                center, half = 0.5 * (obj.lo + obj.hi), 0.5 * (obj.hi - obj.lo)
            assert np.linalg.norm(path - center, axis=1).min() > half.max()

    def test_seeded(self):
        a = make_scene(SimSceneSpec(n_objects=4, seed=5), np.zeros((1, 3)))
        b = make_scene(SimSceneSpec(n_objects=4, seed=5), np.zeros((1, 3)))
        np.testing.assert_array_equal(a.base_colors, b.base_colors)
        assert len(a.objects) == len(b.objects)
        assert isinstance(a, SyntheticScene)


class TestDataset:
    def test_generated_dataset(self, tiny_dataset):
        dataset = Dataset(tiny_dataset)
        assert len(dataset) == 6
        assert dataset.has_ground_truth
        frame = dataset[2]
        assert frame.image.shape == (30, 40, 3)
        assert frame.timestamp == pytest.approx(2 / FRAME_RATE)
        assert dataset.gt_pose(0).allclose(Pose.identity())
        np.testing.assert_allclose(dataset.gt_pose(3).center(), [0.0, 0.0, 0.09], atol=1e-9)
        depth = dataset.gt_depth(2)
        assert depth.shape == (30, 40)
        assert np.all(depth > 0.0)
        with pytest.raises(IndexError):
            dataset[6]

    def test_generation_is_deterministic(self, tmp_path):
        spec = (SimSceneSpec(n_objects=2, seed=11), TrajectorySpec(frames=3, speed=0.05),
                CameraSpec(width=16, height=12))
        a = SimulationService(*spec).generate(tmp_path / "a")
        b = SimulationService(*spec).generate(tmp_path / "b")
        for name in ("frames/000002.png", "depth/000001.f32", "gt_traj.txt", "intrinsics.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_image_roundtrip(self, tmp_path, rng):
        image = rng.uniform(0.0, 1.0, size=(5, 7, 3))
        write_image(tmp_path / "x.png", image)
        np.testing.assert_allclose(read_image(tmp_path / "x.png"), image, atol=0.5 / 255 + 1e-12)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(IngestionError):
            Dataset(tmp_path / "nope")

    def test_missing_intrinsics(self, tmp_path):
        with pytest.raises(IngestionError):
            Dataset(tmp_path)

    def test_no_frames(self, tmp_path):
        (tmp_path / "intrinsics.txt").write_text(make_intrinsics(CameraSpec(width=8, height=8)).to_line())
        with pytest.raises(IngestionError):
            Dataset(tmp_path)

    def test_frame_gap(self, tmp_path):
        (tmp_path / "intrinsics.txt").write_text(make_intrinsics(CameraSpec(width=8, height=8)).to_line())
        write_image(tmp_path / "frames" / "000000.png", np.zeros((8, 8, 3)))
        write_image(tmp_path / "frames" / "000002.png", np.zeros((8, 8, 3)))
        with pytest.raises(IngestionError):
            Dataset(tmp_path)

    def test_image_size_mismatch(self, tmp_path):
        (tmp_path / "intrinsics.txt").write_text(make_intrinsics(CameraSpec(width=8, height=8)).to_line())
        write_image(tmp_path / "frames" / "000000.png", np.zeros((10, 8, 3)))
        dataset = Dataset(tmp_path)
        assert not dataset.has_ground_truth
        assert dataset.gt_pose(0) is None
        with pytest.raises(IngestionError):
            dataset[0]

    def test_trajectory_length_mismatch(self, tmp_path):
        (tmp_path / "intrinsics.txt").write_text(make_intrinsics(CameraSpec(width=8, height=8)).to_line())
        for k in range(2):
            write_image(tmp_path / "frames" / f"{k:06d}.png", np.zeros((8, 8, 3)))
        write_tum(tmp_path / "gt_traj.txt", [0.0], [Pose.identity()])
        with pytest.raises(IngestionError):
            Dataset(tmp_path)

    def test_load_without_trajectory(self, tmp_path, tiny_dataset):
        (tmp_path / "frames").mkdir()
        (tmp_path / "intrinsics.txt").write_text((tiny_dataset / "intrinsics.txt").read_text())
        for k in range(2):
            name = f"frames/{k:06d}.png"
            (tmp_path / name).write_bytes((tiny_dataset / name).read_bytes())
        frames = list(load(tmp_path))
        assert [f.index for f in frames] == [0, 1]
        assert all(f.gt_pose is None for f in frames)
        np.testing.assert_array_equal(frames[1].image, Dataset(tiny_dataset)[1].image)
        assert frames[0].intrinsics == Dataset(tiny_dataset).intrinsics
