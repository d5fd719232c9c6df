"""
Frame loop, run artifacts and ablations
"""
import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import TrackingFailureError, UsageError
from app.core.trajectory_io import read_tum
from app.models.frame import FrameObservation
from app.models.keyframe import Keyframe
from app.models.pointmap import Pointmap
from app.models.pose import Pose
from app.schemas.config import CameraSpec, PipelineConfig, SimSceneSpec, TrajectoryKindEnum, TrajectorySpec
from app.services.evaluation_service import EvaluationService, TrajectoryPair, ate
from app.services.pointmap_service import PairPointmaps
from app.services.scene_service import load_map
from app.services.simulation_service import Dataset, SimulationService
from app.services.slam_service import ABLATIONS, SlamService, run_ablation
from app.services.tracking_service import TrackingResult


@pytest.fixture
def quick_config():
    return PipelineConfig.from_flat({
        "mapping.init_iterations": "3",
        "mapping.iterations": "2",
        "tracking.refine_iterations": "2",
        "checkpoint_every": "3",
    })


def ground_truth_tracker(dataset):
    gt = dataset.gt_poses()

    def track(gmap, keyframe_pose, anchor, matches, image, K, history, **kwargs):
        return TrackingResult(pose=gt[len(history)], inlier_count=10, refinement_iterations=1, loss_trace=[0.1])
    return track


class TestRunGuards:
    def test_needs_two_frames(self, mocker, tmp_path):
        dataset = mocker.MagicMock()
        dataset.__len__.return_value = 1
        with pytest.raises(UsageError):
            SlamService().run(dataset, tmp_path)

    def test_unknown_ablation(self, mocker, tmp_path):
        with pytest.raises(UsageError):
            run_ablation(mocker.MagicMock(), PipelineConfig(), tmp_path, ["full", "bogus"])

    def test_ablation_needs_ground_truth(self, mocker, tmp_path):
        dataset = mocker.MagicMock()
        dataset.gt_poses.return_value = None
        with pytest.raises(UsageError):
            run_ablation(dataset, PipelineConfig(), tmp_path, ["full"])

    def test_every_ablation_is_a_valid_config(self):
        for name, overrides in ABLATIONS.items():
            config = PipelineConfig().with_overrides(ablation=overrides)
            dumped = config.ablation.model_dump(mode="json")
            assert all(dumped[key] == value for key, value in overrides.items()), name


class TestRun:
    def test_artifacts_with_exact_tracking(self, tiny_dataset, tmp_path, quick_config, mocker):
        dataset = Dataset(tiny_dataset)
        service = SlamService(quick_config)
        mocker.patch.object(service.tracker, "track", side_effect=ground_truth_tracker(dataset))

        artifacts = service.run(dataset, tmp_path / "run")

        out = tmp_path / "run"
        for name in ("poses.csv", "est_traj.txt", "tracking.csv", "mapping.csv", "keyframes.csv",
                     "map.gsm", "config.txt", "checkpoints/map_000002.gsm", "checkpoints/traj_000005.txt"):
            assert (out / name).exists(), name
        assert artifacts.poses[0].allclose(Pose.identity())
        assert artifacts.keyframe_ids[0] == 0
        assert artifacts.hard_failures == 0
        assert len(artifacts.poses) == 6

        _, written = read_tum(out / "est_traj.txt")
        assert all(a.allclose(b, atol=1e-9) for a, b in zip(written, artifacts.poses))
        tracking = pd.read_csv(out / "tracking.csv")
        assert list(tracking["frame"]) == [1, 2, 3, 4, 5]
        mapping = pd.read_csv(out / "mapping.csv")
        assert list(mapping["keyframe"]) == artifacts.keyframe_ids
        assert len(load_map(out / "map.gsm")) == len(artifacts.gmap)
        assert "mapping.init_iterations = 3" in (out / "config.txt").read_text()

    def test_non_keyframe_poses_are_tracked_poses(self, tiny_dataset, tmp_path, quick_config, mocker):
        dataset = Dataset(tiny_dataset)
        service = SlamService(quick_config)
        mocker.patch.object(service.tracker, "track", side_effect=ground_truth_tracker(dataset))
        artifacts = service.run(dataset, tmp_path / "run")
        for n, pose in enumerate(artifacts.poses):
            if n not in artifacts.keyframe_ids:
                assert pose.allclose(dataset.gt_pose(n))

    def test_frames_reach_tracking_without_ground_truth(self, tiny_dataset, tmp_path, quick_config, mocker):
        dataset = Dataset(tiny_dataset)
        service = SlamService(quick_config)
        track = mocker.patch.object(service.tracker, "track", side_effect=ground_truth_tracker(dataset))
        tracked = mocker.spy(service, "_track")
        service.run(dataset, tmp_path / "run")
        assert track.call_count == 5
        for call in tracked.call_args_list:
            assert call.args[3].gt_pose is None

    def test_too_many_tracking_failures(self, tiny_dataset, tmp_path, quick_config, mocker):
        config = quick_config.with_overrides(failure_check_after=2)
        service = SlamService(config)
        mocker.patch.object(service.tracker, "track",
                            return_value=TrackingResult(pose=Pose.identity(), fallback=True))

        with pytest.raises(TrackingFailureError):
            service.run(Dataset(tiny_dataset), tmp_path / "run")

        _, written = read_tum(tmp_path / "run" / "est_traj.txt")
        assert len(written) == 2
        assert bool(pd.read_csv(tmp_path / "run" / "tracking.csv")["fallback"].iloc[0])

    def test_tracking_ignores_provider_scale(self, make_map, intrinsics, mocker):
        service = SlamService()
        mocker.patch.object(service.tracker, "refine_pose",
                            side_effect=lambda gmap, init, image, K: TrackingResult(pose=init))
        gmap = make_map(120, log_scale=(-1.5, -1.0), opacity=(0.8, 0.95))
        latest = Keyframe(frame_id=0, pose=Pose.identity(), image=np.zeros((24, 32, 3)), aligned=None)
        rendered = service.renderer.render_pointmap(gmap, Pose.identity(), intrinsics)
        rows, cols = np.nonzero(rendered.valid)
        assert rows.size >= 20
        matches = np.column_stack([cols, rows, cols, rows]).astype(np.float64)
        frame = FrameObservation(index=1, image=np.zeros((24, 32, 3)), intrinsics=intrinsics)

        poses = []
        for scale in (1.0, 7.5):
            provider_points = Pointmap.from_points(rendered.points * scale + np.array([0.0, 0.0, 1e-3]))
            pair = PairPointmaps(pm_a=provider_points, pm_b=provider_points, pm_b_local=provider_points,
                                 matches=matches, provenance="test", scale=scale)
            poses.append(service._track(gmap, latest, pair, frame, intrinsics, [Pose.identity()], 1).pose)

        assert poses[0].allclose(poses[1], atol=1e-9)
        assert poses[0].allclose(Pose.identity(), atol=1e-6)


@pytest.mark.slow
class TestEndToEnd:
    def test_full_run_is_deterministic(self, tiny_dataset, tmp_path):
        config = PipelineConfig.from_flat({"mapping.init_iterations": "100", "mapping.iterations": "20",
                                           "max_failure_ratio": "1.0"})
        first = SlamService(config).run(Dataset(tiny_dataset), tmp_path / "a")
        second = SlamService(config).run(Dataset(tiny_dataset), tmp_path / "b")

        assert first.poses[0].allclose(Pose.identity())
        assert (tmp_path / "a" / "est_traj.txt").read_bytes() == (tmp_path / "b" / "est_traj.txt").read_bytes()
        assert first.keyframe_ids == second.keyframe_ids
        assert len(first.gmap) > 0

    def test_ablation_table(self, tiny_dataset, tmp_path):
        config = PipelineConfig.from_flat({"mapping.init_iterations": "20", "mapping.iterations": "5",
                                           "max_failure_ratio": "1.0"})
        rows = run_ablation(Dataset(tiny_dataset), config, tmp_path, ["full", "no_replacement"])
        assert [r.variant for r in rows] == ["full", "no_replacement"]
        table = pd.read_csv(tmp_path / "ablation.csv")
        assert list(table["variant"]) == ["full", "no_replacement"]
        assert np.all(np.isfinite(table["ate_se3"]))


def simulated(tmp_path_factory, name, frames):
    root = tmp_path_factory.mktemp(name)
    service = SimulationService(
        SimSceneSpec(seed=3),
        TrajectorySpec(kind=TrajectoryKindEnum.SHARP_TURN, frames=frames, speed=0.01),
        CameraSpec(width=128, height=96),
    )
    return service.generate(root)


@pytest.fixture(scope="module")
def sharp_turn_100(tmp_path_factory):
    return simulated(tmp_path_factory, "sharp_turn_100", 100)


@pytest.fixture(scope="module")
def sharp_turn_200(tmp_path_factory):
    return simulated(tmp_path_factory, "sharp_turn_200", 200)


def run_sim3_ate(dataset_dir, out_dir, **values) -> float:
    """Sim(3) ATE of one pipeline run configured with dotted keys"""
    dataset = Dataset(dataset_dir)
    config = PipelineConfig.from_flat({"max_failure_ratio": 1.0, **values})
    artifacts = SlamService(config).run(dataset, out_dir)
    pair = TrajectoryPair(artifacts.poses, dataset.gt_poses()[: len(artifacts.poses)])
    return ate(pair, "sim3").rmse


@pytest.mark.slow
class TestAccuracy:
    def test_provider_scale_drift_does_not_reach_the_trajectory(self, sharp_turn_100, tmp_path):
        steady = run_sim3_ate(sharp_turn_100, tmp_path / "steady")
        drifting = run_sim3_ate(sharp_turn_100, tmp_path / "drifting", **{"oracle.scale_drift_per_frame": 1.02})
        provider_points = run_sim3_ate(sharp_turn_100, tmp_path / "provider_points",
                                       **{"oracle.scale_drift_per_frame": 1.02,
                                          "ablation.pnp_point_source": "provider"})

        assert abs(drifting - steady) < 0.2 * steady
        assert provider_points > 5.0 * steady

    def test_few_refinement_iterations_suffice_with_pnp(self, sharp_turn_100, tmp_path):
        few = run_sim3_ate(sharp_turn_100, tmp_path / "few", **{"tracking.refine_iterations": 5})
        many = run_sim3_ate(sharp_turn_100, tmp_path / "many", **{"tracking.refine_iterations": 100})
        motion_model = run_sim3_ate(sharp_turn_100, tmp_path / "motion_model",
                                    **{"tracking.refine_iterations": 5, "ablation.use_pape": False})

        assert abs(few - many) < 0.1 * many
        assert motion_model >= 3.0 * few

    def test_each_component_ablation_degrades(self, sharp_turn_100, tmp_path):
        config = PipelineConfig.from_flat({"max_failure_ratio": 1.0, "oracle.scale_drift_per_frame": 1.02,
                                           "oracle.noise_sigma_rel": 0.01})
        variants = ["full", "no_scale_alignment", "no_replacement", "no_geometry_loss"]
        rows = {r.variant: r for r in run_ablation(Dataset(sharp_turn_100), config, tmp_path, variants)}

        full = rows["full"].ate_sim3
        for name in variants[1:]:
            assert rows[name].ate_sim3 >= 1.5 * full, name
        assert min(rows, key=lambda name: rows[name].ate_sim3) == "full"

    def test_long_sharp_turn_sequence(self, sharp_turn_200, tmp_path):
        run_dir = tmp_path / "run"
        SlamService(PipelineConfig()).run(Dataset(sharp_turn_200), run_dir)
        summary = EvaluationService().evaluate_run(sharp_turn_200, run_dir)

        assert summary.ate_sim3 < 0.01 * summary.trajectory_length
        assert summary.psnr_mean > 25.0
