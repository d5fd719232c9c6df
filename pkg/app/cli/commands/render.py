"""
render: novel view of a map checkpoint
"""
import argparse
from pathlib import Path

import numpy as np

from app.cli.common import build_config, existing_dir, existing_file
from app.core.binary_io import write_depth
from app.core.exceptions import UsageError
from app.models.camera import CameraIntrinsics
from app.models.pose import Pose
from app.rendering.splatting import SplatRenderer
from app.services.scene_service import load_map
from app.services.simulation_service import Dataset, write_image


def register(subparsers) -> None:
    parser = subparsers.add_parser("render", help="render a map checkpoint from a pose")
    parser.add_argument("--map", required=True, help="map checkpoint (.gsm)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--pose", help="camera -> world pose 'tx ty tz qx qy qz qw'")
    parser.add_argument("--frame", type=int, help="use this frame's ground-truth pose from --dataset")
    parser.add_argument("--dataset", help="dataset supplying intrinsics (and the pose for --frame)")
    parser.add_argument("--intrinsics", help="'fx fy cx cy width height' when no dataset is given")
    parser.add_argument("--config", help="config file whose render.* keys are used")
    parser.add_argument("--alpha", action="store_true", help="also write render_alpha.png")
    parser.set_defaults(handler=handle)


def parse_pose(text: str) -> Pose:
    """world -> camera pose from a camera -> world 'tx ty tz qx qy qz qw' string"""
    try:
        values = [float(v) for v in text.split()]
    except ValueError as e:
        raise UsageError(f"--pose must hold 7 numbers: {text!r}") from e
    quat = np.array(values[3:]) if len(values) == 7 else np.zeros(0)
    if quat.size != 4 or np.linalg.norm(quat) == 0:
        raise UsageError(f"--pose must hold 7 numbers with a non-zero quaternion: {text!r}")
    return Pose.from_quaternion(quat / np.linalg.norm(quat), values[:3]).inverse()


def _camera_and_pose(args: argparse.Namespace):
    dataset = Dataset(existing_dir(args.dataset, "--dataset")) if args.dataset else None
    if dataset is not None:
        K = dataset.intrinsics
    elif args.intrinsics:
        try:
            K = CameraIntrinsics.from_line(args.intrinsics)
        except ValueError as e:
            raise UsageError(f"Invalid --intrinsics: {e}") from e
    else:
        raise UsageError("render needs --dataset or --intrinsics")

    if (args.pose is None) == (args.frame is None):
        raise UsageError("Give exactly one of --pose and --frame")
    if args.pose is not None:
        return K, parse_pose(args.pose)
    if dataset is None or not dataset.has_ground_truth:
        raise UsageError("--frame needs a --dataset with gt_traj.txt")
    if not 0 <= args.frame < len(dataset):
        raise UsageError(f"--frame {args.frame} outside 0..{len(dataset) - 1}")
    return K, dataset.gt_pose(args.frame)


def handle(args: argparse.Namespace) -> int:
    gmap = load_map(existing_file(args.map, "--map"))
    K, pose = _camera_and_pose(args)
    renderer = SplatRenderer(build_config(args.config).render)
    rendered = renderer.render(gmap, pose, K)

    out = Path(args.out)
    write_image(out / "render.png", np.clip(rendered.color, 0.0, 1.0))
    write_depth(out / "render_depth.f32", rendered.depth)
    if args.alpha:
        write_image(out / "render_alpha.png", np.repeat(rendered.alpha_sum[..., None], 3, axis=2))
    print(f"rendered {K.width}x{K.height} view of {len(gmap)} Gaussians -> {out}")
    return 0
