"""
simulate: write a synthetic dataset
"""
import argparse

import structlog
from dotenv import dotenv_values
from pydantic import ValidationError

from app.cli.common import existing_file
from app.core.exceptions import UsageError
from app.schemas.config import CameraSpec, SimSceneSpec, TrajectoryKindEnum, TrajectorySpec
from app.services.simulation_service import SimulationService

logger = structlog.get_logger()

_SECTIONS = {"scene": SimSceneSpec, "trajectory": TrajectorySpec, "camera": CameraSpec}


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "simulate",
        help="generate a synthetic dataset",
        description="Render a textured room along a camera path; writes frames, depth, gt_traj.txt, intrinsics.txt.",
    )
    parser.add_argument("--out", required=True, help="dataset directory to create")
    parser.add_argument("--scene", help="key = value file with scene.*, trajectory.* and camera.* keys")
    parser.add_argument("--traj", choices=[k.value for k in TrajectoryKindEnum], help="trajectory kind")
    parser.add_argument("--frames", type=int, help="number of frames")
    parser.add_argument("--speed", type=float, help="translation per frame")
    parser.add_argument("--turn-angle", type=float, help="total yaw change in degrees")
    parser.add_argument("--objects", type=int, help="objects placed in the room")
    parser.add_argument("--width", type=int, help="image width")
    parser.add_argument("--height", type=int, help="image height")
    parser.add_argument("--fov", type=float, help="horizontal field of view in degrees")
    parser.add_argument("--seed", type=int, help="scene seed")
    parser.set_defaults(handler=handle)


def _specs(args: argparse.Namespace):
    values = {name: {} for name in _SECTIONS}
    if args.scene:
        for key, value in dotenv_values(existing_file(args.scene, "--scene")).items():
            section, _, field = key.partition(".")
            if section not in _SECTIONS or not field:
                raise UsageError(f"Unknown scene key {key}")
            values[section][field] = value
    overrides = {
        ("trajectory", "kind"): args.traj, ("trajectory", "frames"): args.frames,
        ("trajectory", "speed"): args.speed, ("trajectory", "turn_angle"): args.turn_angle,
        ("scene", "n_objects"): args.objects, ("scene", "seed"): args.seed,
        ("camera", "width"): args.width, ("camera", "height"): args.height, ("camera", "fov_deg"): args.fov,
    }
    for (section, field), value in overrides.items():
        if value is not None:
            values[section][field] = value
    try:
        return {name: model.model_validate(values[name]) for name, model in _SECTIONS.items()}
    except ValidationError as e:
        raise UsageError(f"Invalid simulation settings: {e}") from e


def handle(args: argparse.Namespace) -> int:
    specs = _specs(args)
    service = SimulationService(specs["scene"], specs["trajectory"], specs["camera"])
    path = service.generate(args.out)
    print(f"dataset written to {path}")
    return 0
