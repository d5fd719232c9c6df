"""
run: the SLAM pipeline on one dataset
"""
import argparse

from app.cli.common import build_config, existing_dir, output_dir
from app.schemas.config import config_help_lines
from app.services.simulation_service import Dataset
from app.services.slam_service import SlamService


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "run",
        help="track and map a dataset",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (key = value, [published] marks defaults from the method description):\n"
               + "\n".join(config_help_lines()),
    )
    parser.add_argument("--dataset", required=True, help="dataset directory")
    parser.add_argument("--out", help="run artifact directory (default: <output root>/<dataset name>)")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--provider", help="oracle or files:DIR")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    dataset_dir = existing_dir(args.dataset, "--dataset")
    config = build_config(args.config, args.seed, args.provider)
    out = output_dir(args.out, dataset_dir.name)
    artifacts = SlamService(config).run(Dataset(dataset_dir), out)
    print(f"{len(artifacts.poses)} frames, {len(artifacts.keyframe_ids)} keyframes, "
          f"{len(artifacts.gmap)} Gaussians -> {out}")
    return 0
