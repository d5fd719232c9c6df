"""
ablate: full system against each single-component ablation
"""
import argparse

from app.cli.common import build_config, existing_dir, output_dir
from app.services.simulation_service import Dataset
from app.services.slam_service import ABLATIONS, run_ablation


def register(subparsers) -> None:
    parser = subparsers.add_parser("ablate", help="run the component ablation study on a dataset")
    parser.add_argument("--dataset", required=True, help="dataset directory with gt_traj.txt")
    parser.add_argument("--out", help="directory for per-variant runs and ablation.csv")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--variants", nargs="+", choices=list(ABLATIONS), help="subset of variants")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    dataset_dir = existing_dir(args.dataset, "--dataset")
    config = build_config(args.config, args.seed)
    out = output_dir(args.out, f"{dataset_dir.name}_ablation")
    rows = run_ablation(Dataset(dataset_dir), config, out, args.variants)
    for row in rows:
        print(f"{row.variant:20s} ate_sim3={row.ate_sim3:.6f} ate_se3={row.ate_se3:.6f} "
              f"keyframes={row.keyframes} hard_failures={row.hard_failures}")
    return 0
