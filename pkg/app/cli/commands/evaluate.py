"""
eval: metrics of a finished run
"""
import argparse

from app.cli.common import existing_dir
from app.services.evaluation_service import EvaluationService


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="compute ATE, PSNR and SSIM for a run")
    parser.add_argument("--dataset", required=True, help="dataset directory with gt_traj.txt")
    parser.add_argument("--run", required=True, help="run artifact directory")
    parser.add_argument("--out", help="report directory (defaults to the run directory)")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    dataset_dir = existing_dir(args.dataset, "--dataset")
    run_dir = existing_dir(args.run, "--run")
    summary = EvaluationService().evaluate_run(dataset_dir, run_dir, args.out)
    for key, value in summary.model_dump().items():
        print(f"{key}: {value}")
    return 0
