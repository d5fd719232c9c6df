"""
inspect: human-readable summaries of run logs
"""
import argparse
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from app.cli.common import existing_dir
from app.core.exceptions import IngestionError


def register(subparsers) -> None:
    parser = subparsers.add_parser("inspect", help="summarize the CSV logs of a run")
    parser.add_argument("--run", required=True, help="run artifact directory")
    parser.set_defaults(handler=handle)


def _read(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (ValueError, pd.errors.ParserError) as e:
        raise IngestionError(f"Malformed log ({e})", path) from e


def summarize(run_dir: Path) -> List[str]:
    lines = []
    tracking_path = run_dir / "tracking.csv"
    if tracking_path.exists():
        tracking = _read(tracking_path)
        lines += [
            "tracking:",
            f"  frames: {len(tracking)}",
            f"  fallbacks: {int(tracking['fallback'].astype(bool).sum()) if len(tracking) else 0}",
            f"  mean inliers: {tracking['inliers'].mean() if len(tracking) else float('nan'):.1f}",
            f"  mean final loss: {tracking['loss'].mean() if len(tracking) else float('nan'):.6f}",
        ]
    mapping_path = run_dir / "mapping.csv"
    if mapping_path.exists():
        mapping = _read(mapping_path)
        scales = mapping["scale"].dropna()
        lines += [
            "mapping:",
            f"  keyframes: {len(mapping)}",
            f"  remedy used: {int(mapping['used_remedy'].astype(bool).sum()) if len(mapping) else 0}",
            f"  mean scale: {scales.mean() if len(scales) else float('nan'):.6f}",
            f"  mean replaced fraction: {mapping['replaced_fraction'].mean() if len(mapping) else float('nan'):.4f}",
            f"  final Gaussians: {int(mapping['gaussians'].iloc[-1]) if len(mapping) else 0}",
        ]
    report_path = run_dir / "report.csv"
    if report_path.exists():
        report = _read(report_path)
        finite = report["psnr"].replace([np.inf, -np.inf], np.nan).dropna()
        lines += [
            "report:",
            f"  evaluated frames: {len(report)}",
            f"  mean psnr: {finite.mean() if len(finite) else float('nan'):.2f}",
            f"  mean ssim: {report['ssim'].mean() if len(report) else float('nan'):.4f}",
        ]
    if not lines:
        raise IngestionError("No tracking.csv, mapping.csv or report.csv found", run_dir)
    return lines


def handle(args: argparse.Namespace) -> int:
    print("\n".join(summarize(existing_dir(args.run, "--run"))))
    return 0
