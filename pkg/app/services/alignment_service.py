"""
Scale alignment service: patch-based alignment of provider pointmaps to the map scale
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import structlog

from app.core.exceptions import ArtifactIOError, ScaleAlignmentError
from app.models.pointmap import Pointmap
from app.schemas.config import AlignmentConfig, AlignmentStatisticEnum
from app.schemas.records import AlignmentTraceRow

logger = structlog.get_logger()


@dataclass
class PatchStep:
    """Outcome of one patch iteration"""

    step: float
    candidates: int
    correct: np.ndarray
    sufficient: bool


@dataclass
class AlignmentResult:
    """Scale applied to the provider pointmap and the points that supported it"""

    scale: float
    aligned: Pointmap
    correct_points: np.ndarray
    used_remedy: bool = False
    iterations_run: int = 0
    sufficient: bool = True
    trace: List[AlignmentTraceRow] = field(default_factory=list)


class ScaleAlignmentService:
    """Aligns provider pointmaps X^p to rendered pointmaps X^r"""

    def __init__(self, config: Optional[AlignmentConfig] = None):
        self.config = config or AlignmentConfig()

    def statistic(self, pm: Pointmap) -> np.ndarray:
        if self.config.statistic == AlignmentStatisticEnum.NORM:
            return pm.norm()
        return pm.depth

    def align(self, xr: Pointmap, xp: Pointmap) -> AlignmentResult:
        """Iterated patch alignment; ``sufficient`` is False when the remedy path is needed"""
        cfg = self.config
        if xr.shape != xp.shape:
            raise ValueError(f"Pointmap shapes differ: {xr.shape} vs {xp.shape}")
        mask = xr.valid & xp.valid
        r = self.statistic(xr)
        p = self.statistic(xp)
        if not mask.any():
            return AlignmentResult(1.0, xp.copy(), np.zeros(xr.shape, dtype=bool),
                                   iterations_run=0, sufficient=False)

        # coarse normalization so the outcome does not depend on the input scale of X^p
        scale = float(np.median(r[mask]) / np.median(p[mask]))
        trace: List[AlignmentTraceRow] = []
        correct = np.zeros(xr.shape, dtype=bool)
        sufficient = True
        iterations = 0

        for iteration in range(cfg.max_iter):
            outcome = self._patch_step(r, scale * p, mask)
            iterations = iteration + 1
            trace.append(AlignmentTraceRow(iteration=iteration, candidate_patches=outcome.candidates,
                                           correct_points=int(outcome.correct.sum()),
                                           scale=scale * outcome.step))
            if not outcome.sufficient:
                sufficient = False
                break
            correct = outcome.correct
            scale *= outcome.step
            if abs(outcome.step - 1.0) < cfg.stop_tolerance:
                break

        return AlignmentResult(scale=scale, aligned=xp.scaled(scale), correct_points=correct,
                               iterations_run=iterations, sufficient=sufficient, trace=trace)

    def align_with_remedy(
        self,
        xr: Pointmap,
        xp_n: Pointmap,
        aligned_prev: Pointmap,
        matches: np.ndarray,
        reference: Optional[Pointmap] = None,
    ) -> AlignmentResult:
        """Scale from matched pixels of the previous aligned keyframe, then one more patch pass.

        ``matches`` rows are (i_prev, j_prev, i_n, j_n). ``reference`` is the provider
        pointmap of frame n expressed in the previous keyframe's frame; X^p_n is used
        when it is not given.
        """
        reference = xp_n if reference is None else reference
        matches = np.asarray(matches, dtype=np.int64).reshape(-1, 4)
        if matches.shape[0]:
            prev_ok = aligned_prev.valid[matches[:, 1], matches[:, 0]]
            ref_ok = reference.valid[matches[:, 3], matches[:, 2]]
            matches = matches[prev_ok & ref_ok]
        if matches.shape[0] == 0:
            logger.error("Scale remedy impossible without matches")
            raise ScaleAlignmentError("No matched pixels for the scale remedy")

        prev_stat = self.statistic(aligned_prev)[matches[:, 1], matches[:, 0]]
        ref_stat = self.statistic(reference)[matches[:, 3], matches[:, 2]]
        remedy = float(np.mean(prev_stat) / np.mean(ref_stat))
        logger.warning("Using scale remedy", remedy_scale=remedy, matches=int(matches.shape[0]))

        r = self.statistic(xr)
        p = self.statistic(xp_n)
        mask = xr.valid & xp_n.valid
        outcome = self._patch_step(r, remedy * p, mask) if mask.any() else None
        trace = [AlignmentTraceRow(iteration=0, candidate_patches=outcome.candidates if outcome else 0,
                                   correct_points=int(outcome.correct.sum()) if outcome else 0,
                                   scale=remedy * (outcome.step if outcome else 1.0))]

        if outcome is not None and outcome.sufficient:
            scale = remedy * outcome.step
            return AlignmentResult(scale=scale, aligned=xp_n.scaled(scale), correct_points=outcome.correct,
                                   used_remedy=False, iterations_run=1, sufficient=True, trace=trace)
        return AlignmentResult(scale=remedy, aligned=xp_n.scaled(remedy),
                               correct_points=np.zeros(xr.shape, dtype=bool), used_remedy=True,
                               iterations_run=1, sufficient=False, trace=trace)

    def _patch_step(self, r: np.ndarray, p: np.ndarray, mask: np.ndarray) -> PatchStep:
        """One pass: candidate patches, z-normalized residuals, correct points and step scale.

        Pixels already off by more than the mean tolerance are left out of the patch
        statistics, so a few gross outliers cannot disqualify an otherwise consistent patch.
        """
        cfg = self.config
        mask = mask & (np.abs(r - p) < cfg.delta_mu * np.abs(p))
        size = cfg.patch_size
        height, width = r.shape
        ph, pw = -(-height // size), -(-width // size)
        pad = ((0, ph * size - height), (0, pw * size - width))

        def tiles(a, fill):
            return np.pad(a, pad, constant_values=fill).reshape(ph, size, pw, size).transpose(0, 2, 1, 3)

        m = tiles(mask, False)
        inside = tiles(np.ones_like(mask), False)
        rt = tiles(np.where(mask, r, 0.0), 0.0)
        pt = tiles(np.where(mask, p, 0.0), 0.0)

        count = m.sum(axis=(2, 3))
        usable = count >= 0.5 * inside.sum(axis=(2, 3))
        n = np.maximum(count, 1)
        mu_r = rt.sum(axis=(2, 3)) / n
        mu_p = pt.sum(axis=(2, 3)) / n
        sd_r = np.sqrt(np.maximum((rt ** 2).sum(axis=(2, 3)) / n - mu_r ** 2, 0.0))
        sd_p = np.sqrt(np.maximum((pt ** 2).sum(axis=(2, 3)) / n - mu_p ** 2, 0.0))

        candidate = (usable & (np.abs(mu_r - mu_p) < cfg.delta_mu * mu_p)
                     & (np.abs(sd_r - sd_p) < cfg.delta_sigma * sd_p) & (sd_r > 0) & (sd_p > 0))
        n_candidates = int(candidate.sum())

        safe_sd_r = np.where(sd_r > 0, sd_r, 1.0)[:, :, None, None]
        safe_sd_p = np.where(sd_p > 0, sd_p, 1.0)[:, :, None, None]
        r_norm = (rt - mu_r[:, :, None, None]) / safe_sd_r
        p_norm = (pt - mu_p[:, :, None, None]) / safe_sd_p
        ok = m & candidate[:, :, None, None] & (np.abs(r_norm - p_norm) < cfg.epsilon_r)
        correct = ok.transpose(0, 2, 1, 3).reshape(ph * size, pw * size)[:height, :width]

        n_correct = int(correct.sum())
        sufficient = n_candidates > 0 and n_correct >= cfg.tau * height * width
        step = float(np.mean(r[correct]) / np.mean(p[correct])) if sufficient else 1.0
        return PatchStep(step=step, candidates=n_candidates, correct=correct, sufficient=sufficient)

    @staticmethod
    def dump_trace(result: AlignmentResult, path) -> None:
        """Write the per-iteration alignment trace as CSV"""
        path = Path(path)
        frame = pd.DataFrame([row.model_dump() for row in result.trace],
                             columns=list(AlignmentTraceRow.model_fields))
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=False, float_format="%.9g")
        except OSError as e:
            logger.error("Failed to write alignment trace", path=str(path), error=str(e))
            raise ArtifactIOError("Cannot write alignment trace", path) from e
