"""
Simulated test-set evaluation

Protocol: for every test image, draw two random fields from the simulator,
register the image to each simulated fixed image and score the prediction
(EPE against the ground-truth field, MSE / NLCC / MI of the reconstruction
against the fixed image). One MetricReport per pair.
"""
import logging
import math
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from simreg.models.configs import SimulatorConfig
from simreg.models.reports import METRIC_CSV_HEADER, MetricReport
from simreg.models.volumes import DisplacementField, LabelMap, Volume
from simreg.services import metrics
from simreg.services.network import NetworkParameters
from simreg.services.nifti_io import write_csv
from simreg.services.resampler import warp_nearest
from simreg.services.segmentation import register
from simreg.services.simulator import generate_pair, make_rng

logger = logging.getLogger(__name__)

PAIRS_PER_IMAGE = 2
SUMMARY_COLUMNS = ["time_s", "epe_mm", "mse", "nlcc", "mi"]


def score_registration(field: DisplacementField, recon: Volume, fixed: Volume, pair_id: str = "",
                       ground_truth: Optional[DisplacementField] = None,
                       labels: Optional[Tuple[LabelMap, LabelMap]] = None,
                       window: int = 5, bins: int = 100, elapsed: float = 0.0) -> MetricReport:
    """
    Score a predicted field and its reconstruction against the fixed image.

    labels: (moving labels, fixed labels) to add per-class Dice of the
    nearest-neighbour warped moving labels.
    """
    dice = []
    if labels is not None:
        dice = metrics.dice_per_class(warp_nearest(labels[0], field), labels[1])
    return MetricReport(
        pair_id=pair_id,
        epe_mm=metrics.epe(field, ground_truth, fixed.spacing) if ground_truth is not None else math.nan,
        mse=metrics.mse(recon, fixed),
        nlcc=metrics.nlcc(recon, fixed, window),
        mi=metrics.mutual_information(recon, fixed, bins),
        dice_per_class=dice,
        wall_time_s=elapsed,
    )


def evaluate_pair(params: NetworkParameters, moving: Volume, fixed: Volume, pair_id: str = "",
                  ground_truth: Optional[DisplacementField] = None,
                  labels: Optional[Tuple[LabelMap, LabelMap]] = None,
                  window: int = 5, bins: int = 100) -> MetricReport:
    """Register one pair and score it"""
    started = time.perf_counter()
    field, recon = register(params, moving, fixed)
    elapsed = time.perf_counter() - started
    return score_registration(field, recon, fixed, pair_id, ground_truth, labels, window, bins, elapsed)


def evaluate_dataset(params: NetworkParameters, images: Sequence[Tuple[str, Volume]],
                     sim_cfg: SimulatorConfig, seed: Optional[int] = None, window: int = 5,
                     bins: int = 100, labels: Optional[Sequence[LabelMap]] = None) -> List[MetricReport]:
    """
    Two simulated pairs per image, pair ids "<image>_<k>".

    Args:
        images: (name, volume) test images
        sim_cfg: simulator distribution; its seed is used unless seed is given
        labels: optional label map per image, adds per-class Dice
    """
    if not images:
        raise ValueError("no test images")
    if labels is not None and len(labels) != len(images):
        raise ValueError("labels must match images one to one")
    rng = make_rng(sim_cfg.seed if seed is None else seed)
    reports = []
    for index, (name, image) in enumerate(images):
        moving_labels = labels[index] if labels is not None else None
        for k in range(PAIRS_PER_IMAGE):
            pair = generate_pair(image, moving_labels, sim_cfg, rng)
            pair_labels = (moving_labels, pair.fixed_labels) if moving_labels is not None else None
            reports.append(evaluate_pair(params, image, pair.fixed, f"{name}_{k}", pair.field,
                                         pair_labels, window, bins))
    return reports


def summarize(reports: Sequence[MetricReport]) -> Dict[str, Tuple[float, float]]:
    """(mean, std) per metric column; NaN entries are skipped"""
    if not reports:
        raise ValueError("no reports to summarize")
    summary = {}
    for column in SUMMARY_COLUMNS:
        attr = "wall_time_s" if column == "time_s" else column
        values = np.array([getattr(r, attr) for r in reports], dtype=np.float64)
        values = values[np.isfinite(values)]
        summary[column] = (float(values.mean()), float(values.std())) if values.size else (math.nan, math.nan)

    dice = [r.dice_per_class for r in reports if r.dice_per_class]
    if dice:
        per_class = np.asarray(dice)
        for c in range(per_class.shape[1]):
            summary[f"dice_{c + 1}"] = metrics.summarize_dice(per_class[:, c])
    return summary


def log_summary(summary: Dict[str, Tuple[float, float]]) -> None:
    for column, (mean, std) in summary.items():
        logger.info(f"  {column:8s} {mean:.4f} ± {std:.4f}")


def write_reports(path, reports: Sequence[MetricReport]):
    return write_csv(path, METRIC_CSV_HEADER, [r.to_csv_row() for r in reports])
