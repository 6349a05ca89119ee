"""
Evaluation metrics

Registration: endpoint error, mean squared error, windowed normalized local
cross-correlation, mutual information.
Segmentation: Dice, majority voting and the voting-disagreement uncertainty.

Conventions:
- NLCC is evaluated only at voxels whose full window lies inside the grid,
  with a 1e-5 stabilizer added to the denominator
- MI uses equal-width bins on [0, 1] and the natural log (nats)
- Dice of a class absent from both maps is 1.0
- voting ties resolve to the smallest class index
"""
from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from simreg.models.volumes import DisplacementField, LabelMap, Volume, check_same_dims

NLCC_EPS = 1e-5
# inputs beyond [0, 1] by less than this are treated as round-off
MI_RANGE_TOLERANCE = 1e-9


def epe(f: DisplacementField, f_g: DisplacementField, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean per-voxel L2 norm of f - f_g, in mm"""
    check_same_dims(f.dims, f_g.dims)
    scale = np.asarray(spacing, dtype=np.float64).reshape(3, 1, 1, 1)
    diff = (f.vectors - f_g.vectors) * scale
    return float(np.mean(np.sqrt(np.sum(diff ** 2, axis=0))))


def mse(a: Volume, b: Volume) -> float:
    check_same_dims(a.dims, b.dims)
    return float(np.mean((a.data - b.data) ** 2))


# ============= LOCAL CROSS-CORRELATION =============

def box_sum_valid(x: np.ndarray, window: int) -> np.ndarray:
    """Sum over every full window x window x window block (valid positions only)"""
    blocks = sliding_window_view(x, (window, window, window))
    return blocks.sum(axis=(-3, -2, -1))


def box_sum_adjoint(y: np.ndarray, window: int) -> np.ndarray:
    """Adjoint of box_sum_valid: spreads each window value back over its voxels"""
    return box_sum_valid(np.pad(y, window - 1), window)


def check_window(dims, window: int) -> None:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if window > min(dims):
        raise ValueError(f"window {window} larger than volume dims {tuple(dims)}")


def local_cc_terms(a: np.ndarray, b: np.ndarray, window: int):
    """
    Per-window statistics of the squared local correlation.

    Returns:
        (cc, cross, var_a, var_b, mean_a, mean_b) over valid window positions,
        where cc = cross^2 / (var_a * var_b + eps)
    """
    n = float(window ** 3)
    sum_a = box_sum_valid(a, window)
    sum_b = box_sum_valid(b, window)
    mean_a = sum_a / n
    mean_b = sum_b / n
    cross = box_sum_valid(a * b, window) - sum_a * mean_b
    var_a = box_sum_valid(a * a, window) - sum_a * mean_a
    var_b = box_sum_valid(b * b, window) - sum_b * mean_b
    cc = cross ** 2 / (var_a * var_b + NLCC_EPS)
    return cc, cross, var_a, var_b, mean_a, mean_b


def nlcc(a: Volume, b: Volume, window: int = 5) -> float:
    """Mean squared local correlation over voxels with full in-bounds windows"""
    check_same_dims(a.dims, b.dims)
    check_window(a.dims, window)
    cc = local_cc_terms(a.data, b.data, window)[0]
    return float(cc.mean())


# ============= MUTUAL INFORMATION =============

def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum(np.floor(values * bins).astype(np.int64), bins - 1)


def mutual_information(a: Volume, b: Volume, bins: int = 100) -> float:
    """MI in nats from a bins x bins joint histogram over [0, 1]^2"""
    check_same_dims(a.dims, b.dims)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    for v in (a.data, b.data):
        if v.min() < -MI_RANGE_TOLERANCE or v.max() > 1.0 + MI_RANGE_TOLERANCE:
            raise ValueError("mutual information requires normalized inputs in [0, 1]")

    ia = _bin_index(np.clip(a.data, 0.0, 1.0).ravel(), bins)
    ib = _bin_index(np.clip(b.data, 0.0, 1.0).ravel(), bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    p_xy = joint / joint.sum()
    p_x = p_xy.sum(axis=1, keepdims=True)
    p_y = p_xy.sum(axis=0, keepdims=True)
    nonzero = p_xy > 0
    mi = float(np.sum(p_xy[nonzero] * np.log(p_xy[nonzero] / (p_x @ p_y)[nonzero])))
    # rounding can push independent histograms just below zero
    return max(mi, 0.0)


def histogram_entropy(a: Volume, bins: int = 100) -> float:
    """Entropy in nats of the equal-width histogram of a"""
    counts = np.bincount(_bin_index(np.clip(a.data, 0.0, 1.0).ravel(), bins), minlength=bins)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


# ============= SEGMENTATION =============

def dice(pred: LabelMap, truth: LabelMap, class_id: int) -> float:
    """2TP / (2TP + FN + FP); 1.0 when the class is absent from both maps"""
    check_same_dims(pred.dims, truth.dims)
    in_pred = pred.labels == class_id
    in_truth = truth.labels == class_id
    denom = int(in_pred.sum()) + int(in_truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(in_pred, in_truth).sum()) / denom


def dice_per_class(pred: LabelMap, truth: LabelMap, include_background: bool = False) -> List[float]:
    start = 0 if include_background else 1
    return [dice(pred, truth, c) for c in range(start, truth.num_classes)]


def summarize_dice(values: Sequence[float]) -> Tuple[float, float]:
    """(mean, population std) of a list of Dice scores"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no dice values to summarize")
    return float(arr.mean()), float(arr.std())


def majority_vote(votes: Sequence[LabelMap]) -> LabelMap:
    """Per-voxel most frequent label; ties go to the smallest class index"""
    if not votes:
        raise ValueError("empty vote list")
    check_same_dims(*[v.dims for v in votes])
    num_classes = max(v.num_classes for v in votes)
    stacked = np.stack([v.labels for v in votes])
    counts = np.stack([(stacked == c).sum(axis=0) for c in range(num_classes)])
    return LabelMap(np.argmax(counts, axis=0), num_classes)


def uncertainty_map(votes: Sequence[LabelMap], consensus: LabelMap) -> Volume:
    """U(p) = 1 - (number of votes equal to the consensus at p) / N"""
    if not votes:
        raise ValueError("empty vote list")
    check_same_dims(consensus.dims, *[v.dims for v in votes])
    agree = np.zeros(consensus.dims, dtype=np.int64)
    for v in votes:
        agree += (v.labels == consensus.labels)
    return Volume(1.0 - agree / float(len(votes)))
