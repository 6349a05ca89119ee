"""
Volume preprocessing

Prepares raw MR volumes the same way for training, atlases and targets:
- resample to isotropic spacing (trilinear)
- clip at mean +/- 6 standard deviations (population sigma, whole volume)
- linearly rescale into [0, 1]

Also converts label maps to one-hot probability maps.
"""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from simreg.models.volumes import LabelMap, ProbabilityMap, Volume, check_same_dims
from simreg.services.resampler import trilinear_sample

logger = logging.getLogger(__name__)

CLIP_SIGMAS = 6.0


class VolumePreprocessor:
    """
    Preprocessing chain applied to every input image:
    1. Resample to target spacing
    2. Clip intensities
    3. Normalize to [0, 1]
    """

    def __init__(self, target_spacing: Sequence[float] = (1.0, 1.0, 1.0), clip_sigmas: float = CLIP_SIGMAS):
        self.target_spacing = tuple(float(s) for s in target_spacing)
        self.clip_sigmas = clip_sigmas

    def process(self, v: Volume) -> Volume:
        if tuple(v.spacing) != self.target_spacing:
            v = resample_to_spacing(v, self.target_spacing)
        return normalize(v, self.clip_sigmas)

    def process_pair(self, v: Volume, s: Optional[LabelMap] = None) -> Tuple[Volume, Optional[LabelMap]]:
        """Image and its labels onto the same target grid"""
        if s is not None:
            check_same_dims(v.dims, s.dims)
            s = resample_labels_to_spacing(s, v.spacing, self.target_spacing)
        return self.process(v), s


def normalize(v: Volume, clip_sigmas: float = CLIP_SIGMAS) -> Volume:
    """
    Clip at mean +/- clip_sigmas * sigma, then map min -> 0 and max -> 1.

    Raises:
        ValueError: "degenerate intensity range" for constant volumes
    """
    data = v.data
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        raise ValueError("degenerate intensity range")

    mean = float(data.mean())
    sigma = float(data.std())
    clipped = np.clip(data, mean - clip_sigmas * sigma, mean + clip_sigmas * sigma)

    lo, hi = float(clipped.min()), float(clipped.max())
    if hi <= lo:
        raise ValueError("degenerate intensity range")
    scaled = (clipped - lo) / (hi - lo)
    return v.with_data(np.clip(scaled, 0.0, 1.0))


def resample_to_spacing(v: Volume, target_spacing: Sequence[float]) -> Volume:
    """
    Trilinear resampling onto a grid with the given spacing.

    Output dims are round(dims * spacing / target_spacing); output voxel j sits
    at physical coordinate j * target_spacing, i.e. input coordinate
    j * target_spacing / spacing (grids share their origin).
    """
    target = np.asarray(target_spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(target <= 0):
        raise ValueError(f"target spacing must be 3 strictly positive values, got {target_spacing}")

    spacing = np.asarray(v.spacing, dtype=np.float64)
    dims = np.asarray(v.dims, dtype=np.float64)
    new_dims = np.floor(dims * spacing / target + 0.5).astype(np.int64)
    if np.any(new_dims < 1):
        raise ValueError(f"resampling to {tuple(target)} produces an empty grid {tuple(new_dims)}")

    if np.array_equal(new_dims, dims.astype(np.int64)) and np.allclose(spacing, target):
        return Volume(v.data, tuple(target))

    coords = np.indices(tuple(new_dims), dtype=np.float64)
    coords *= (target / spacing).reshape(3, 1, 1, 1)
    data = trilinear_sample(v.data, coords)
    logger.debug(f"Resampled {v.dims} @ {v.spacing} -> {tuple(new_dims)} @ {tuple(target)}")
    return Volume(data, tuple(target))


def one_hot(s: LabelMap) -> ProbabilityMap:
    """value(p, c) = 1 where label(p) == c, else 0"""
    classes = np.arange(s.num_classes).reshape(-1, 1, 1, 1)
    return ProbabilityMap((s.labels[None] == classes).astype(np.float64))


def resample_labels_to_spacing(s: LabelMap, spacing: Sequence[float], target_spacing: Sequence[float]) -> LabelMap:
    """Nearest-neighbour counterpart of resample_to_spacing for label maps on the same grid"""
    target = np.asarray(target_spacing, dtype=np.float64)
    source = np.asarray(spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(target <= 0) or source.shape != (3,) or np.any(source <= 0):
        raise ValueError("spacings must be 3 strictly positive values")

    dims = np.asarray(s.dims, dtype=np.float64)
    new_dims = np.floor(dims * source / target + 0.5).astype(np.int64)
    if np.any(new_dims < 1):
        raise ValueError(f"resampling to {tuple(target)} produces an empty grid {tuple(new_dims)}")
    if np.array_equal(new_dims, dims.astype(np.int64)) and np.allclose(source, target):
        return s

    index = []
    for a in range(3):
        coord = np.arange(new_dims[a], dtype=np.float64) * target[a] / source[a]
        index.append(np.minimum(np.floor(coord + 0.5).astype(np.int64), s.dims[a] - 1))
    return LabelMap(s.labels[np.ix_(*index)], s.num_classes)
