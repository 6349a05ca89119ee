"""
Synthetic labelled volumes for desk-scale training and tests

Each sample holds two labelled ellipsoids (classes 1 and 2) on a smooth
noisy background plus a few unlabelled distractor blobs. Shapes, positions
and noise come from one seeded Generator.
"""
import logging
from typing import List, Sequence

import numpy as np

from simreg.models.datasets import TrainSample
from simreg.models.volumes import LabelMap, Volume
from simreg.services.preprocessing import normalize
from simreg.services.simulator import smooth_component

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
CLASS_INTENSITY = {1: 0.55, 2: 0.85}
DISTRACTOR_INTENSITY = 0.3
DISTRACTOR_COUNT = 3


def _ellipsoid(grid: np.ndarray, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    offsets = (grid - center.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)
    return np.sum(offsets ** 2, axis=0) <= 1.0


def make_synthetic_volume(dims: Sequence[int], rng: np.random.Generator) -> TrainSample:
    """One labelled sample; class 2 is painted over class 1 where they overlap"""
    dims = tuple(int(d) for d in dims)
    size = np.asarray(dims, dtype=np.float64)
    grid = np.indices(dims, dtype=np.float64)

    background = 0.15 + 0.05 * rng.uniform(-1.0, 1.0)
    noise = smooth_component(rng.normal(0.0, 1.0, size=dims), sigma=2.0)
    noise /= max(float(np.abs(noise).max()), 1e-12)
    image = background + 0.05 * noise
    labels = np.zeros(dims, dtype=np.int64)

    for _ in range(DISTRACTOR_COUNT):
        center = rng.uniform(0.15, 0.85, size=3) * size
        radii = rng.uniform(0.04, 0.07, size=3) * size
        image[_ellipsoid(grid, center, radii)] = DISTRACTOR_INTENSITY

    placements = {
        1: (0.28, (0.20, 0.25)),
        2: (0.72, (0.16, 0.20)),
    }
    for class_id, (axis0_center, (r_lo, r_hi)) in placements.items():
        center = np.array([axis0_center, 0.5, 0.5]) + rng.uniform(-0.03, 0.03, size=3)
        radius = rng.uniform(r_lo, r_hi)
        radii = radius * rng.uniform(0.9, 1.1, size=3) * size
        mask = _ellipsoid(grid, center * size, radii)
        image[mask] = CLASS_INTENSITY[class_id] + 0.03 * noise[mask]
        labels[mask] = class_id

    volume = normalize(Volume(image))
    return TrainSample(moving=volume, moving_labels=LabelMap(labels, NUM_CLASSES))


def make_synthetic_dataset(n: int, dims: Sequence[int] = (32, 32, 32), seed: int = 0) -> List[TrainSample]:
    """
    n labelled samples with C = 3 (background + 2 blob classes), deterministic per seed.

    Raises:
        ValueError: n < 1 or any dim < 8
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if min(dims) < 8:
        raise ValueError(f"dims too small for synthetic blobs: {tuple(dims)}")
    rng = np.random.default_rng(seed)
    samples = [make_synthetic_volume(dims, rng) for _ in range(n)]
    logger.debug(f"Generated {n} synthetic samples of dims {tuple(dims)} (seed {seed})")
    return samples
