"""
Registration simulator

Samples random rotation, scale, translation and elastic deformation and
turns them into a ground-truth displacement field, a simulated fixed image
and its warped labels.

Construction rules:
- affine and elastic displacements are summed (not composed)
- rotation R = Rz @ Ry @ Rx about the grid center (dims - 1) / 2
- translation l is a fraction of the axis length: l * dims voxels
- elastic offsets ~ N(0, gamma^2) per voxel and axis, each component
  smoothed with a separable unit-sum Gaussian truncated at ceil(3 sigma),
  replicate boundary; no renormalization after smoothing

Every random draw goes through one numpy Generator, so a seed fixes the
whole simulation bit for bit.
"""
import logging
import math
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from simreg.models.configs import SampledTransform, SimulatorConfig
from simreg.models.volumes import DisplacementField, LabelMap, Volume, check_same_dims
from simreg.services.resampler import identity_grid, warp_linear, warp_nearest

logger = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def sample_transform(cfg: SimulatorConfig, rng: np.random.Generator) -> SampledTransform:
    """
    Draw one transform: a ~ U(0, A), c ~ U(C_min, C_max), l ~ U(-L, L),
    gamma ~ U(0, Gamma), sigma ~ U(Sigma_min, Sigma_max), drawn in that order.
    """
    angles = rng.uniform(0.0, np.asarray(cfg.rotation_max))
    scales = rng.uniform(np.asarray(cfg.scale_min), np.asarray(cfg.scale_max))
    bound = np.asarray(cfg.translation_max)
    translation = rng.uniform(-bound, bound)
    gamma = rng.uniform(0.0, cfg.elastic_gamma_max)
    sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max)
    return SampledTransform(
        angles=tuple(float(a) for a in angles),
        scales=tuple(float(c) for c in scales),
        translation=tuple(float(t) + 0.0 for t in translation),  # folds -0.0 into 0.0
        elastic_gamma=float(gamma),
        smoothing_sigma=float(sigma),
    )


def rotation_matrix(angles) -> np.ndarray:
    """Rz @ Ry @ Rx; angle a rotates about axis a"""
    ax, ay, az = angles
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def build_affine_field(t: SampledTransform, dims) -> DisplacementField:
    """F(p) = R S (p - ctr) + ctr + l * dims - p"""
    dims = tuple(int(d) for d in dims)
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    grid = identity_grid(dims)
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    matrix = rotation_matrix(t.angles) @ np.diag(t.scales)
    shift = np.asarray(t.translation) * np.asarray(dims, dtype=np.float64)

    centered = grid - center.reshape(3, 1, 1, 1)
    mapped = np.einsum("ij,j...->i...", matrix, centered)
    vectors = mapped + (center + shift).reshape(3, 1, 1, 1) - grid
    return DisplacementField(vectors)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum Gaussian weights on offsets -ceil(3 sigma)..ceil(3 sigma)"""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def smooth_component(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of one 3D array, replicate boundary"""
    kernel = gaussian_kernel(sigma)
    out = np.asarray(values, dtype=np.float64)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return out


def build_elastic_field(t: SampledTransform, dims, rng: np.random.Generator) -> DisplacementField:
    """Smoothed i.i.d. Gaussian offsets with standard deviation t.elastic_gamma"""
    dims = tuple(int(d) for d in dims)
    if t.smoothing_sigma <= 0:
        raise ValueError("smoothing sigma must be > 0")
    offsets = rng.normal(0.0, t.elastic_gamma, size=(3,) + dims)
    if t.elastic_gamma == 0.0:
        return DisplacementField(np.zeros((3,) + dims))
    vectors = np.stack([smooth_component(offsets[a], t.smoothing_sigma) for a in range(3)])
    return DisplacementField(vectors)


class SimulatedPair(NamedTuple):
    """Ground-truth field F_g, fixed image I0 and its labels S_g0"""

    field: DisplacementField
    fixed: Volume
    fixed_labels: Optional[LabelMap]
    transform: SampledTransform


class RegistrationSimulator:
    """
    Generates simulated registration pairs from a moving image.

    Usage:
        simulator = RegistrationSimulator(SimulatorConfig(seed=7))
        pair = simulator.generate(moving, labels)
    """

    def __init__(self, cfg: SimulatorConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else make_rng(cfg.seed)

    def generate(self, m: Volume, s_m: Optional[LabelMap] = None) -> SimulatedPair:
        return generate_pair(m, s_m, self.cfg, self.rng)


def generate_pair(m: Volume, s_m: Optional[LabelMap], cfg: SimulatorConfig,
                  rng: np.random.Generator) -> SimulatedPair:
    """
    Simulate (F_g, I0, S_g0) from a moving image and optional labels.

    F_g = affine + elastic; I0 = warp_linear(m, F_g); S_g0 = warp_nearest(s_m, F_g)
    """
    if s_m is not None:
        check_same_dims(m.dims, s_m.dims)

    transform = sample_transform(cfg, rng)
    affine = build_affine_field(transform, m.dims)
    elastic = build_elastic_field(transform, m.dims, rng)
    field = DisplacementField(affine.vectors + elastic.vectors)

    fixed = warp_linear(m, field)
    fixed_labels = warp_nearest(s_m, field) if s_m is not None else None
    logger.debug(f"Simulated pair: angles={transform.angles}, scales={transform.scales}, "
                 f"gamma={transform.elastic_gamma:.1f}, sigma={transform.smoothing_sigma:.2f}")
    return SimulatedPair(field, fixed, fixed_labels, transform)
