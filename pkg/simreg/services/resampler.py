"""
Spatial transformer: backward warping, field composition and inversion

Conventions:
- backward warping: output(p) = input(p + F(p))
- sampling coordinates are clamped to [0, dim-1] per axis (replicate border),
  so every linearly interpolated value is a convex combination of input voxels
- nearest-neighbour rounding is half away from zero
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from simreg.models.volumes import (
    DisplacementField, LabelMap, ProbabilityMap, Volume, check_same_dims,
)

logger = logging.getLogger(__name__)


def identity_grid(dims) -> np.ndarray:
    """Voxel-center coordinates, shape (3, D0, D1, D2)"""
    return np.indices(tuple(dims), dtype=np.float64)


def _axis_setup(coord: np.ndarray, dim: int):
    """Lower corner index, upper corner index, fractional weight, in-range mask"""
    inside = (coord >= 0.0) & (coord <= dim - 1)
    clamped = np.clip(coord, 0.0, dim - 1)
    if dim == 1:
        zeros = np.zeros(coord.shape, dtype=np.int64)
        return zeros, zeros, np.zeros(coord.shape), inside
    lower = np.minimum(np.floor(clamped).astype(np.int64), dim - 2)
    return lower, lower + 1, clamped - lower, inside


def trilinear_sample(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """
    Trilinear interpolation with edge clamp.

    Args:
        data: (D0, D1, D2) or (C, D0, D1, D2) array
        coords: (3, ...) sampling coordinates in voxel units

    Returns:
        Samples of shape coords.shape[1:] (or (C,) + coords.shape[1:])
    """
    dims = data.shape[-3:]
    (l0, u0, t0, _), (l1, u1, t1, _), (l2, u2, t2, _) = (
        _axis_setup(coords[a], dims[a]) for a in range(3)
    )
    out = 0.0
    for i0, w0 in ((l0, 1.0 - t0), (u0, t0)):
        for i1, w1 in ((l1, 1.0 - t1), (u1, t1)):
            for i2, w2 in ((l2, 1.0 - t2), (u2, t2)):
                out = out + (w0 * w1 * w2) * data[..., i0, i1, i2]
    return out


def trilinear_sample_grads(data: np.ndarray, coords: np.ndarray, grad_out: np.ndarray,
                           need_data: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """
    Vector-Jacobian products of trilinear_sample.

    Args:
        data: (D0, D1, D2) or (C, D0, D1, D2) array that was sampled
        coords: (3, ...) coordinates used in the forward pass
        grad_out: upstream gradient, same shape as the forward output
        need_data: skip the (scatter-heavy) data gradient when False

    Returns:
        (grad_data, grad_coords); grad_coords is zero along axes where the
        coordinate was clamped
    """
    dims = data.shape[-3:]
    setups = [_axis_setup(coords[a], dims[a]) for a in range(3)]
    (l0, u0, t0, m0), (l1, u1, t1, m1), (l2, u2, t2, m2) = setups
    grad_data = np.zeros_like(data) if need_data else None
    grad_coords = np.zeros_like(coords)
    channel_axes = data.ndim - 3

    for i0, w0, s0 in ((l0, 1.0 - t0, -1.0), (u0, t0, 1.0)):
        for i1, w1, s1 in ((l1, 1.0 - t1, -1.0), (u1, t1, 1.0)):
            for i2, w2, s2 in ((l2, 1.0 - t2, -1.0), (u2, t2, 1.0)):
                corner = data[..., i0, i1, i2]
                if need_data:
                    weighted = grad_out * (w0 * w1 * w2)
                    if channel_axes:
                        for c in range(data.shape[0]):
                            np.add.at(grad_data[c], (i0, i1, i2), weighted[c])
                    else:
                        np.add.at(grad_data, (i0, i1, i2), weighted)
                prod = np.sum(grad_out * corner, axis=0) if channel_axes else grad_out * corner
                grad_coords[0] += s0 * w1 * w2 * prod
                grad_coords[1] += s1 * w0 * w2 * prod
                grad_coords[2] += s2 * w0 * w1 * prod

    if dims[0] == 1:
        grad_coords[0] = 0.0
    if dims[1] == 1:
        grad_coords[1] = 0.0
    if dims[2] == 1:
        grad_coords[2] = 0.0
    grad_coords[0] *= m0
    grad_coords[1] *= m1
    grad_coords[2] *= m2
    return grad_data, grad_coords


def sample_field(f: DisplacementField | np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear sample of every field component at coords"""
    vectors = f.vectors if isinstance(f, DisplacementField) else f
    return trilinear_sample(vectors, coords)


# ============= WARPING =============

def warp_linear(v: Volume, f: DisplacementField) -> Volume:
    """Backward-warp a volume with trilinear interpolation"""
    check_same_dims(v.dims, f.dims)
    coords = identity_grid(f.dims) + f.vectors
    return v.with_data(trilinear_sample(v.data, coords))


def warp_nearest(s: LabelMap, f: DisplacementField) -> LabelMap:
    """Backward-warp a label map with nearest-neighbour sampling"""
    check_same_dims(s.dims, f.dims)
    coords = identity_grid(f.dims) + f.vectors
    index = []
    for a, dim in enumerate(f.dims):
        clamped = np.clip(coords[a], 0.0, dim - 1)
        # coordinates are non-negative here, so floor(x + 0.5) rounds half away from zero
        index.append(np.minimum(np.floor(clamped + 0.5).astype(np.int64), dim - 1))
    return LabelMap(s.labels[tuple(index)], s.num_classes)


def warp_probmap(s: ProbabilityMap, f: DisplacementField) -> ProbabilityMap:
    """Backward-warp every class plane with trilinear interpolation"""
    check_same_dims(s.dims, f.dims)
    coords = identity_grid(f.dims) + f.vectors
    warped = trilinear_sample(s.values, coords)
    return ProbabilityMap(np.clip(warped, 0.0, 1.0))


# ============= FIELD ALGEBRA =============

def compose_fields(f: DisplacementField, g: DisplacementField) -> DisplacementField:
    """
    Composite field h with warp(v, h) == warp(warp(v, f), g).

    h(p) = g(p) + f(p + g(p))
    """
    check_same_dims(f.dims, g.dims)
    coords = identity_grid(g.dims) + g.vectors
    return DisplacementField(g.vectors + sample_field(f, coords))


@dataclass(frozen=True)
class InversionResult:
    """Approximate inverse with its convergence report"""

    field: DisplacementField
    iterations: int
    mean_residual: float
    max_residual: float
    converged: bool


def inversion_residual(f: DisplacementField, g: DisplacementField) -> np.ndarray:
    """Per-voxel |g(p) + f(p + g(p))|; zero where g inverts f exactly"""
    return compose_fields(f, g).magnitude()


def invert_field(f: DisplacementField, max_iters: int = 50, tol: float = 1e-3) -> InversionResult:
    """
    Approximate inverse by fixed-point iteration g <- -f(p + g), g_0 = 0.

    Stops when the mean per-voxel update or the mean residual drops below
    tol, or after max_iters iterations. Non-convergence is reported in the
    result, never raised.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")

    grid = identity_grid(f.dims)
    g = np.zeros_like(f.vectors)
    residual = f.magnitude()
    iterations = 0
    converged = False

    for iterations in range(1, max_iters + 1):
        g_next = -sample_field(f, grid + g)
        update = float(np.mean(np.sqrt(np.sum((g_next - g) ** 2, axis=0))))
        g = g_next
        residual = inversion_residual(f, DisplacementField(g))
        if update < tol or float(residual.mean()) < tol:
            converged = True
            break

    mean_residual = float(residual.mean())
    if converged:
        logger.debug(f"Field inversion converged in {iterations} iterations (residual {mean_residual:.2e})")
    else:
        logger.warning(f"⚠️  Field inversion stopped after {iterations} iterations, "
                       f"mean residual {mean_residual:.3e} voxels")
    return InversionResult(
        field=DisplacementField(g),
        iterations=iterations,
        mean_residual=mean_residual,
        max_residual=float(residual.max()),
        converged=converged,
    )
