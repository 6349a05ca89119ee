"""
Dense volumetric data model

Defines the in-memory grid types every service consumes:
- Volume: scalar image with voxel spacing (moving, fixed, reconstructed images)
- DisplacementField: per-voxel 3-vector offsets in voxel units
- LabelMap: integer class index per voxel
- ProbabilityMap: per-class continuous values per voxel

Layout convention (fixed toolkit-wide):
- arrays are C-ordered with axis 0 slowest-varying: data[i, j, k]
- voxel centers sit at integer coordinates 0..dim-1 along each axis
- field vectors have shape (3, D0, D1, D2); component a displaces along axis a
- probability values have shape (C, D0, D1, D2)

All types are immutable after construction (arrays are copied and marked
read-only), so they can be shared freely across threads.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def check_same_dims(*dims: Dims) -> None:
    """Raise ValueError("dims mismatch") unless every dims tuple is equal"""
    first = tuple(dims[0])
    for other in dims[1:]:
        if tuple(other) != first:
            raise ValueError(f"dims mismatch: {first} vs {tuple(other)}")


@dataclass(frozen=True)
class Volume:
    """Scalar image on a regular grid"""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"Volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 strictly positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data=data, spacing=self.spacing)


@dataclass(frozen=True)
class DisplacementField:
    """Backward-warping displacement field in voxel units"""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = _frozen(self.vectors, np.float64)
        if vectors.ndim != 4 or vectors.shape[0] != 3 or min(vectors.shape[1:]) < 1:
            raise ValueError(f"field vectors must have shape (3, D0, D1, D2), got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("field contains non-finite components")
        object.__setattr__(self, "vectors", vectors)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.vectors.shape[1:])

    @classmethod
    def zeros(cls, dims: Dims) -> "DisplacementField":
        return cls(np.zeros((3,) + tuple(dims)))

    @classmethod
    def constant(cls, dims: Dims, offset) -> "DisplacementField":
        vectors = np.empty((3,) + tuple(dims))
        vectors[:] = np.asarray(offset, dtype=np.float64).reshape(3, 1, 1, 1)
        return cls(vectors)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.vectors ** 2, axis=0))


@dataclass(frozen=True)
class LabelMap:
    """Integer segmentation with classes 0..num_classes-1 (0 is background)"""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"LabelMap must be a non-empty 3D array, got shape {labels.shape}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integer valued")
        labels = _frozen(labels, np.int64)
        num_classes = int(self.num_classes)
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", num_classes)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.labels.shape)

    def alphabet(self) -> set:
        return set(int(v) for v in np.unique(self.labels))


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-class continuous map, values in [0, 1]"""

    values: np.ndarray

    # tolerance for round-off from interpolation and softmax
    TOLERANCE = 1e-9

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.ndim != 4 or min(values.shape) < 1:
            raise ValueError(f"ProbabilityMap must have shape (C, D0, D1, D2), got {values.shape}")
        if values.min() < -self.TOLERANCE or values.max() > 1 + self.TOLERANCE:
            raise ValueError("probability values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.values.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.values.shape[0])

    def argmax(self) -> LabelMap:
        """Per-voxel argmax; ties resolve to the smallest class index"""
        return LabelMap(np.argmax(self.values, axis=0), self.num_classes)
