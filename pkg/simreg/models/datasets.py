"""
Training samples and atlas collections
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from simreg.models.volumes import LabelMap, Volume, check_same_dims


@dataclass(frozen=True)
class TrainSample:
    """
    One training item.

    moving / moving_labels: the moving image M and its segmentation S^M.
    fixed_real / fixed_real_labels: optional explicit real fixed image I^1 for
    dual registration; when absent the trainer draws I^1 from the dataset.
    """

    moving: Volume
    moving_labels: Optional[LabelMap] = None
    fixed_real: Optional[Volume] = None
    fixed_real_labels: Optional[LabelMap] = None

    def __post_init__(self):
        if self.moving_labels is not None:
            check_same_dims(self.moving.dims, self.moving_labels.dims)
        if self.fixed_real is not None and self.fixed_real_labels is not None:
            check_same_dims(self.fixed_real.dims, self.fixed_real_labels.dims)

    @property
    def has_labels(self) -> bool:
        return self.moving_labels is not None


@dataclass(frozen=True)
class AtlasSet:
    """Labelled atlases sharing one grid and class count"""

    entries: List[Tuple[Volume, LabelMap]] = field(default_factory=list)
    selection_fraction: float = 0.1

    def __post_init__(self):
        if not self.entries:
            raise ValueError("empty atlas set")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ValueError("selection_fraction must lie in (0, 1]")
        dims = self.entries[0][0].dims
        num_classes = self.entries[0][1].num_classes
        for image, labels in self.entries:
            check_same_dims(dims, image.dims, labels.dims)
            if labels.num_classes != num_classes:
                raise ValueError("atlases must share the number of classes")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return self.entries[0][1].num_classes
