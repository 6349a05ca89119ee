"""
Evaluation and training records serialized to CSV
"""
import math
from dataclasses import dataclass
from typing import List

from pydantic import BaseModel, Field, field_validator

METRIC_CSV_HEADER = ["pair_id", "time_s", "epe_mm", "mse", "nlcc", "mi"]
LOSS_CSV_HEADER = ["step", "L_F", "L_sim0", "L_sim1", "L_seg", "total"]


class MetricReport(BaseModel):
    """Metrics of one registration pair"""

    pair_id: str = ""
    epe_mm: float = math.nan  # NaN when no ground-truth field exists
    mse: float = Field(ge=0.0)
    nlcc: float = Field(ge=0.0, le=1.0)
    mi: float = Field(ge=0.0)  # nats
    dice_per_class: List[float] = Field(default_factory=list)
    wall_time_s: float = 0.0

    @field_validator("dice_per_class")
    @classmethod
    def dice_in_unit_range(cls, values):
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("dice values must lie in [0, 1]")
        return values

    def to_csv_row(self) -> list:
        return [self.pair_id, self.wall_time_s, self.epe_mm, self.mse, self.nlcc, self.mi]


@dataclass
class LossRecord:
    """Loss components of one optimizer step"""

    step: int
    L_F: float
    L_sim0: float
    L_sim1: float
    L_seg: float
    total: float

    def to_csv_row(self) -> list:
        return [self.step, self.L_F, self.L_sim0, self.L_sim1, self.L_seg, self.total]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.to_csv_row()[1:])
