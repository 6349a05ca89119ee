"""
Configuration models for the simulator and the trainer

Both models accept either the descriptive field names or the short symbols
used throughout the toolkit documentation (A, C_min, C_max, L, Gamma,
Sigma_min, Sigma_max, lambda, beta), so a run configuration file may use
either spelling.
"""
import math
from enum import Enum
from typing import Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

Triple = Tuple[float, float, float]


class SimulatorConfig(BaseModel):
    """Bounds of the random affine + elastic transformation distribution"""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    rotation_max: Triple = Field(default=(math.pi / 6,) * 3, alias="A")  # radians
    scale_min: Triple = Field(default=(0.75, 0.75, 0.75), alias="C_min")
    scale_max: Triple = Field(default=(1.25, 1.25, 1.25), alias="C_max")
    translation_max: Triple = Field(default=(0.02, 0.02, 0.02), alias="L")  # fraction of axis length
    elastic_gamma_max: float = Field(default=1000.0, alias="Gamma")
    sigma_min: float = Field(default=10.0, alias="Sigma_min")  # voxels
    sigma_max: float = Field(default=13.0, alias="Sigma_max")
    seed: int = 0

    @model_validator(mode="after")
    def check_bounds(self):
        if any(a < 0 for a in self.rotation_max):
            raise ValueError("A must be componentwise >= 0")
        if any(lo <= 0 or lo > hi for lo, hi in zip(self.scale_min, self.scale_max)):
            raise ValueError("scale bounds must satisfy 0 < C_min <= C_max")
        if any(t < 0 for t in self.translation_max):
            raise ValueError("L must be componentwise >= 0")
        if self.elastic_gamma_max < 0:
            raise ValueError("Gamma must be >= 0")
        if self.sigma_min > self.sigma_max:
            raise ValueError("Sigma_min must not exceed Sigma_max")
        if self.sigma_min <= 0:
            raise ValueError("smoothing sigma must be > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        return self

    @classmethod
    def identity(cls, sigma: float = 10.0) -> "SimulatorConfig":
        """Zero-width configuration: every sample is the identity transform"""
        return cls(
            rotation_max=(0.0, 0.0, 0.0),
            scale_min=(1.0, 1.0, 1.0),
            scale_max=(1.0, 1.0, 1.0),
            translation_max=(0.0, 0.0, 0.0),
            elastic_gamma_max=0.0,
            sigma_min=sigma,
            sigma_max=sigma,
        )


class SampledTransform(BaseModel):
    """One draw from the simulator distribution"""

    model_config = ConfigDict(frozen=True)

    angles: Triple
    scales: Triple
    translation: Triple
    elastic_gamma: float
    smoothing_sigma: float


class TrainingMode(str, Enum):
    REG = "REG"    # hybrid field + similarity loss
    MTL = "MTL"    # dual registration + warped-label Dice
    FEAT = "FEAT"  # MTL plus the residual segmentation head


class TrainConfig(BaseModel):
    """Loss weights, optimizer and schedule"""

    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=10.0, alias="lambda")
    beta: float = 10.0
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    # overrides epochs when set: run exactly this many steps cycling the dataset
    steps: int | None = None
    nlcc_window: int = 5
    seed: int = 0
    mode: TrainingMode = TrainingMode.REG
    # FEAT only: keep the plain warped-label Dice term next to the head's term
    feat_keep_warped_term: bool = True
    log_every: int = 10

    @model_validator(mode="after")
    def check_values(self):
        if self.lambda_ < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.nlcc_window < 3 or self.nlcc_window % 2 == 0:
            raise ValueError("nlcc_window must be odd and >= 3")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ValueError("epochs and steps must be >= 0")
        return self
