import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings

from simreg.models.configs import SimulatorConfig, TrainConfig, TrainingMode


class Settings(BaseSettings):
    # ==========================================
    # OUTPUTS
    # ==========================================
    # Root directory for CLI outputs when --output-dir is not given
    SIMREG_OUTPUT_ROOT: Path = Path(os.getenv("SIMREG_OUTPUT_ROOT", "./outputs"))
    SIMREG_LOG_LEVEL: str = os.getenv("SIMREG_LOG_LEVEL", "INFO")

    # Seed used when neither the run config nor --seed provides one
    SIMREG_DEFAULT_SEED: int = int(os.getenv("SIMREG_DEFAULT_SEED", "0"))

    # ==========================================
    # FIELD INVERSION
    # ==========================================
    SIMREG_INVERT_MAX_ITERS: int = int(os.getenv("SIMREG_INVERT_MAX_ITERS", "50"))
    SIMREG_INVERT_TOL: float = float(os.getenv("SIMREG_INVERT_TOL", "1e-3"))  # voxels

    # ==========================================
    # HTTP SERVICE
    # ==========================================
    # Checkpoint served by the API; empty = untrained network (zero field)
    SIMREG_CHECKPOINT_PATH: str = os.getenv("SIMREG_CHECKPOINT_PATH", "")
    SIMREG_MAX_UPLOAD_SIZE: int = 256 * 1024 * 1024  # 256MB
    SIMREG_ALLOWED_VOLUME_FORMATS: list = [".nii"]
    CORS_ORIGINS_STR: str = os.getenv("CORS_ORIGINS", "http://localhost:5173,http://localhost:3000")

    @property
    def CORS_ORIGINS(self) -> list:
        """Parse comma-separated CORS origins into a list"""
        return [origin.strip() for origin in self.CORS_ORIGINS_STR.split(",") if origin.strip()]

    class Config:
        env_file = ".env"
        extra = "ignore"  # Allow extra fields from environment variables


settings = Settings()


class ConfigError(ValueError):
    """Run configuration that passes validation but cannot be used"""


class RunConfig(BaseModel):
    """
    One run of the toolkit, loaded from a JSON key-value tree.

    Example:
        {
          "mode": "REG",
          "seed": 3,
          "simulator": {"Gamma": 500, "Sigma_min": 8, "Sigma_max": 10},
          "train": {"lambda": 10, "steps": 500},
          "dataset_dir": "data/train",
          "output_dir": "outputs/run1"
        }
    """

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    mode: TrainingMode = TrainingMode.REG
    seed: Optional[int] = None
    simulator: SimulatorConfig = Field(default_factory=SimulatorConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    dataset_dir: Optional[Path] = None
    atlas_dir: Optional[Path] = None
    output_dir: Optional[Path] = None
    checkpoint: Optional[Path] = None
    selection_fraction: float = Field(default=0.1, gt=0.0, le=1.0)
    segmentation: str = "multi"  # atlas | multi | top1 | mtl | feat

    @model_validator(mode="after")
    def check_method(self):
        if self.segmentation not in ("atlas", "multi", "top1", "mtl", "feat"):
            raise ValueError(f"unknown segmentation method {self.segmentation!r}")
        return self

    def resolved_seed(self) -> int:
        return self.seed if self.seed is not None else settings.SIMREG_DEFAULT_SEED

    def resolved_output_dir(self) -> Path:
        return self.output_dir if self.output_dir is not None else settings.SIMREG_OUTPUT_ROOT

    def check_paths(self) -> "RunConfig":
        """Every referenced input path must exist"""
        for name in ("dataset_dir", "atlas_dir"):
            path = getattr(self, name)
            if path is not None and not path.is_dir():
                raise ConfigError(f"{name} does not exist: {path}")
        if self.checkpoint is not None and not Path(f"{self.checkpoint}.json").is_file():
            raise ConfigError(f"checkpoint does not exist: {self.checkpoint}.json")
        return self

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """
        Apply command-line values (None entries are ignored).

        Keys are top-level fields, or "simulator.<field>" / "train.<field>".
        The seed, when given, also seeds the simulator and the trainer.
        """
        data = self.model_dump(by_alias=False)
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, field = key.partition(".")
            if field:
                data[section][field] = value
            else:
                data[section] = value
        if overrides.get("seed") is not None:
            data["simulator"]["seed"] = overrides["seed"]
            data["train"]["seed"] = overrides["seed"]
        return RunConfig.model_validate(data)


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a RunConfig from JSON (or defaults) and apply flag overrides.

    Raises:
        pydantic.ValidationError: invalid values
        ConfigError: unreadable file or missing referenced paths
    """
    if path is None:
        config = RunConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        config = RunConfig.model_validate(raw)
        if config.seed is not None:
            config = config.with_overrides({"seed": config.seed})
    if overrides:
        config = config.with_overrides(overrides)
    return config.check_paths()
