"""
Checkpoint persistence

A checkpoint is two files next to each other:
- <path>.json  manifest: tensor names and shapes in payload order, scalar
  hyperparameters and the optimizer step count
- <path>.bin   raw little-endian float32 values of every tensor,
  concatenated in manifest order (C order within a tensor)
"""
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field

from simreg.services.network import NetworkParameters
from simreg.services.nifti_io import atomic_write_bytes

logger = logging.getLogger(__name__)

PAYLOAD_DTYPE = np.dtype("<f4")


class TensorEntry(BaseModel):
    name: str
    shape: List[int]


class CheckpointManifest(BaseModel):
    format: str = "simreg-checkpoint-1"
    tensors: List[TensorEntry]
    hyper: Dict[str, float | int | str | bool | None] = Field(default_factory=dict)
    step: int = 0


def _paths(path) -> Tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".json"), base.with_name(base.name + ".bin")


def save_checkpoint(path, params: NetworkParameters, hyper: Dict | None = None, step: int = 0) -> Path:
    """Write manifest and payload; returns the manifest path"""
    manifest_path, payload_path = _paths(path)
    manifest = CheckpointManifest(
        tensors=[TensorEntry(name=name, shape=list(t.shape)) for name, t in params.items()],
        hyper=dict(hyper or {}),
        step=step,
    )
    payload = b"".join(t.data.astype(PAYLOAD_DTYPE).tobytes(order="C") for _, t in params.items())
    atomic_write_bytes(payload_path, payload)
    atomic_write_bytes(manifest_path, manifest.model_dump_json(indent=2).encode("utf-8"))
    logger.info(f"✅ Checkpoint saved: {manifest_path} ({len(params)} tensors, step {step})")
    return manifest_path


def load_checkpoint(path) -> Tuple[NetworkParameters, Dict, int]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (params, hyper, step); values are float32-rounded

    Raises:
        ValueError: payload size does not match the manifest
    """
    manifest_path, payload_path = _paths(path)
    manifest = CheckpointManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    payload = np.frombuffer(payload_path.read_bytes(), dtype=PAYLOAD_DTYPE)

    expected = sum(int(np.prod(entry.shape)) for entry in manifest.tensors)
    if payload.size != expected:
        raise ValueError(f"checkpoint payload holds {payload.size} values, manifest expects {expected}")

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for entry in manifest.tensors:
        count = int(np.prod(entry.shape))
        arrays[entry.name] = payload[offset:offset + count].astype(np.float64).reshape(entry.shape)
        offset += count
    logger.debug(f"Loaded checkpoint {manifest_path} at step {manifest.step}")
    return NetworkParameters.from_arrays(arrays), dict(manifest.hyper), manifest.step
