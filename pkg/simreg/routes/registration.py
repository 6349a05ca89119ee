"""
Registration routes
Simulate pairs, register uploaded volumes and render previews
"""
import io
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import List, Tuple

from fastapi import APIRouter, File, Form, HTTPException, UploadFile
from fastapi.responses import Response
from pydantic import BaseModel

from simreg.config import settings
from simreg.models.configs import SimulatorConfig
from simreg.models.volumes import Volume
from simreg.services import preview
from simreg.services.checkpoint import load_checkpoint
from simreg.services.evaluation import score_registration
from simreg.services.network import NetworkParameters, init_network
from simreg.services.nifti_io import encode_nifti, read_nifti_bytes
from simreg.services.preprocessing import VolumePreprocessor
from simreg.services.segmentation import register
from simreg.services.simulator import RegistrationSimulator

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/registration", tags=["registration"])
preprocessor = VolumePreprocessor()


class FieldStats(BaseModel):
    mean_magnitude: float
    max_magnitude: float


class RegistrationResponse(BaseModel):
    dims: List[int]
    field: FieldStats
    mse: float
    nlcc: float
    mi: float


class VolumeUploadValidator:
    """Validate uploaded volumes before decoding"""

    @staticmethod
    def validate(file: UploadFile) -> Tuple[bool, str]:
        """
        Validate an uploaded volume
        Returns: (is_valid, error_message)
        """
        ext = Path(file.filename or "").suffix.lower()
        if ext not in settings.SIMREG_ALLOWED_VOLUME_FORMATS:
            return False, f"Unsupported format. Use: {settings.SIMREG_ALLOWED_VOLUME_FORMATS}"

        file.file.seek(0, 2)
        size = file.file.tell()
        file.file.seek(0)
        if size > settings.SIMREG_MAX_UPLOAD_SIZE:
            return False, f"File too large. Max: {settings.SIMREG_MAX_UPLOAD_SIZE / 1024 / 1024}MB"
        if size == 0:
            return False, "Empty file"
        return True, ""


@lru_cache(maxsize=1)
def get_params() -> NetworkParameters:
    """Parameters served by the API, loaded once"""
    if settings.SIMREG_CHECKPOINT_PATH:
        params, _, step = load_checkpoint(settings.SIMREG_CHECKPOINT_PATH)
        logger.info(f"✅ Serving checkpoint {settings.SIMREG_CHECKPOINT_PATH} (step {step})")
        return params
    logger.warning("⚠️  SIMREG_CHECKPOINT_PATH not set, serving an untrained network")
    return init_network(settings.SIMREG_DEFAULT_SEED)


async def read_upload(file: UploadFile) -> Volume:
    is_valid, error = VolumeUploadValidator.validate(file)
    if not is_valid:
        raise HTTPException(status_code=400, detail=f"{file.filename}: {error}")
    try:
        return preprocessor.process(read_nifti_bytes(await file.read()))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"{file.filename}: {e}")


@router.post("/simulate")
async def simulate(
    file: UploadFile = File(...),
    seed: int = Form(0),
):
    """Simulate a fixed image from the uploaded moving image; returns .nii bytes"""
    moving = await read_upload(file)
    try:
        pair = RegistrationSimulator(SimulatorConfig(seed=seed)).generate(moving)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"❌ Simulation failed: {e}")
        raise HTTPException(status_code=500, detail=f"Simulation failed: {str(e)}")

    return Response(
        content=encode_nifti(pair.fixed),
        media_type="application/octet-stream",
        headers={
            "Content-Disposition": 'attachment; filename="fixed.nii"',
            "X-Simreg-Transform": json.dumps(pair.transform.model_dump()),
        },
    )


@router.post("/register", response_model=RegistrationResponse)
async def register_pair(
    moving: UploadFile = File(...),
    fixed: UploadFile = File(...),
    window: int = Form(5),
):
    """Register moving to fixed and report reconstruction metrics"""
    moving_volume = await read_upload(moving)
    fixed_volume = await read_upload(fixed)
    try:
        field, recon = register(get_params(), moving_volume, fixed_volume)
        report = score_registration(field, recon, fixed_volume, window=window)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"❌ Registration failed: {e}")
        raise HTTPException(status_code=500, detail=f"Registration failed: {str(e)}")

    magnitude = field.magnitude()
    return RegistrationResponse(
        dims=list(fixed_volume.dims),
        field=FieldStats(mean_magnitude=float(magnitude.mean()), max_magnitude=float(magnitude.max())),
        mse=report.mse,
        nlcc=report.nlcc,
        mi=report.mi,
    )


@router.post("/preview")
async def preview_pair(
    moving: UploadFile = File(...),
    fixed: UploadFile = File(...),
):
    """PNG panel: moving, fixed, reconstruction, amplified difference, field magnitude"""
    moving_volume = await read_upload(moving)
    fixed_volume = await read_upload(fixed)
    try:
        field, recon = register(get_params(), moving_volume, fixed_volume)
        panel = preview.render_registration_panel(moving_volume, fixed_volume, recon, field)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))

    buffer = io.BytesIO()
    panel.save(buffer, "PNG")
    return Response(content=buffer.getvalue(), media_type="image/png")
