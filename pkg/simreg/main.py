import os
import sys
# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from simreg import __version__
from simreg.config import settings
from simreg.routes import registration

app = FastAPI(
    title="simreg API",
    description="Simulation-supervised deformable registration of 3D volumes",
    version=__version__
)

# CORS configuration
cors_origins = ["*"]  # Default to allow all for development
if os.getenv("ENVIRONMENT") == "production":
    cors_origins = settings.CORS_ORIGINS

app.add_middleware(
    CORSMiddleware,
    allow_origins=cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
    expose_headers=["*"],
)

# Include routers
app.include_router(registration.router)

# ============= HEALTH CHECK =============

@app.get("/")
async def root():
    return {
        "app": "simreg API",
        "version": __version__,
        "status": "online"
    }

@app.get("/health")
async def health_check():
    """Check the served checkpoint and the output root"""
    try:
        checkpoint = settings.SIMREG_CHECKPOINT_PATH
        if checkpoint and not os.path.isfile(f"{checkpoint}.json"):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}.json")
        return {
            "status": "healthy",
            "checkpoint": checkpoint or "untrained",
            "output_root": str(settings.SIMREG_OUTPUT_ROOT)
        }
    except Exception as e:
        return JSONResponse(
            status_code=503,
            content={"status": "unhealthy", "error": str(e)}
        )


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
