import logging
import os
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
from app.api.endpoints import router, storage_service
from app.models.database import DATABASE_URL, create_tables
from app.schemas.schemas import DETECTOR_GRID, LEVEL_GRID, PACKET_THRESHOLD_GRID, PRESETS, R_GRID

logging.basicConfig(
    level=os.environ.get("AIS_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger("wsn-ais-api")

@asynccontextmanager
async def lifespan(app: FastAPI):
    create_tables()
    logger.info("Experiment registry at %s, configs under %s", DATABASE_URL, storage_service.base_path)
    yield

app = FastAPI(
    title="WSN Immune Detection API",
    description="API for storing, versioning and running negative-selection misbehavior detection experiments",
    version="1.0.0",
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(router)

@app.get("/")
def read_root():
    """Presets and the parameter grids accepted without allow_off_grid"""
    return {
        "message": "WSN Immune Detection API - experiment registry and runner",
        "presets": sorted(PRESETS),
        "grids": {
            "ais.r": list(R_GRID),
            "ais.detector_count": list(DETECTOR_GRID),
            "misbehavior.level": list(LEVEL_GRID),
            "thresholds.packet_threshold": list(PACKET_THRESHOLD_GRID),
        },
    }

@app.get("/health")
def health_check():
    return {"status": "healthy", "service": "wsn-ais-api"}

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host=os.environ.get("AIS_HOST", "0.0.0.0"), port=int(os.environ.get("AIS_PORT", "8000")))
