from fastapi import APIRouter, Depends, HTTPException, UploadFile, File, Form
from sqlalchemy.orm import Session
from typing import List
from app.models.database import get_db, Experiment
from app.services.experiment_service import ExperimentService
from app.storage.storage_service import StorageService
from app.schemas.schemas import (
    ExperimentUpload, UploadResponse, ExperimentResponse, ExperimentInfo, CellResultInfo, RunResponse
)

# Initialize services
storage_service = StorageService()
experiment_service = ExperimentService(storage_service)

router = APIRouter(prefix="/api/v1", tags=["experiments"])

@router.post("/experiments/upload", response_model=UploadResponse)
async def upload_experiment(
    file: UploadFile = File(...),
    name: str = Form(...),
    replace_existing: bool = Form(False),
    db: Session = Depends(get_db)
):
    """Upload an experiment config file"""

    if not file.filename.lower().endswith(('.json', '.yaml', '.yml')):
        return UploadResponse(
            success=False,
            message="Only JSON and YAML files are supported"
        )

    try:
        content = await file.read()
        if len(content) == 0:
            return UploadResponse(
                success=False,
                message="File is empty"
            )
    except Exception as e:
        return UploadResponse(
            success=False,
            message=f"Error reading file: {str(e)}"
        )

    upload_data = ExperimentUpload(name=name, replace_existing=replace_existing)
    return await experiment_service.upload_config(db, content, file.filename, upload_data)

@router.get("/experiments/latest", response_model=ExperimentResponse)
async def get_latest_experiment(name: str, db: Session = Depends(get_db)):
    """Get the latest config of an experiment"""

    result = experiment_service.get_latest_config(db, name)
    if not result:
        raise HTTPException(status_code=404, detail=f"No config found for experiment '{name}'")

    return result

@router.get("/experiments/versions", response_model=List[ExperimentInfo])
async def get_experiment_versions(name: str, db: Session = Depends(get_db)):
    """Get all config versions of an experiment"""

    versions = experiment_service.get_config_versions(db, name)
    if not versions:
        raise HTTPException(status_code=404, detail=f"No configs found for experiment '{name}'")

    return versions

@router.post("/experiments/{config_id}/run", response_model=RunResponse)
async def run_experiment(config_id: int, db: Session = Depends(get_db)):
    """Run the sweep of a stored config"""

    record = experiment_service.get_config(db, config_id)
    if not record:
        raise HTTPException(status_code=404, detail="Experiment config not found")

    return await experiment_service.run_config(db, record)

@router.get("/experiments/{config_id}/results", response_model=List[CellResultInfo])
async def get_experiment_results(config_id: int, db: Session = Depends(get_db)):
    """Get stored cell results of a config"""

    if not experiment_service.get_config(db, config_id):
        raise HTTPException(status_code=404, detail="Experiment config not found")

    return experiment_service.get_results(db, config_id)

@router.get("/experiments")
async def list_experiments(db: Session = Depends(get_db)):
    """List all experiments"""
    experiments = db.query(Experiment).all()
    return [{"id": e.id, "name": e.name, "description": e.description} for e in experiments]
