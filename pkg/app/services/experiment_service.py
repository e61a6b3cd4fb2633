import json
import logging
from sqlalchemy.orm import Session
from sqlalchemy import and_, desc
from starlette.concurrency import run_in_threadpool
from typing import Optional, List
from app.models.database import Experiment, ConfigVersion, CellResult
from app.storage.storage_service import StorageService
from app.services.sweep_service import SweepService
from app.schemas.schemas import (
    ExperimentUpload, UploadResponse, ExperimentResponse, ExperimentInfo, ExperimentSummary, CellResultInfo, RunResponse,
    metrics_row
)

logger = logging.getLogger(__name__)

class ExperimentService:
    def __init__(self, storage_service: StorageService):
        self.storage = storage_service

    def get_or_create_experiment(self, db: Session, name: str) -> Experiment:
        """Get existing experiment or create new one"""
        experiment = db.query(Experiment).filter(Experiment.name == name).first()
        if not experiment:
            experiment = Experiment(name=name)
            db.add(experiment)
            db.commit()
            db.refresh(experiment)
        return experiment

    def get_next_version(self, db: Session, experiment_id: int) -> int:
        latest = db.query(ConfigVersion).filter(
            ConfigVersion.experiment_id == experiment_id
        ).order_by(desc(ConfigVersion.version)).first()
        return (latest.version + 1) if latest else 1

    def mark_previous_versions_as_old(self, db: Session, experiment_id: int):
        db.query(ConfigVersion).filter(
            and_(ConfigVersion.experiment_id == experiment_id, ConfigVersion.is_latest == True)
        ).update({"is_latest": False})
        db.commit()

    async def upload_config(
        self,
        db: Session,
        file_content: bytes,
        filename: str,
        upload_data: ExperimentUpload
    ) -> UploadResponse:
        """Parse, validate and store a new version of an experiment file"""
        file_path = None
        try:
            content, file_format = await self.storage.parse_config_file(file_content, filename)
            is_valid, error_msg = await self.storage.validate_config(content)

            if not is_valid:
                return UploadResponse(
                    success=False,
                    message=f"Experiment validation failed: {error_msg}"
                )

            experiment = self.get_or_create_experiment(db, upload_data.name)
            version = self.get_next_version(db, experiment.id)

            file_path, checksum, file_size = await self.storage.save_config(
                content,
                upload_data.name,
                filename,
                version,
                file_format
            )

            self.mark_previous_versions_as_old(db, experiment.id)
            if upload_data.replace_existing:
                # Results of superseded versions go with them
                db.query(CellResult).filter(
                    CellResult.config_id.in_(
                        db.query(ConfigVersion.id).filter(ConfigVersion.experiment_id == experiment.id)
                    )
                ).delete(synchronize_session=False)
                db.commit()

            record = ConfigVersion(
                version=version,
                file_name=filename,
                file_path=file_path,
                file_format=file_format,
                file_size=file_size,
                checksum=checksum,
                is_latest=True,
                experiment_id=experiment.id
            )

            db.add(record)
            db.commit()
            db.refresh(record)

            return UploadResponse(
                success=True,
                message=f"Experiment config uploaded successfully for {upload_data.name}",
                config_info=ExperimentInfo.model_validate(record),
                version=version
            )

        except Exception as e:
            logger.warning("Upload of %s failed: %s", filename, e)
            db.rollback()
            if file_path and self.storage.delete_config_file(file_path):
                logger.info("Removed orphaned experiment file %s", file_path)
            return UploadResponse(
                success=False,
                message=f"Upload failed: {str(e)}"
            )

    def get_latest_config(self, db: Session, name: str) -> Optional[ExperimentResponse]:
        experiment = db.query(Experiment).filter(Experiment.name == name).first()
        if not experiment:
            return None

        record = db.query(ConfigVersion).filter(
            and_(ConfigVersion.experiment_id == experiment.id, ConfigVersion.is_latest == True)
        ).first()
        if not record:
            return None

        return ExperimentResponse(
            config_info=ExperimentInfo.model_validate(record),
            experiment=ExperimentSummary.model_validate(experiment)
        )

    def get_config_versions(self, db: Session, name: str) -> List[ExperimentInfo]:
        experiment = db.query(Experiment).filter(Experiment.name == name).first()
        if not experiment:
            return []

        records = db.query(ConfigVersion).filter(
            ConfigVersion.experiment_id == experiment.id
        ).order_by(desc(ConfigVersion.version)).all()
        return [ExperimentInfo.model_validate(r) for r in records]

    def get_config(self, db: Session, config_id: int) -> Optional[ConfigVersion]:
        return db.query(ConfigVersion).filter(ConfigVersion.id == config_id).first()

    async def run_config(self, db: Session, record: ConfigVersion) -> RunResponse:
        """Run the sweep of a stored config and persist one result per cell"""
        try:
            config = await self.storage.load_config(record.file_path)
        except Exception as e:
            return RunResponse(success=False, message=f"Cannot load experiment: {str(e)}")

        reports = await run_in_threadpool(SweepService(config).run)

        db.query(CellResult).filter(CellResult.config_id == record.id).delete()
        results = []
        for report in reports:
            result = CellResult(
                cell=report.cell,
                status=report.status,
                metrics_json=json.dumps(metrics_row(report)),
                error=report.error,
                config_id=record.id
            )
            db.add(result)
            results.append(result)
        db.commit()
        for result in results:
            db.refresh(result)

        failed = sum(r.status == "failed" for r in reports)
        return RunResponse(
            success=failed == 0,
            message=f"Ran {len(reports)} cells, {failed} failed",
            results=[self._result_info(r) for r in results]
        )

    def get_results(self, db: Session, config_id: int) -> List[CellResultInfo]:
        results = db.query(CellResult).filter(
            CellResult.config_id == config_id
        ).order_by(CellResult.id).all()
        return [self._result_info(r) for r in results]

    @staticmethod
    def _result_info(result: CellResult) -> CellResultInfo:
        return CellResultInfo(
            id=result.id,
            cell=result.cell,
            status=result.status,
            error=result.error,
            metrics=json.loads(result.metrics_json) if result.metrics_json else None,
            created_at=result.created_at
        )
