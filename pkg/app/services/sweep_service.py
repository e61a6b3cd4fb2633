import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

from app.schemas.schemas import ExperimentConfig, MetricsReport, NodeVerdict, Phase, TrafficModel
from app.services.metrics_service import MetricsService, failed_report
from app.services.pipeline_service import (
    DetectionResult, LearningResult, Scenario, build_scenario, classify_nodes, detection_phase, learning_phase,
    phase_summaries,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    r: int
    detector_count: int
    level: float
    traffic_model: TrafficModel

    @property
    def key(self) -> str:
        return f"r{self.r}_d{self.detector_count}_l{self.level:g}_{self.traffic_model.value}"


@dataclass
class CellOutcome:
    cell: Cell
    config: ExperimentConfig
    report: MetricsReport
    scenario: Optional[Scenario] = None
    learning: Optional[LearningResult] = None
    detection: Optional[DetectionResult] = None
    verdicts: Optional[List[NodeVerdict]] = None


def expand_grid(config: ExperimentConfig) -> List[Cell]:
    """Cells of r x detector count x level x traffic model; unset axes take the config's own value."""
    grid = config.grid
    axes = (
        grid.r or [config.ais.r],
        grid.detector_count or [config.ais.detector_count],
        grid.level or [config.misbehavior.level],
        grid.traffic_model or [config.traffic.model],
    )
    return [Cell(*values) for values in itertools.product(*axes)]


def cell_config(config: ExperimentConfig, cell: Cell) -> ExperimentConfig:
    data = config.model_dump(mode="json")
    data["ais"].update(r=cell.r, detector_count=cell.detector_count)
    data["misbehavior"]["level"] = cell.level
    data["traffic"]["model"] = cell.traffic_model.value
    data["grid"] = {}
    return ExperimentConfig.model_validate(data)


def run_cell(config: ExperimentConfig, cell: Optional[Cell] = None, keep_artifacts: bool = False) -> CellOutcome:
    """Learn, detect, classify and score one cell; any failure becomes a failed report."""
    cell = cell or expand_grid(config)[0]
    try:
        cfg = cell_config(config, cell)
    except Exception as e:
        logger.error("Cell %s has an invalid configuration: %s", cell.key, e)
        return CellOutcome(cell, config, failed_report(config, cell.key, str(e)))
    try:
        scenario = build_scenario(cfg)
        learning = learning_phase(cfg, phase_summaries(cfg, scenario, Phase.LEARNING))
        detection = detection_phase(cfg, learning, phase_summaries(cfg, scenario, Phase.DETECTION), scenario.misbehaving)
        verdicts = classify_nodes(cfg, learning, detection)
        report = MetricsService(cfg).compute_metrics(cell.key, learning, detection, verdicts)
    except Exception as e:
        logger.exception("Cell %s failed", cell.key)
        return CellOutcome(cell, cfg, failed_report(cfg, cell.key, f"{type(e).__name__}: {e}"))
    logger.info("Cell %s finished: detection rate %s", cell.key, report.detection_rate)
    if not keep_artifacts:
        return CellOutcome(cell, cfg, report)
    return CellOutcome(cell, cfg, report, scenario, learning, detection, verdicts)


def _run_cell_report(config_data: Dict[str, Any], cell: Cell) -> MetricsReport:
    return run_cell(ExperimentConfig.model_validate(config_data), cell).report


class SweepService:
    def __init__(self, config: ExperimentConfig):
        self.config = config

    def cells(self) -> List[Cell]:
        return expand_grid(self.config)

    def run(self) -> List[MetricsReport]:
        """One report per cell in grid order; cells run in a process pool when workers > 1."""
        cells = self.cells()
        logger.info("Sweep %s: %d cells on %d workers", self.config.name, len(cells), self.config.workers)
        if self.config.workers == 1 or len(cells) == 1:
            return [run_cell(self.config, cell).report for cell in cells]

        config_data = self.config.model_dump(mode="json")
        reports: List[MetricsReport] = []
        with ProcessPoolExecutor(max_workers=min(self.config.workers, len(cells))) as pool:
            futures = [pool.submit(_run_cell_report, config_data, cell) for cell in cells]
            for cell, future in zip(cells, futures):
                try:
                    reports.append(future.result())
                except Exception as e:
                    logger.error("Worker for cell %s died: %s", cell.key, e)
                    reports.append(failed_report(self.config, cell.key, f"{type(e).__name__}: {e}"))
        return reports
