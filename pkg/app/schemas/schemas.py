import logging
import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

logger = logging.getLogger(__name__)

R_GRID = (7, 10, 13, 16, 19, 22)
DETECTOR_GRID = (500, 1000, 2000, 4000)
LEVEL_GRID = (0.1, 0.3, 0.5)
PACKET_THRESHOLD_GRID = (500, 1000, 2000, 4000)


class ConfigError(ValueError):
    """Experiment configuration that cannot be parsed or validated."""


class TrafficModel(str, Enum):
    CBR = "CBR"
    POISSON = "POISSON"


class Phase(str, Enum):
    LEARNING = "learning"
    DETECTION = "detection"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Experiment configuration
class TopologyConfig(_Section):
    n: int = Field(100, ge=2)
    width: float = Field(1000.0, gt=0)
    height: float = Field(1000.0, gt=0)
    radius: float = Field(150.0, gt=0)
    seed: Optional[int] = None
    burn_in: float = Field(1000.0, ge=0)


class Endpoint(_Section):
    source: int
    destination: int


class TrafficConfig(_Section):
    connections: int = Field(5, ge=1)
    endpoints: Optional[List[Endpoint]] = None
    target_hops: int = Field(6, ge=1)
    hop_tolerance: int = Field(1, ge=0)
    model: TrafficModel = TrafficModel.CBR
    rate: float = Field(1.0, gt=0)
    packet_size: int = Field(512, gt=0)


class MacConfig(_Section):
    bitrate: float = Field(2_000_000.0, gt=0)
    base_loss: float = Field(0.001, ge=0, lt=1)
    contention_loss: float = Field(0.01, ge=0, lt=1)
    retry_limit: int = Field(4, ge=0)
    backoff_base: float = Field(0.020, gt=0)
    queue_capacity: int = Field(50, ge=1)
    activity_window: float = Field(1.0, ge=0)


class RoutingConfig(_Section):
    send_buffer: int = Field(50, ge=1)
    request_timeout: float = Field(1.0, gt=0)
    max_request_timeout: float = Field(16.0, gt=0)
    max_replies: int = Field(3, ge=1)


class MisbehaviorConfig(_Section):
    node_count: int = Field(14, ge=0)
    level: float = Field(0.3, ge=0, le=1)
    placement: Literal["random", "relays"] = "relays"
    nodes: Optional[List[int]] = None
    hold_delay: float = Field(0.0, ge=0)


class AisConfig(_Section):
    r: int = Field(10, ge=1)
    detector_count: int = Field(2000, ge=1)
    gene_order: Union[List[int], Literal["random"], None] = None
    max_iterations: int = Field(10**7, ge=1)
    exhaustive: bool = True
    growth_candidates: int = Field(100, ge=0)
    evaluate: Literal["active", "all"] = "active"


class ThresholdConfig(_Section):
    window_threshold: Optional[int] = Field(None, ge=1)
    packet_threshold: int = Field(500, ge=0)


class RunsConfig(_Section):
    learning: int = Field(2, ge=1)
    detection: int = Field(5, ge=1)


class GridConfig(_Section):
    r: Optional[List[int]] = None
    detector_count: Optional[List[int]] = None
    level: Optional[List[float]] = None
    traffic_model: Optional[List[TrafficModel]] = None


class ExperimentConfig(_Section):
    name: str = Field("desk", min_length=1)
    topology: TopologyConfig = TopologyConfig()
    traffic: TrafficConfig = TrafficConfig()
    mac: MacConfig = MacConfig()
    routing: RoutingConfig = RoutingConfig()
    misbehavior: MisbehaviorConfig = MisbehaviorConfig()
    ais: AisConfig = AisConfig()
    thresholds: ThresholdConfig = ThresholdConfig()
    runs: RunsConfig = RunsConfig()
    grid: GridConfig = GridConfig()
    failures: Dict[int, float] = Field(default_factory=dict)
    duration: float = Field(3600.0, gt=0)
    window_size: float = Field(500.0, gt=0)
    master_seed: int = 1
    workers: int = Field(1, ge=1)
    allow_off_grid: bool = False

    @field_validator("ais")
    @classmethod
    def check_gene_order(cls, ais: AisConfig) -> AisConfig:
        if isinstance(ais.gene_order, list) and sorted(ais.gene_order) != [0, 1, 2, 3, 4]:
            raise ValueError(f"gene_order {ais.gene_order} is not a permutation of 0..4")
        return ais

    @model_validator(mode="after")
    def check_grids(self) -> "ExperimentConfig":
        off_grid = []
        if self.ais.r not in R_GRID:
            off_grid.append(f"ais.r={self.ais.r}")
        if self.ais.detector_count not in DETECTOR_GRID:
            off_grid.append(f"ais.detector_count={self.ais.detector_count}")
        if self.misbehavior.node_count and not any(math.isclose(self.misbehavior.level, v) for v in LEVEL_GRID):
            off_grid.append(f"misbehavior.level={self.misbehavior.level}")
        if self.thresholds.packet_threshold not in PACKET_THRESHOLD_GRID:
            off_grid.append(f"thresholds.packet_threshold={self.thresholds.packet_threshold}")
        if self.ais.r > 50:
            raise ValueError(f"ais.r={self.ais.r} exceeds the antigen length")
        if self.windows < 1:
            raise ValueError("duration must hold at least one complete window")
        if off_grid and not self.allow_off_grid:
            raise ValueError("Off-grid parameters (set allow_off_grid to accept): " + ", ".join(off_grid))
        if off_grid:
            logger.warning("Running with off-grid parameters: %s", ", ".join(off_grid))
        return self

    @property
    def windows(self) -> int:
        return int(math.floor(self.duration / self.window_size + 1e-9))

    @property
    def window_threshold(self) -> int:
        if self.thresholds.window_threshold is not None:
            return self.thresholds.window_threshold
        return math.ceil(self.windows / 2)


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "paper": {
        "name": "paper",
        "topology": {"n": 1718, "width": 2900.0, "height": 2950.0, "radius": 100.0},
        "traffic": {"connections": 10, "target_hops": 7},
        "misbehavior": {"node_count": 236, "placement": "random"},
        "thresholds": {"window_threshold": 14, "packet_threshold": 1000},
        "runs": {"learning": 20, "detection": 20},
        "duration": 14400.0,
    },
}


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Dotted-key view of a nested config mapping."""
    flat = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict) and value and all(isinstance(k, str) for k in value):
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def parse_override(assignment: str) -> Dict[str, Any]:
    """'ais.r=13' -> {'ais': {'r': 13}}; values are read as YAML scalars."""
    if "=" not in assignment:
        raise ConfigError(f"Override '{assignment}' must look like key=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    nested: Dict[str, Any] = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return nested


def build_config(
    data: Optional[Dict[str, Any]] = None,
    preset: Optional[str] = None,
    overrides: Optional[List[str]] = None,
) -> ExperimentConfig:
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
    merged = dict(PRESETS.get(preset or "desk", {}))
    if data:
        if not isinstance(data, dict):
            raise ConfigError("Experiment file must contain a mapping at the top level")
        merged = _merge(merged, data)
    for assignment in overrides or []:
        merged = _merge(merged, parse_override(assignment))
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid experiment configuration: {problems}") from e


def config_to_yaml(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False, default_flow_style=False)


# Results
class NodeVerdict(BaseModel):
    run: int
    node: int
    windows_flagged: int = Field(..., ge=0)
    window_count: int
    packets_forwarded_mean: float
    packets_forwarded_normal: float
    packets_forwarded_misbehavior: float
    eligible: bool
    flagged: bool
    ground_truth_misbehaving: bool
    misbehaving_next_hops: List[int] = []

    @model_validator(mode="after")
    def flagged_implies_eligible(self) -> "NodeVerdict":
        if self.flagged and not self.eligible:
            raise ValueError(f"Node {self.node} flagged without being eligible")
        return self


class Interval(BaseModel):
    mean: Optional[float] = None
    half_width: Optional[float] = None
    n: int = 0


class GeneUsage(BaseModel):
    per_gene: List[int] = Field(default_factory=lambda: [0, 0, 0, 0, 0])
    single: int = 0
    multiple: int = 0


class MetricsReport(BaseModel):
    cell: str
    status: Literal["ok", "failed"] = "ok"
    error: Optional[str] = None
    r: int
    detector_count: int
    level: float
    traffic_model: TrafficModel
    detection_rate: Optional[float] = None
    detection_rate_ci: Interval = Interval()
    dns: int = 0
    ns: int = 0
    string_detection_rate: Optional[float] = None
    string_dns: int = 0
    string_ns: int = 0
    false_positives: Interval = Interval()
    false_positives_total: int = 0
    non_valid_rate: float = 0.0
    iterations: float = 0.0
    wall_time: float = 0.0
    detectors_used_per_run: Interval = Interval()
    detectors_used_fraction: float = 0.0
    detectors_used_per_window: Interval = Interval()
    unique_antigens_per_run: Interval = Interval()
    unique_antigens_per_window: Interval = Interval()
    runs_over_window_threshold: int = 0
    data_rate: float = 0.0
    gene_usage: GeneUsage = GeneUsage()
    mean_grown_r: Optional[float] = None
    mean_shrunk_r: Optional[float] = None
    verdicts: List[NodeVerdict] = []

    @model_validator(mode="after")
    def check_rates(self) -> "MetricsReport":
        if self.dns > self.ns:
            raise ValueError(f"dns={self.dns} exceeds ns={self.ns}")
        if self.ns and self.detection_rate != self.dns / self.ns:
            raise ValueError("detection_rate must equal dns/ns")
        return self


METRICS_COLUMNS = [
    "cell", "status", "r", "detector_count", "level", "traffic_model",
    "detection_rate", "detection_rate_ci", "dns", "ns",
    "string_detection_rate", "string_dns", "string_ns",
    "false_positives_mean", "false_positives_ci", "false_positives_total",
    "non_valid_rate", "iterations",
    "detectors_used_per_run", "detectors_used_fraction", "detectors_used_per_window",
    "unique_antigens_per_run", "unique_antigens_per_window", "runs_over_window_threshold", "data_rate",
    "gene1_matches", "gene2_matches", "gene3_matches", "gene4_matches", "gene5_matches",
    "single_matches", "multiple_matches", "mean_grown_r", "mean_shrunk_r", "error",
]


def metrics_row(report: MetricsReport) -> Dict[str, Any]:
    """Flat CSV row in METRICS_COLUMNS order; wall-clock time stays out so reruns diff cleanly."""
    usage = report.gene_usage.per_gene
    row = {
        "cell": report.cell,
        "status": report.status,
        "r": report.r,
        "detector_count": report.detector_count,
        "level": report.level,
        "traffic_model": report.traffic_model.value,
        "detection_rate": report.detection_rate,
        "detection_rate_ci": report.detection_rate_ci.half_width,
        "dns": report.dns,
        "ns": report.ns,
        "string_detection_rate": report.string_detection_rate,
        "string_dns": report.string_dns,
        "string_ns": report.string_ns,
        "false_positives_mean": report.false_positives.mean,
        "false_positives_ci": report.false_positives.half_width,
        "false_positives_total": report.false_positives_total,
        "non_valid_rate": report.non_valid_rate,
        "iterations": report.iterations,
        "detectors_used_per_run": report.detectors_used_per_run.mean,
        "detectors_used_fraction": report.detectors_used_fraction,
        "detectors_used_per_window": report.detectors_used_per_window.mean,
        "unique_antigens_per_run": report.unique_antigens_per_run.mean,
        "unique_antigens_per_window": report.unique_antigens_per_window.mean,
        "runs_over_window_threshold": report.runs_over_window_threshold,
        "data_rate": report.data_rate,
        "single_matches": report.gene_usage.single,
        "multiple_matches": report.gene_usage.multiple,
        "mean_grown_r": report.mean_grown_r,
        "mean_shrunk_r": report.mean_shrunk_r,
        "error": report.error,
    }
    for gene in range(5):
        row[f"gene{gene + 1}_matches"] = usage[gene]
    return {column: row[column] for column in METRICS_COLUMNS}


# Experiment registry
class ExperimentUpload(BaseModel):
    name: str = Field(..., min_length=1)
    replace_existing: bool = False


class ExperimentInfo(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    version: int
    file_name: str
    file_path: str
    file_format: str
    file_size: int
    checksum: str
    is_latest: bool
    experiment_id: int
    created_at: datetime


class ExperimentSummary(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    name: str
    description: Optional[str] = None
    created_at: datetime


class ExperimentResponse(BaseModel):
    config_info: ExperimentInfo
    experiment: ExperimentSummary


class UploadResponse(BaseModel):
    success: bool
    message: str
    config_info: Optional[ExperimentInfo] = None
    version: Optional[int] = None


class CellResultInfo(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    cell: str
    status: str
    error: Optional[str] = None
    metrics: Optional[Dict[str, Any]] = None
    created_at: datetime


class RunResponse(BaseModel):
    success: bool
    message: str
    results: List[CellResultInfo] = []
