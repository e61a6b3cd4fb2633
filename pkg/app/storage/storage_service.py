import os
import json
import yaml
import hashlib
import logging
import aiofiles
import pandas as pd
from pathlib import Path
from typing import Dict, Any, Iterable, List, Optional, Sequence, Tuple
from jsonschema import validate, ValidationError as JsonSchemaValidationError

from app.ais.bitmatch import BitString, ContractViolation
from app.ais.encoding import Antigen, RangeSpec
from app.ais.negsel import Detector, DetectorSet, GenerationStats, SelfSet
from app.netsim.topology import Topology
from app.netsim.trace import TRACE_COLUMNS, FlowCounters, PacketEvent, Trace
from app.schemas.schemas import (
    METRICS_COLUMNS, ConfigError, ExperimentConfig, GeneUsage, MetricsReport, NodeVerdict, build_config, metrics_row,
)
from app.services.pipeline_service import DetectionResult, LearningResult, NodeRun

logger = logging.getLogger(__name__)

DETECTOR_FORMAT = "ais-detectors"
DETECTOR_FORMAT_VERSION = 1
DETECTOR_HEADER_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "node", "r", "count", "seed", "length", "iterations", "non_valid"],
    "properties": {
        "format": {"const": DETECTOR_FORMAT},
        "version": {"const": DETECTOR_FORMAT_VERSION},
        "node": {"type": "integer"},
        "r": {"type": "integer", "minimum": 1},
        "count": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "length": {"type": "integer", "minimum": 1},
        "iterations": {"type": "integer", "minimum": 0},
        "non_valid": {"type": "integer", "minimum": 0},
    },
}

LEARNING_BUNDLE = "learning.json"
DETECTION_BUNDLE = "detection.json"


def parse_config_content(file_content: bytes, filename: str) -> Tuple[Dict[Any, Any], str]:
    """Parse a JSON or YAML experiment file by its extension"""
    try:
        content_str = file_content.decode('utf-8')
        file_ext = Path(filename).suffix.lower()

        if file_ext == '.json':
            return json.loads(content_str), 'json'
        elif file_ext in ['.yaml', '.yml']:
            return yaml.safe_load(content_str) or {}, 'yaml'
        else:
            raise ConfigError(f"Unsupported file format: {file_ext}")

    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON format: {str(e)}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML format: {str(e)}")
    except UnicodeDecodeError:
        raise ConfigError("File must be UTF-8 encoded")


def load_experiment_file(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[List[str]] = None,
) -> ExperimentConfig:
    """Resolve an experiment from a file and/or preset plus dotted overrides"""
    data = None
    if path:
        try:
            data, _ = parse_config_content(Path(path).read_bytes(), path)
        except FileNotFoundError:
            raise ConfigError(f"Experiment file not found: {path}")
    return build_config(data, preset, overrides)


class StorageService:
    def __init__(self, base_storage_path: Optional[str] = None):
        self.base_path = Path(base_storage_path or os.environ.get("AIS_STORAGE_PATH", "./storage"))
        self.base_path.mkdir(parents=True, exist_ok=True)

    def _get_storage_path(self, experiment: str) -> Path:
        """Generate storage path for an experiment"""
        return self.base_path / experiment

    def _generate_filename(self, original_name: str, version: int, file_format: str) -> str:
        """Generate versioned filename"""
        name_without_ext = Path(original_name).stem
        return f"{name_without_ext}_v{version}.{file_format}"

    def _calculate_checksum(self, content: str) -> str:
        """Calculate SHA-256 checksum of content"""
        return hashlib.sha256(content.encode()).hexdigest()

    async def parse_config_file(self, file_content: bytes, filename: str) -> Tuple[Dict[Any, Any], str]:
        return parse_config_content(file_content, filename)

    async def validate_config(self, content: Dict[Any, Any]) -> Tuple[bool, Optional[str]]:
        """Validate experiment content against ExperimentConfig"""
        try:
            build_config(content)
            return True, None
        except ConfigError as e:
            return False, str(e)

    async def save_config(
        self,
        content: Dict[Any, Any],
        experiment: str,
        filename: str,
        version: int,
        file_format: str
    ) -> Tuple[str, str, int]:
        """Save experiment file and return path, checksum, and size"""
        storage_path = self._get_storage_path(experiment)
        storage_path.mkdir(parents=True, exist_ok=True)

        versioned_filename = self._generate_filename(filename, version, file_format)
        file_path = storage_path / versioned_filename

        if file_format == 'json':
            content_str = json.dumps(content, indent=2)
        else:  # yaml
            content_str = yaml.dump(content, default_flow_style=False)

        checksum = self._calculate_checksum(content_str)
        file_size = len(content_str.encode())

        async with aiofiles.open(file_path, 'w', encoding='utf-8') as f:
            await f.write(content_str)

        return str(file_path), checksum, file_size

    async def load_config(self, file_path: str) -> ExperimentConfig:
        """Load and validate a stored experiment file"""
        try:
            async with aiofiles.open(file_path, 'rb') as f:
                raw = await f.read()
        except FileNotFoundError:
            raise ValueError(f"Experiment file not found: {file_path}")
        content, _ = parse_config_content(raw, file_path)
        return build_config(content)

    def delete_config_file(self, file_path: str) -> bool:
        try:
            Path(file_path).unlink()
            return True
        except FileNotFoundError:
            return False

    # Simulation artifacts

    @staticmethod
    def write_topology(topology: Topology, path: Path):
        Path(path).write_text(json.dumps(topology.to_dict(), indent=2))

    @staticmethod
    def read_topology(path: Path) -> Topology:
        try:
            return Topology.from_dict(json.loads(Path(path).read_text()))
        except (FileNotFoundError, json.JSONDecodeError, KeyError) as e:
            raise ValueError(f"Unreadable topology file {path}: {e}")

    @staticmethod
    def write_trace(trace: Trace, path: Path):
        """TSV of PacketEvents plus a <name>.meta.json sidecar with flow counters"""
        path = Path(path)
        frame = pd.DataFrame(trace.events, columns=TRACE_COLUMNS)
        frame.to_csv(path, sep="\t", index=False)
        meta = {
            "run": trace.run,
            "duration": trace.duration,
            "seed": trace.seed,
            "flows": {str(flow): vars(counters) for flow, counters in trace.flows.items()},
            "contention": {str(node): sample for node, sample in trace.contention.items()},
        }
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2))

    @staticmethod
    def read_trace(path: Path) -> Trace:
        path = Path(path)
        try:
            frame = pd.read_csv(path, sep="\t", dtype={"frame": str, "action": str, "payload": str})
        except FileNotFoundError:
            raise ValueError(f"Trace file not found: {path}")
        if list(frame.columns) != TRACE_COLUMNS:
            raise ValueError(f"Trace {path} has columns {list(frame.columns)}, expected {TRACE_COLUMNS}")
        events = [
            PacketEvent(int(c), int(n), int(h), int(s), int(d), int(z), f, a, int(p), pl)
            for c, n, h, s, d, z, f, a, p, pl in frame.itertuples(index=False, name=None)
        ]
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        trace = Trace(
            run=meta.get("run", 0),
            duration=meta.get("duration", events[-1].clock if events else 0.0),
            seed=meta.get("seed", 0),
            events=events,
            flows={int(k): FlowCounters(**v) for k, v in meta.get("flows", {}).items()},
            contention={int(k): v for k, v in meta.get("contention", {}).items()},
        )
        trace.finalize()
        return trace

    @staticmethod
    def write_detectors(ds: DetectorSet, path: Path):
        """Header line plus one bit string per detector; generation wall time goes to a .meta.json sidecar"""
        header = {
            "format": DETECTOR_FORMAT,
            "version": DETECTOR_FORMAT_VERSION,
            "node": ds.node,
            "r": ds.r,
            "count": len(ds),
            "seed": ds.seed,
            "length": ds.length,
            "iterations": ds.stats.iterations,
            "non_valid": ds.stats.non_valid,
        }
        lines = [json.dumps(header)] + [str(d.bits) for d in ds.detectors]
        path = Path(path)
        path.write_text("\n".join(lines) + "\n")
        path.with_suffix(".meta.json").write_text(json.dumps({"wall_time": ds.stats.wall_time}))

    @staticmethod
    def read_detectors(path: Path) -> DetectorSet:
        try:
            lines = Path(path).read_text().splitlines()
        except FileNotFoundError:
            raise ValueError(f"Detector file not found: {path}")
        if not lines:
            raise ValueError(f"Detector file {path} is empty")
        try:
            header = json.loads(lines[0])
            validate(instance=header, schema=DETECTOR_HEADER_SCHEMA)
        except (json.JSONDecodeError, JsonSchemaValidationError) as e:
            raise ValueError(f"Detector file {path} has an invalid header: {e}")
        body = [line.strip() for line in lines[1:] if line.strip()]
        if len(body) != header["count"]:
            raise ValueError(f"Detector file {path} declares {header['count']} detectors but holds {len(body)}")
        try:
            detectors = [Detector(bits=BitString.from_str(line), id=i) for i, line in enumerate(body)]
        except ContractViolation as e:
            raise ValueError(f"Detector file {path}: {e}")
        if any(d.bits.length != header["length"] for d in detectors):
            raise ValueError(f"Detector file {path} mixes lengths other than {header['length']}")
        meta_path = Path(path).with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        stats = GenerationStats(header["iterations"], header["non_valid"], meta.get("wall_time", 0.0))
        return DetectorSet(
            node=header["node"], r=header["r"], detectors=detectors, seed=header["seed"],
            length=header["length"], stats=stats,
        )

    @staticmethod
    def detector_filename(node: int) -> str:
        return f"detectors_node{node}.txt"

    def write_learning(self, learning: LearningResult, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nodes = {}
        for node in sorted(learning.self_sets):
            detector_file = None
            if node in learning.detectors:
                detector_file = self.detector_filename(node)
                self.write_detectors(learning.detectors[node], directory / detector_file)
            nodes[str(node)] = {
                "ranges": [spec.to_dict() for spec in learning.ranges[node]],
                "normal_forwarded": learning.normal_forwarded[node],
                "self_set": [str(a) for a in learning.self_sets[node].antigens],
                "detectors": detector_file,
            }
        bundle = {
            "gene_order": list(learning.gene_order),
            "mean_grown_r": learning.mean_grown_r,
            "mean_shrunk_r": learning.mean_shrunk_r,
            "nodes": nodes,
        }
        path = directory / LEARNING_BUNDLE
        path.write_text(json.dumps(bundle, indent=2))
        return path

    def read_learning(self, directory: Path) -> LearningResult:
        directory = Path(directory)
        try:
            bundle = json.loads((directory / LEARNING_BUNDLE).read_text())
        except FileNotFoundError:
            raise ValueError(f"No {LEARNING_BUNDLE} in {directory}")
        learning = LearningResult(
            gene_order=tuple(bundle["gene_order"]),
            mean_grown_r=bundle.get("mean_grown_r"),
            mean_shrunk_r=bundle.get("mean_shrunk_r"),
        )
        for key, entry in bundle["nodes"].items():
            node = int(key)
            learning.ranges[node] = [RangeSpec(**spec) for spec in entry["ranges"]]
            learning.normal_forwarded[node] = entry["normal_forwarded"]
            learning.self_sets[node] = SelfSet(
                node=node,
                antigens=[
                    Antigen(bits=BitString.from_str(s), node=node, window=i, run=-1)
                    for i, s in enumerate(entry["self_set"])
                ],
            )
            if entry.get("detectors"):
                learning.detectors[node] = self.read_detectors(directory / entry["detectors"])
        return learning

    @staticmethod
    def write_detection(detection: DetectionResult, verdicts: Sequence[NodeVerdict], path: Path):
        bundle = {
            "runs": detection.runs,
            "misbehaving": sorted(detection.misbehaving),
            "dropped_misbehavior": detection.dropped_misbehavior,
            "gene_usage": detection.gene_usage.model_dump(),
            "forwarded": [[run, node, count] for (run, node), count in sorted(detection.forwarded.items())],
            "next_hops": {
                str(run): {str(node): {str(h): c for h, c in hops.items()} for node, hops in per_node.items()}
                for run, per_node in detection.next_hops.items()
            },
            "outcomes": [vars(o) for _, o in sorted(detection.outcomes.items())],
            "verdicts": [v.model_dump() for v in verdicts],
        }
        Path(path).write_text(json.dumps(bundle, indent=2))

    @staticmethod
    def read_detection(path: Path) -> Tuple[DetectionResult, List[NodeVerdict]]:
        try:
            bundle = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValueError(f"Detection bundle not found: {path}")
        detection = DetectionResult(
            runs=bundle["runs"],
            misbehaving=frozenset(bundle["misbehaving"]),
            dropped_misbehavior=bundle["dropped_misbehavior"],
            gene_usage=GeneUsage(**bundle["gene_usage"]),
            forwarded={(run, node): count for run, node, count in bundle["forwarded"]},
            next_hops={
                int(run): {int(node): {int(h): c for h, c in hops.items()} for node, hops in per_node.items()}
                for run, per_node in bundle["next_hops"].items()
            },
        )
        for entry in bundle["outcomes"]:
            outcome = NodeRun(**entry)
            detection.outcomes[(outcome.run, outcome.node)] = outcome
        verdicts = [NodeVerdict(**v) for v in bundle["verdicts"]]
        return detection, verdicts

    @staticmethod
    def write_metrics(reports: Iterable[MetricsReport], path: Path):
        frame = pd.DataFrame([metrics_row(r) for r in reports], columns=METRICS_COLUMNS)
        frame.to_csv(path, index=False)

    @staticmethod
    def write_gene_table(rows: List[dict], path: Path):
        pd.DataFrame(rows).to_csv(path, index=False)

    @staticmethod
    def write_report_json(report: MetricsReport, path: Path):
        Path(path).write_text(report.model_dump_json(indent=2))
