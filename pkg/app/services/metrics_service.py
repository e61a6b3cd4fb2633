import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Set

import numpy as np
from scipy import stats

from app.schemas.schemas import ExperimentConfig, Interval, MetricsReport, NodeVerdict
from app.services.pipeline_service import DetectionResult, LearningResult

logger = logging.getLogger(__name__)

CONFIDENCE = 0.95


def ci95(values: Sequence[float], confidence: float = CONFIDENCE) -> Interval:
    """Mean and Student-t half width over independent runs."""
    values = [float(v) for v in values]
    if not values:
        return Interval(n=0)
    mean = float(np.mean(values))
    if len(values) < 2:
        return Interval(mean=mean, half_width=None, n=1)
    sem = stats.sem(values)
    half_width = 0.0 if sem == 0 or math.isnan(sem) else float(sem * stats.t.ppf((1 + confidence) / 2, len(values) - 1))
    return Interval(mean=mean, half_width=half_width, n=len(values))


class MetricsService:
    def __init__(self, config: ExperimentConfig):
        self.config = config

    def node_detection(self, runs: Sequence[int], verdicts: Sequence[NodeVerdict]) -> Dict[int, Dict[str, Set[int]]]:
        """Per run: misbehaving next hops of eligible monitors (ns), of flagged ones (dns), and false positives."""
        per_run = {run: {"ns": set(), "dns": set(), "fp": set()} for run in runs}
        for verdict in verdicts:
            if not verdict.eligible or verdict.run not in per_run:
                continue
            entry = per_run[verdict.run]
            entry["ns"].update(verdict.misbehaving_next_hops)
            if verdict.flagged:
                if verdict.misbehaving_next_hops:
                    entry["dns"].update(verdict.misbehaving_next_hops)
                else:
                    entry["fp"].add(verdict.node)
        return per_run

    def compute_metrics(
        self,
        cell: str,
        learning: LearningResult,
        detection: DetectionResult,
        verdicts: List[NodeVerdict],
    ) -> MetricsReport:
        if not detection.runs:
            raise ValueError("Metrics need at least one detection run")
        config = self.config
        per_run = self.node_detection(detection.runs, verdicts)
        dns = sum(len(per_run[run]["dns"]) for run in detection.runs)
        ns = sum(len(per_run[run]["ns"]) for run in detection.runs)
        run_rates = [len(e["dns"]) / len(e["ns"]) for run, e in sorted(per_run.items()) if e["ns"]]
        fp_counts = [len(per_run[run]["fp"]) for run in detection.runs]
        if not ns:
            logger.info("Cell %s: no eligible misbehaving node, detection rate undefined", cell)

        string_ns = string_dns = 0
        for verdict in verdicts:
            outcome = detection.outcomes.get((verdict.run, verdict.node))
            if not verdict.eligible or outcome is None:
                continue
            for flag, non_self in zip(outcome.flags, outcome.non_self):
                if non_self:
                    string_ns += 1
                    string_dns += int(flag)

        generated = list(learning.detectors.values())
        iterations = sum(ds.stats.iterations for ds in generated)
        non_valid = sum(ds.stats.non_valid for ds in generated)

        outcomes = list(detection.outcomes.values())
        used_per_run = [len({m for m in o.matched if m is not None}) for o in outcomes]
        used_per_window = [count for o in outcomes for count in o.matching_counts]
        antigens_per_run = [len(set(o.antigens)) for o in outcomes]
        per_window: Dict[tuple, Set[str]] = defaultdict(set)
        for o in outcomes:
            for window, antigen in enumerate(o.antigens):
                per_window[(o.run, window)].add(antigen)

        forwarded = [count for count in detection.forwarded.values() if count]
        used = ci95(used_per_run)
        return MetricsReport(
            cell=cell,
            r=config.ais.r,
            detector_count=config.ais.detector_count,
            level=config.misbehavior.level,
            traffic_model=config.traffic.model,
            detection_rate=dns / ns if ns else None,
            detection_rate_ci=ci95(run_rates),
            dns=dns,
            ns=ns,
            string_detection_rate=string_dns / string_ns if string_ns else None,
            string_dns=string_dns,
            string_ns=string_ns,
            false_positives=ci95(fp_counts),
            false_positives_total=sum(fp_counts),
            non_valid_rate=non_valid / iterations if iterations else 0.0,
            iterations=iterations / len(generated) if generated else 0.0,
            wall_time=sum(ds.stats.wall_time for ds in generated),
            detectors_used_per_run=used,
            detectors_used_fraction=(used.mean or 0.0) / config.ais.detector_count,
            detectors_used_per_window=ci95(used_per_window),
            unique_antigens_per_run=ci95(antigens_per_run),
            unique_antigens_per_window=ci95([len(s) for s in per_window.values()]),
            runs_over_window_threshold=sum(v.windows_flagged >= config.window_threshold for v in verdicts),
            data_rate=float(np.mean(forwarded)) / config.duration if forwarded else 0.0,
            gene_usage=detection.gene_usage,
            mean_grown_r=learning.mean_grown_r,
            mean_shrunk_r=learning.mean_shrunk_r,
            verdicts=verdicts,
        )


def failed_report(config: ExperimentConfig, cell: str, error: str) -> MetricsReport:
    return MetricsReport(
        cell=cell,
        status="failed",
        error=error,
        r=config.ais.r,
        detector_count=config.ais.detector_count,
        level=config.misbehavior.level,
        traffic_model=config.traffic.model,
    )


def interval_text(interval: Interval, digits: int = 3) -> str:
    if interval.mean is None:
        return "n/a"
    if interval.half_width is None:
        return f"{interval.mean:.{digits}f}"
    return f"{interval.mean:.{digits}f} ± {interval.half_width:.{digits}f}"


def rate_text(rate: Optional[float]) -> str:
    return "undefined" if rate is None else f"{rate:.3f}"
