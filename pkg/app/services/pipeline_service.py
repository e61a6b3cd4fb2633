"""Learning and detection phases of one experiment cell.

A cell simulates misbehavior-free learning runs, builds per-node self sets and
detectors from them, then replays detection runs (with the misbehavior plan
active) through the detectors and judges every node by the window and packet
thresholds.
"""
import json
import logging
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from statistics import fmean
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from app.ais.bitmatch import BitString, all_match_spans, genes_touched
from app.ais.encoding import ANTIGEN_LENGTH, BINS, Antigen, RangeSpec, build_antigen, calibrate_ranges, resolve_gene_order
from app.ais.genes import WindowStats, accumulate, forwarded_packets, gene_vector, next_hops
from app.ais.negsel import (
    DetectorSet, SelfSet, detect, generate_detectors, grow_detector, sample_candidates, shrink_detector,
)
from app.netsim.mac import MacParams
from app.netsim.simulator import Connection, MisbehaviorPlan, RoutingParams, run_simulation
from app.netsim.topology import Topology, path_nodes, random_waypoint_snapshot, select_connections
from app.netsim.trace import FlowCounters, Trace
from app.schemas.schemas import ExperimentConfig, GeneUsage, NodeVerdict, Phase

logger = logging.getLogger(__name__)

SUMMARY_CACHE_SIZE = 64


def derive_seed(master_seed: int, *keys) -> int:
    """Stable 32-bit seed for a labelled stream of randomness."""
    words = [master_seed & 0xFFFFFFFF] + [zlib.crc32(str(key).encode()) for key in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class Scenario:
    topology: Topology
    connections: List[Connection]
    misbehaving: FrozenSet[int] = frozenset()


def _choose_misbehaving(config: ExperimentConfig, topology: Topology, pairs: List[Tuple[int, int]]) -> FrozenSet[int]:
    plan = config.misbehavior
    if plan.nodes is not None:
        unknown = set(plan.nodes) - set(topology.node_ids)
        if unknown:
            raise ValueError(f"Misbehaving nodes {sorted(unknown)} are not in the topology")
        return frozenset(plan.nodes)
    if plan.node_count == 0:
        return frozenset()
    endpoints = {node for pair in pairs for node in pair}
    rng = np.random.default_rng(derive_seed(config.master_seed, "misbehavior"))
    others = [n for n in topology.node_ids if n not in endpoints]
    chosen: List[int] = []
    if plan.placement == "relays":
        relays = [n for n in path_nodes(topology, pairs) if n not in endpoints]
        take = min(plan.node_count, len(relays))
        chosen = [int(n) for n in rng.choice(relays, size=take, replace=False)] if take else []
        others = [n for n in others if n not in chosen]
    missing = plan.node_count - len(chosen)
    if missing > len(others):
        raise ValueError(f"Cannot place {plan.node_count} misbehaving nodes among {len(others) + len(chosen)} candidates")
    if missing > 0:
        chosen.extend(int(n) for n in rng.choice(others, size=missing, replace=False))
    return frozenset(chosen)


def build_scenario(config: ExperimentConfig, topology: Optional[Topology] = None) -> Scenario:
    """Topology snapshot, connection endpoints and misbehaving nodes; identical for every cell of a sweep.

    A saved topology replaces the snapshot; endpoints and misbehaving nodes are still drawn from the config seeds.
    """
    if topology is None:
        topo = config.topology
        seed = topo.seed if topo.seed is not None else derive_seed(config.master_seed, "topology")
        topology = random_waypoint_snapshot(
            topo.n, topo.width, topo.height, seed, radius=topo.radius, burn_in=topo.burn_in,
        )
    traffic = config.traffic
    if traffic.endpoints:
        pairs = [(e.source, e.destination) for e in traffic.endpoints]
        unknown = {n for pair in pairs for n in pair} - set(topology.node_ids)
        if unknown:
            raise ValueError(f"Connection endpoints {sorted(unknown)} are not in the topology")
    else:
        pairs = select_connections(
            topology, traffic.connections, traffic.target_hops,
            derive_seed(config.master_seed, "connections"), tolerance=traffic.hop_tolerance,
        )
    if not pairs:
        raise ValueError("No connection could be placed in the topology")
    connections = [
        Connection(src, dst, model=traffic.model.value, rate=traffic.rate, packet_size=traffic.packet_size)
        for src, dst in pairs
    ]
    misbehaving = _choose_misbehaving(config, topology, pairs)
    logger.info("Scenario: %d connections, misbehaving nodes %s", len(connections), sorted(misbehaving))
    return Scenario(topology=topology, connections=connections, misbehaving=misbehaving)


@dataclass
class RunSummary:
    """What the pipeline keeps of a trace: window counters and next-hop tallies."""
    phase: str
    run: int
    seed: int
    windows: Dict[int, List[WindowStats]]
    next_hops: Dict[int, Dict[int, int]] = field(default_factory=dict)
    totals: FlowCounters = field(default_factory=FlowCounters)
    mean_contenders: float = 0.0

    def forwarded(self, node: int) -> int:
        return forwarded_packets(self.windows.get(node, []))


def summarize(trace: Trace, config: ExperimentConfig, phase: str, nodes: Optional[Sequence[int]] = None) -> RunSummary:
    return RunSummary(
        phase=phase,
        run=trace.run,
        seed=trace.seed,
        windows=accumulate(trace, config.window_size, config.duration, nodes),
        next_hops=next_hops(trace),
        totals=trace.totals(),
        mean_contenders=trace.mean_contenders(),
    )


def run_seed(config: ExperimentConfig, phase: Phase, run: int) -> int:
    if phase is Phase.LEARNING:
        return derive_seed(config.master_seed, phase.value, config.traffic.model.value, run)
    plan = config.misbehavior
    return derive_seed(config.master_seed, phase.value, config.traffic.model.value, plan.level, plan.hold_delay, run)


def simulate_run(config: ExperimentConfig, scenario: Scenario, phase: Phase, run: int) -> Trace:
    if phase is Phase.DETECTION and scenario.misbehaving:
        plan = MisbehaviorPlan(scenario.misbehaving, config.misbehavior.level, config.misbehavior.hold_delay)
    else:
        plan = MisbehaviorPlan.none()
    logger.info("Simulating %s run %d", phase.value, run)
    return run_simulation(
        scenario.topology,
        scenario.connections,
        plan,
        config.duration,
        run_seed(config, phase, run),
        mac=MacParams(**config.mac.model_dump()),
        routing=RoutingParams(**config.routing.model_dump()),
        failures=config.failures,
        run=run,
    )


_summary_cache: "OrderedDict[Tuple[str, str, int], RunSummary]" = OrderedDict()


def clear_summary_cache():
    _summary_cache.clear()


def _simulation_fingerprint(config: ExperimentConfig, phase: Phase) -> str:
    relevant = config.model_dump(
        mode="json", include={"topology", "traffic", "mac", "routing", "misbehavior", "failures", "duration", "window_size", "master_seed"},
    )
    if phase is Phase.LEARNING:
        relevant.pop("misbehavior")
    return json.dumps(relevant, sort_keys=True)


def phase_summaries(config: ExperimentConfig, scenario: Scenario, phase: Phase) -> List[RunSummary]:
    """Simulate and summarize every run of a phase; summaries are shared between cells with equal inputs."""
    count = config.runs.learning if phase is Phase.LEARNING else config.runs.detection
    fingerprint = _simulation_fingerprint(config, phase)
    summaries = []
    for run in range(count):
        key = (fingerprint, phase.value, run)
        if key in _summary_cache:
            _summary_cache.move_to_end(key)
        else:
            trace = simulate_run(config, scenario, phase, run)
            _summary_cache[key] = summarize(trace, config, phase.value, scenario.topology.node_ids)
            while len(_summary_cache) > SUMMARY_CACHE_SIZE:
                _summary_cache.popitem(last=False)
        summaries.append(_summary_cache[key])
    return summaries


def gene_order_for(config: ExperimentConfig) -> Tuple[int, ...]:
    order = config.ais.gene_order
    if order == "random":
        rng = np.random.default_rng(derive_seed(config.master_seed, "gene_order"))
        return tuple(int(g) for g in rng.permutation(5))
    return resolve_gene_order(order)


@dataclass
class LearningResult:
    gene_order: Tuple[int, ...]
    ranges: Dict[int, List[RangeSpec]] = field(default_factory=dict)
    self_sets: Dict[int, SelfSet] = field(default_factory=dict)
    detectors: Dict[int, DetectorSet] = field(default_factory=dict)
    normal_forwarded: Dict[int, float] = field(default_factory=dict)
    mean_grown_r: Optional[float] = None
    mean_shrunk_r: Optional[float] = None

    @property
    def evaluated(self) -> List[int]:
        return sorted(self.detectors)


def learning_phase(config: ExperimentConfig, summaries: Sequence[RunSummary], generate: bool = True) -> LearningResult:
    """Self sets and ranges per node from misbehavior-free runs, then detectors for evaluated nodes."""
    if not summaries:
        raise ValueError("Learning needs at least one run")
    tainted = [s.run for s in summaries if s.totals.dropped_misbehavior]
    if tainted:
        raise ValueError(f"Learning runs {tainted} contain misbehavior drops")

    result = LearningResult(gene_order=gene_order_for(config))
    nodes = sorted(set().union(*(s.windows for s in summaries)))
    for node in nodes:
        vectors = [gene_vector(ws, s.run) for s in summaries for ws in s.windows.get(node, [])]
        if not vectors:
            continue
        specs = calibrate_ranges(vectors)
        antigens = [build_antigen(v.values, specs, node, v.window, v.run, result.gene_order) for v in vectors]
        result.ranges[node] = specs
        result.self_sets[node] = SelfSet(node=node, antigens=antigens)
        result.normal_forwarded[node] = fmean(s.forwarded(node) for s in summaries)

    if config.ais.evaluate == "all":
        evaluated = list(result.self_sets)
    else:
        evaluated = [n for n in result.self_sets if result.normal_forwarded[n] >= config.thresholds.packet_threshold]
    if not evaluated:
        logger.warning("No node forwards enough traffic to be evaluated (packet threshold %d)", config.thresholds.packet_threshold)
    if generate:
        for node in evaluated:
            result.detectors[node] = generate_detectors(
                result.self_sets[node],
                config.ais.detector_count,
                config.ais.r,
                derive_seed(config.master_seed, "detectors", config.ais.r, config.ais.detector_count, node),
                config.ais.max_iterations,
            )
        logger.info(
            "Generated %d detectors (r=%d) for %d nodes",
            config.ais.detector_count, config.ais.r, len(result.detectors),
        )
        result.mean_grown_r, result.mean_shrunk_r = tuned_r(config, result)
    return result


def tuned_r(config: ExperimentConfig, learning: LearningResult) -> Tuple[Optional[float], Optional[float]]:
    """Mean grown and mean shrunk r over the same random candidates at every evaluated node."""
    if not config.ais.growth_candidates:
        return None, None
    grown, shrunk = [], []
    for node in learning.evaluated:
        candidates = sample_candidates(
            ANTIGEN_LENGTH, config.ais.growth_candidates, derive_seed(config.master_seed, "growth", node),
        )
        self_set = learning.self_sets[node]
        grown.extend(r for r in (grow_detector(c, self_set) for c in candidates) if r is not None)
        shrunk.extend(r for r in (shrink_detector(c, self_set) for c in candidates) if r is not None)
    return (fmean(grown) if grown else None), (fmean(shrunk) if shrunk else None)


@dataclass
class NodeRun:
    """Per-window detection outcome of one node in one run."""
    run: int
    node: int
    antigens: List[str] = field(default_factory=list)
    flags: List[bool] = field(default_factory=list)
    matched: List[Optional[int]] = field(default_factory=list)
    matching_counts: List[int] = field(default_factory=list)
    non_self: List[bool] = field(default_factory=list)


@dataclass
class DetectionResult:
    runs: List[int] = field(default_factory=list)
    outcomes: Dict[Tuple[int, int], NodeRun] = field(default_factory=dict)
    forwarded: Dict[Tuple[int, int], int] = field(default_factory=dict)
    next_hops: Dict[int, Dict[int, Dict[int, int]]] = field(default_factory=dict)
    misbehaving: FrozenSet[int] = frozenset()
    gene_usage: GeneUsage = field(default_factory=GeneUsage)
    dropped_misbehavior: int = 0


def gene_usage_analysis(
    pairs: Sequence[Tuple[BitString, BitString]],
    r: int,
    gene_order: Optional[Sequence[int]] = None,
    usage: Optional[GeneUsage] = None,
) -> GeneUsage:
    """Credit every gene whose field an agreement span of >= r bits touches.

    A match whose spans stay inside one field counts as single, otherwise as multiple.
    """
    order = resolve_gene_order(gene_order)
    usage = usage or GeneUsage()
    for detector_bits, antigen_bits in pairs:
        fields_hit = set()
        for span in all_match_spans(detector_bits, antigen_bits, r):
            fields_hit |= genes_touched(span, BINS)
        if not fields_hit:
            continue
        for gene in {order[f] for f in fields_hit}:
            usage.per_gene[gene] += 1
        if len(fields_hit) == 1:
            usage.single += 1
        else:
            usage.multiple += 1
    return usage


def detection_phase(
    config: ExperimentConfig,
    learning: LearningResult,
    summaries: Sequence[RunSummary],
    misbehaving: FrozenSet[int] = frozenset(),
) -> DetectionResult:
    """Flag every (node, window) whose antigen matches one of the node's detectors."""
    missing = [n for n in learning.evaluated if n not in learning.ranges]
    if missing:
        raise ValueError(f"No ranges learned for nodes {missing}")
    result = DetectionResult(misbehaving=frozenset(misbehaving))
    for ds in learning.detectors.values():
        ds.reset_usage()
    self_values = {node: set(learning.self_sets[node].unique_values()) for node in learning.evaluated}
    matching_cache: Dict[Tuple[int, int], List[BitString]] = {}

    for summary in summaries:
        result.runs.append(summary.run)
        result.next_hops[summary.run] = summary.next_hops
        result.dropped_misbehavior += summary.totals.dropped_misbehavior
        for node in summary.windows:
            result.forwarded[(summary.run, node)] = summary.forwarded(node)
        for node in learning.evaluated:
            ds = learning.detectors[node]
            outcome = NodeRun(run=summary.run, node=node)
            for ws in summary.windows.get(node, []):
                antigen: Antigen = build_antigen(
                    gene_vector(ws, summary.run).values, learning.ranges[node], node, ws.window, summary.run,
                    learning.gene_order,
                )
                hit = detect(antigen, ds)
                key = (node, antigen.bits.value)
                if key not in matching_cache:
                    matching_cache[key] = [d.bits for d in ds.matching(antigen.bits)] if config.ais.exhaustive else []
                if config.ais.exhaustive and hit is not None:
                    gene_usage_analysis(
                        [(bits, antigen.bits) for bits in matching_cache[key]], ds.r, learning.gene_order, result.gene_usage,
                    )
                outcome.antigens.append(str(antigen))
                outcome.flags.append(hit is not None)
                outcome.matched.append(hit)
                outcome.matching_counts.append(len(matching_cache[key]) if config.ais.exhaustive else int(hit is not None))
                outcome.non_self.append(antigen.bits.value not in self_values[node])
            result.outcomes[(summary.run, node)] = outcome
    flagged = sum(sum(o.flags) for o in result.outcomes.values())
    logger.info("Detection: %d runs, %d flagged windows", len(result.runs), flagged)
    return result


def classify_nodes(config: ExperimentConfig, learning: LearningResult, detection: DetectionResult) -> List[NodeVerdict]:
    """Apply the window threshold and the packet threshold to every node that carried traffic."""
    threshold = config.window_threshold
    packet_threshold = config.thresholds.packet_threshold
    runs = detection.runs
    nodes = sorted({node for _, node in detection.forwarded} | set(learning.normal_forwarded))
    misbehavior_mean = {
        node: fmean(detection.forwarded.get((run, node), 0) for run in runs) if runs else 0.0 for node in nodes
    }
    verdicts = []
    for run in runs:
        hops = detection.next_hops.get(run, {})
        for node in nodes:
            normal = learning.normal_forwarded.get(node, 0.0)
            if normal == 0 and misbehavior_mean[node] == 0:
                continue
            outcome = detection.outcomes.get((run, node))
            windows_flagged = sum(outcome.flags) if outcome else 0
            eligible = normal >= packet_threshold and misbehavior_mean[node] >= packet_threshold
            verdicts.append(NodeVerdict(
                run=run,
                node=node,
                windows_flagged=windows_flagged,
                window_count=config.windows,
                packets_forwarded_mean=detection.forwarded.get((run, node), 0),
                packets_forwarded_normal=normal,
                packets_forwarded_misbehavior=misbehavior_mean[node],
                eligible=eligible,
                flagged=eligible and windows_flagged >= threshold,
                ground_truth_misbehaving=node in detection.misbehaving,
                misbehaving_next_hops=sorted(h for h in hops.get(node, {}) if h in detection.misbehaving),
            ))
    return verdicts


def gene_table(summaries: Sequence[RunSummary], learning: LearningResult) -> List[dict]:
    """One row per (run, node, window): raw counters, gene values and the antigen."""
    rows = []
    for summary in summaries:
        for node in sorted(summary.windows):
            specs = learning.ranges.get(node)
            for ws in summary.windows[node]:
                vector = gene_vector(ws, summary.run)
                row = {"phase": summary.phase, "run": summary.run, "node": node, "window": ws.window}
                row.update(ws.counters())
                row.update({f"gene{i + 1}": value for i, value in enumerate(vector.values)})
                row["antigen"] = (
                    str(build_antigen(vector.values, specs, gene_order=learning.gene_order)) if specs else ""
                )
                rows.append(row)
    return rows
