"""Per-node, per-window gene computation from simulator traces.

A node watches its next hops: MAC handshake completion (gene 1), whether the
next hop forwards what it was handed (gene 2 for data, gene 4 for RERR) and how
long it held it (gene 3 for data, gene 5 for RERR). Counters are summed over all
next hops before any ratio is taken.
"""
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Tuple

from app.ais.encoding import INFINITY
from app.netsim.simulator import watch_records
from app.netsim.trace import ACK, DATA, MICROSECONDS, RECEIVED, RTS, SENT, Trace

DEFAULT_WINDOW_SIZE = 500.0


@dataclass
class WindowStats:
    node: int
    window: int
    rts_sent: int = 0
    handshakes_complete: int = 0
    data_sent_to_next: int = 0
    data_forwarded_by_next: int = 0
    forward_delays: List[float] = field(default_factory=list)
    rerr_sent_to_next: int = 0
    rerr_forwarded_by_next: int = 0
    rerr_delays: List[float] = field(default_factory=list)
    data_packets_forwarded_by_self: int = 0

    def __add__(self, other: "WindowStats") -> "WindowStats":
        merged = WindowStats(node=self.node, window=self.window)
        for f in fields(self):
            if f.name in ("node", "window"):
                continue
            setattr(merged, f.name, getattr(self, f.name) + getattr(other, f.name))
        return merged

    def counters(self) -> Dict[str, int]:
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in ("node", "window", "forward_delays", "rerr_delays")
        }


@dataclass(frozen=True)
class GeneVector:
    values: Tuple[float, float, float, float, float]
    node: int = -1
    window: int = -1
    run: int = -1

    def __getitem__(self, index: int) -> float:
        return self.values[index]

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else INFINITY


def _mean(delays: List[float]) -> float:
    return sum(delays) / len(delays) if delays else 0.0


def gene1(ws: WindowStats) -> float:
    return _ratio(ws.handshakes_complete, ws.rts_sent)


def gene2(ws: WindowStats) -> float:
    return _ratio(ws.data_forwarded_by_next, ws.data_sent_to_next)


def gene3(ws: WindowStats) -> float:
    return _mean(ws.forward_delays)


def gene4(ws: WindowStats) -> float:
    return _ratio(ws.rerr_forwarded_by_next, ws.rerr_sent_to_next)


def gene5(ws: WindowStats) -> float:
    return _mean(ws.rerr_delays)


def gene_vector(ws: WindowStats, run: int = -1) -> GeneVector:
    values = (gene1(ws), gene2(ws), gene3(ws), gene4(ws), gene5(ws))
    return GeneVector(values=values, node=ws.node, window=ws.window, run=run)


def window_count(duration: float, window_size: float) -> int:
    return int(math.floor(duration / window_size + 1e-9))


def window_index(clock_us: int, window_us: int) -> int:
    """Events on a boundary belong to the earlier window."""
    return max(0, (clock_us - 1) // window_us)


def accumulate_per_next_hop(
    trace: Trace,
    window_size: float = DEFAULT_WINDOW_SIZE,
    duration: Optional[float] = None,
) -> Dict[Tuple[int, int], List[WindowStats]]:
    """WindowStats keyed by (node, next hop), complete windows only.

    Handshake counters come from the node's own frames; forwarding counters
    come from its watchdog records, and an overhearing only counts in the
    window the packet was handed over in.
    """
    duration = trace.duration if duration is None else duration
    windows = window_count(duration, window_size)
    window_us = int(round(window_size * MICROSECONDS))
    stats: Dict[Tuple[int, int], List[WindowStats]] = {}

    def slot(node: int, next_hop: int, window: int) -> WindowStats:
        key = (node, next_hop)
        if key not in stats:
            stats[key] = [WindowStats(node=node, window=w) for w in range(windows)]
        return stats[key][window]

    for event in trace:
        window = window_index(event.clock_us, window_us)
        if window >= windows:
            break
        if event.action == SENT and event.frame == RTS:
            slot(event.node, event.next_hop, window).rts_sent += 1
        elif event.action == RECEIVED and event.frame == ACK:
            ws = slot(event.node, event.next_hop, window)
            ws.handshakes_complete += 1
            if event.payload == DATA:
                ws.data_packets_forwarded_by_self += 1

    for (node, payload), records in watch_records(trace).items():
        for record in records:
            window = window_index(record.handed_us, window_us)
            if window >= windows:
                continue
            ws = slot(node, record.next_hop, window)
            seen = record.forwarded and window_index(record.forwarded_us, window_us) == window
            if payload == DATA:
                ws.data_sent_to_next += 1
                if seen:
                    ws.data_forwarded_by_next += 1
                    ws.forward_delays.append(record.delay)
            else:
                ws.rerr_sent_to_next += 1
                if seen:
                    ws.rerr_forwarded_by_next += 1
                    ws.rerr_delays.append(record.delay)
    return stats


def accumulate(
    trace: Trace,
    window_size: float = DEFAULT_WINDOW_SIZE,
    duration: Optional[float] = None,
    nodes: Optional[Iterable[int]] = None,
) -> Dict[int, List[WindowStats]]:
    """Per-node WindowStats summed over every next hop."""
    duration = trace.duration if duration is None else duration
    windows = window_count(duration, window_size)
    per_hop = accumulate_per_next_hop(trace, window_size, duration)
    if nodes is None:
        nodes = sorted({e.node for e in trace} | {node for node, _ in per_hop})
    result = {node: [WindowStats(node=node, window=w) for w in range(windows)] for node in nodes}
    for (node, _), series in sorted(per_hop.items()):
        if node not in result:
            continue
        result[node] = [total + part for total, part in zip(result[node], series)]
    return result


def forwarded_packets(series: List[WindowStats]) -> int:
    return sum(ws.data_packets_forwarded_by_self for ws in series)


def next_hops(trace: Trace) -> Dict[int, Dict[int, int]]:
    """Completed DATA handshakes per (node, next hop); used for ground-truth attribution."""
    counts: Dict[int, Dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for event in trace:
        if event.action == RECEIVED and event.frame == ACK and event.payload == DATA:
            counts[event.node][event.next_hop] += 1
    return {node: dict(hops) for node, hops in counts.items()}
