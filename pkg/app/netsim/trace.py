"""Per-packet observation records produced by the simulator."""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, NamedTuple, Optional

NO_NODE = -1
MICROSECONDS = 1_000_000

# Frame types; RREQ is a broadcast frame, the others are handshake stages
RTS, CTS, DATA, ACK, RREQ, RREP, RERR = "RTS", "CTS", "DATA", "ACK", "RREQ", "RREP", "RERR"
FRAMES = (RTS, CTS, DATA, ACK, RREQ, RREP, RERR)
PAYLOADS = (DATA, RREQ, RREP, RERR)

SENT = "sent"
RECEIVED = "received"
OVERHEARD = "overheard"
DROPPED_MISBEHAVIOR = "dropped_misbehavior"
DROPPED_CONTENTION = "dropped_contention"
ORIGINATED = "originated"
DELIVERED = "delivered"
ACTIONS = (SENT, RECEIVED, OVERHEARD, DROPPED_MISBEHAVIOR, DROPPED_CONTENTION, ORIGINATED, DELIVERED)

TRACE_COLUMNS = ["clock_us", "node", "next_hop", "src", "dst", "size", "frame", "action", "packet_id", "payload"]


class PacketEvent(NamedTuple):
    clock_us: int
    node: int
    next_hop: int
    src: int
    dst: int
    size: int
    frame: str
    action: str
    packet_id: int
    payload: str

    @property
    def clock(self) -> float:
        return self.clock_us / MICROSECONDS

    def to_line(self) -> str:
        return "\t".join(str(v) for v in self)


def to_microseconds(seconds: float) -> int:
    return int(round(seconds * MICROSECONDS))


@dataclass
class FlowCounters:
    injected: int = 0
    delivered: int = 0
    dropped_misbehavior: int = 0
    dropped_contention: int = 0
    in_flight: int = 0

    def conserved(self) -> bool:
        return self.injected == (
            self.delivered + self.dropped_misbehavior + self.dropped_contention + self.in_flight
        )


@dataclass
class Trace:
    run: int = 0
    duration: float = 0.0
    seed: int = 0
    events: List[PacketEvent] = field(default_factory=list)
    flows: Dict[int, FlowCounters] = field(default_factory=dict)
    # node -> [sum of contenders seen at handshake start, handshakes]
    contention: Dict[int, List[int]] = field(default_factory=dict)

    def mean_contenders(self, node: Optional[int] = None) -> float:
        samples = self.contention.values() if node is None else [self.contention.get(node, [0, 0])]
        total = sum(s[0] for s in samples)
        count = sum(s[1] for s in samples)
        return total / count if count else 0.0

    def __iter__(self) -> Iterator[PacketEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def finalize(self):
        # Stable on emission order, so equal clocks keep a deterministic tiebreak
        self.events.sort(key=lambda e: e.clock_us)

    def totals(self) -> FlowCounters:
        total = FlowCounters()
        for counters in self.flows.values():
            total.injected += counters.injected
            total.delivered += counters.delivered
            total.dropped_misbehavior += counters.dropped_misbehavior
            total.dropped_contention += counters.dropped_contention
            total.in_flight += counters.in_flight
        return total

    def select(self, **criteria) -> List[PacketEvent]:
        return [e for e in self.events if all(getattr(e, k) == v for k, v in criteria.items())]
