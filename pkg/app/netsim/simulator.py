"""Discrete-event simulation of a static multihop sensor network.

One simpy environment per run: every node runs a MAC loop serving its IP
queue, every connection runs a traffic source, and DSR-style discovery
processes flood RREQs on demand. Misbehaving relays drop (or hold) packets
before they reach the IP queue.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import numpy as np
import simpy

from app.netsim.mac import HandshakeOutcome, MacParams, mac_handshake, stage_failure_probability
from app.netsim.routing import DISCARD, REPLY, RouteCache, RouteDiscovery, reverse_prefix
from app.netsim.topology import Topology
from app.netsim.trace import (
    ACK, DATA, DELIVERED, DROPPED_CONTENTION, DROPPED_MISBEHAVIOR, NO_NODE, ORIGINATED, OVERHEARD,
    MICROSECONDS, RECEIVED, RERR, RREP, RREQ, SENT, FlowCounters, PacketEvent, Trace, to_microseconds,
)

logger = logging.getLogger(__name__)

CBR = "CBR"
POISSON = "POISSON"


@dataclass(frozen=True)
class Connection:
    source: int
    destination: int
    model: str = CBR
    rate: float = 1.0
    packet_size: int = 512
    start: Optional[float] = None
    stop: Optional[float] = None

    def __post_init__(self):
        if self.source == self.destination:
            raise ValueError(f"Connection source and destination are both {self.source}")
        if self.model not in (CBR, POISSON):
            raise ValueError(f"Unknown traffic model {self.model}")
        if self.rate <= 0:
            raise ValueError("Connection rate must be positive")


@dataclass(frozen=True)
class MisbehaviorPlan:
    nodes: FrozenSet[int] = frozenset()
    drop_probability: float = 0.0
    hold_delay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        if self.nodes and not (0.0 < self.drop_probability <= 1.0 or self.hold_delay > 0):
            raise ValueError(f"Drop probability must be in (0, 1], got {self.drop_probability}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"Drop probability must be in [0, 1], got {self.drop_probability}")

    @classmethod
    def none(cls) -> "MisbehaviorPlan":
        return cls()

    def __contains__(self, node: int) -> bool:
        return node in self.nodes


@dataclass(frozen=True)
class RoutingParams:
    send_buffer: int = 50
    request_timeout: float = 1.0
    max_request_timeout: float = 16.0
    max_replies: int = 3
    rreq_jitter: float = 0.01
    rreq_size: int = 32
    rrep_size: int = 32
    rerr_size: int = 24
    max_hops: int = 64


@dataclass(slots=True)
class Packet:
    id: int
    payload: str
    src: int
    dst: int
    size: int
    route: List[int] = field(default_factory=list)
    hop: int = 0
    flow: int = -1
    request_id: int = -1
    discovered: Optional[List[int]] = None
    broken_link: Optional[Tuple[int, int]] = None

    @property
    def holder(self) -> int:
        return self.route[self.hop]

    @property
    def next_hop(self) -> int:
        return self.route[self.hop + 1]


class Simulator:
    def __init__(
        self,
        topology: Topology,
        connections: List[Connection],
        plan: MisbehaviorPlan,
        duration: float,
        seed: int,
        mac: MacParams = MacParams(),
        routing: RoutingParams = RoutingParams(),
        failures: Optional[Dict[int, float]] = None,
        run: int = 0,
    ):
        if duration <= 0:
            raise ValueError("Simulation duration must be positive")
        self.topology = topology
        self.connections = connections
        self.plan = plan
        self.duration = duration
        self.mac = mac
        self.routing = routing
        self.failures = failures or {}
        self.rng = np.random.default_rng(seed)
        self.env = simpy.Environment()
        self.trace = Trace(run=run, duration=duration, seed=seed)

        nodes = topology.node_ids
        self.neighbors = {n: sorted(topology.neighbors(n)) for n in nodes}
        self.two_hop = {n: sorted(topology.two_hop(n)) for n in nodes}
        self.queues = {n: simpy.Store(self.env) for n in nodes}
        self.busy = {n: 0 for n in nodes}
        self.last_tx_end = {n: float("-inf") for n in nodes}
        self.caches = {n: RouteCache(n, routing.max_replies) for n in nodes}
        self.discovery = RouteDiscovery(self.caches, routing.max_replies, routing.max_hops)
        self.failed: Set[int] = set()

        self.send_buffers: Dict[Tuple[int, int], Deque[Packet]] = {}
        self.discovering: Set[Tuple[int, int]] = set()
        self.live: Dict[int, Packet] = {}
        self.flows = {i: FlowCounters() for i in range(len(connections))}
        self._packet_ids = 0

    def run(self) -> Trace:
        for node in self.topology.node_ids:
            self.env.process(self._mac_loop(node))
        for flow, connection in enumerate(self.connections):
            self.env.process(self._traffic_source(flow, connection))
        for node, at in sorted(self.failures.items()):
            self.env.process(self._fail_node(node, at))
        self.env.run(until=self.duration)

        for packet in self.live.values():
            self.flows[packet.flow].in_flight += 1
        horizon = to_microseconds(self.duration)
        self.trace.events = [e for e in self.trace.events if e.clock_us <= horizon]
        self.trace.flows = self.flows
        self.trace.finalize()
        totals = self.trace.totals()
        logger.info(
            "Run %d: injected %d, delivered %d, misbehavior drops %d, contention drops %d, in flight %d",
            self.trace.run, totals.injected, totals.delivered, totals.dropped_misbehavior,
            totals.dropped_contention, totals.in_flight,
        )
        return self.trace

    # -- bookkeeping ---------------------------------------------------------

    def _new_id(self) -> int:
        self._packet_ids += 1
        return self._packet_ids

    def _emit(self, clock: float, node: int, next_hop: int, packet: Packet, frame: str, action: str):
        self.trace.events.append(PacketEvent(
            to_microseconds(clock), node, next_hop, packet.src, packet.dst, packet.size,
            frame, action, packet.id, packet.payload,
        ))

    def _drop(self, node: int, packet: Packet, action: str, next_hop: int = NO_NODE):
        self._emit(self.env.now, node, next_hop, packet, packet.payload, action)
        if packet.payload == DATA and self.live.pop(packet.id, None) is not None:
            counters = self.flows[packet.flow]
            if action == DROPPED_MISBEHAVIOR:
                counters.dropped_misbehavior += 1
            else:
                counters.dropped_contention += 1

    def _contenders(self, node: int) -> int:
        now = self.env.now
        window = self.mac.activity_window
        count = sum(
            1 for other in self.two_hop[node]
            if self.busy[other] > 0 or now - self.last_tx_end[other] <= window
        )
        sample = self.trace.contention.setdefault(node, [0, 0])
        sample[0] += count
        sample[1] += 1
        return count

    def _enqueue(self, node: int, packet: Packet):
        if node in self.failed or len(self.queues[node].items) >= self.mac.queue_capacity:
            self._drop(node, packet, DROPPED_CONTENTION)
            return
        self.busy[node] += 1
        self.queues[node].put(packet)

    # -- processes -----------------------------------------------------------

    def _traffic_source(self, flow: int, connection: Connection):
        period = 1.0 / connection.rate
        start = connection.start if connection.start is not None else float(self.rng.uniform(0, period))
        yield self.env.timeout(start)
        while connection.stop is None or self.env.now < connection.stop:
            if connection.source not in self.failed:
                packet = Packet(
                    id=self._new_id(), payload=DATA, src=connection.source, dst=connection.destination,
                    size=connection.packet_size, flow=flow,
                )
                self.flows[flow].injected += 1
                self.live[packet.id] = packet
                self._emit(self.env.now, packet.src, NO_NODE, packet, DATA, ORIGINATED)
                self._send_from_source(packet)
            gap = period if connection.model == CBR else float(self.rng.exponential(period))
            yield self.env.timeout(gap)

    def _fail_node(self, node: int, at: float):
        yield self.env.timeout(at)
        self.failed.add(node)
        logger.debug("Node %d failed at %.3f s", node, at)

    def _mac_loop(self, node: int):
        queue = self.queues[node]
        while True:
            packet = yield queue.get()
            if node in self.failed:
                self.busy[node] -= 1
                self._drop(node, packet, DROPPED_CONTENTION)
                continue
            if packet.payload == RREQ:
                yield from self._broadcast(node, packet)
                continue

            next_hop = packet.next_hop
            alive = next_hop not in self.failed and self.topology.has_edge(node, next_hop)
            outcome = mac_handshake(
                packet.size, self._contenders(node), self.rng, self.mac, receiver_alive=alive,
            )
            self._record_handshake(node, next_hop, packet, outcome)
            yield self.env.timeout(outcome.elapsed)
            self.busy[node] -= 1
            self.last_tx_end[node] = self.env.now
            if outcome.complete:
                packet.hop += 1
                self._receive(next_hop, packet)
            else:
                self._link_failure(node, next_hop, packet)

    def _record_handshake(self, node: int, next_hop: int, packet: Packet, outcome: HandshakeOutcome):
        start = self.env.now
        for step in outcome.steps:
            if step.at_receiver:
                self._emit(start + step.offset, next_hop, node, packet, step.frame, step.action)
            else:
                self._emit(start + step.offset, node, next_hop, packet, step.frame, step.action)
        # The previous hop listens in promiscuous mode for the retransmission
        offset = outcome.data_frame_offset
        if packet.hop > 0 and packet.payload in (DATA, RERR) and offset is not None:
            watcher = packet.route[packet.hop - 1]
            if watcher not in self.failed:
                self._emit(start + offset, watcher, next_hop, packet, DATA, OVERHEARD)

    def _broadcast(self, node: int, packet: Packet):
        contenders = self._contenders(node)
        access = self.mac.difs + int(self.rng.integers(0, self.mac.contention_window + 1)) * self.mac.slot
        self._emit(self.env.now + access, node, NO_NODE, packet, RREQ, SENT)
        yield self.env.timeout(access + self.mac.frame_time(packet.size))
        self.busy[node] -= 1
        self.last_tx_end[node] = self.env.now
        p_loss = stage_failure_probability(contenders, self.mac)
        for neighbor in self.neighbors[node]:
            if neighbor in self.failed or self.rng.random() < p_loss:
                continue
            self._receive_request(neighbor, packet)

    def _hold(self, node: int, packet: Packet):
        yield self.env.timeout(self.plan.hold_delay)
        self._enqueue(node, packet)

    def _delayed_enqueue(self, node: int, packet: Packet, delay: float):
        yield self.env.timeout(delay)
        self._enqueue(node, packet)

    # -- network layer -------------------------------------------------------

    def _misbehaves(self, node: int, packet: Packet) -> bool:
        """Apply the plan to a packet node should forward; True when it was consumed."""
        if node not in self.plan:
            return False
        if self.plan.drop_probability > 0 and self.rng.random() < self.plan.drop_probability:
            self._drop(node, packet, DROPPED_MISBEHAVIOR)
            return True
        if self.plan.hold_delay > 0:
            self.env.process(self._hold(node, packet))
            return True
        return False

    def _send_from_source(self, packet: Packet):
        route = self.discovery.lookup(packet.src, packet.dst)
        if route is not None:
            packet.route, packet.hop = route, 0
            self._enqueue(packet.src, packet)
            return
        key = (packet.src, packet.dst)
        buffer = self.send_buffers.setdefault(key, deque())
        if len(buffer) >= self.routing.send_buffer:
            self._drop(packet.src, packet, DROPPED_CONTENTION)
        else:
            buffer.append(packet)
        self._discover(packet.src, packet.dst)

    def _flush_send_buffer(self, src: int, dst: int):
        buffer = self.send_buffers.get((src, dst))
        while buffer and self.discovery.lookup(src, dst) is not None:
            packet = buffer.popleft()
            packet.route, packet.hop = self.discovery.lookup(src, dst), 0
            self._enqueue(src, packet)

    def _discover(self, src: int, dst: int):
        if (src, dst) in self.discovering:
            return
        self.discovering.add((src, dst))
        self.env.process(self._discovery_loop(src, dst))

    def _discovery_loop(self, src: int, dst: int):
        timeout = self.routing.request_timeout
        while self.discovery.lookup(src, dst) is None and src not in self.failed:
            _, request_id = self.discovery.new_request(src)
            request = Packet(
                id=self._new_id(), payload=RREQ, src=src, dst=dst, size=self.routing.rreq_size,
                route=[src], request_id=request_id,
            )
            self._enqueue(src, request)
            yield self.env.timeout(timeout)
            if self.discovery.lookup(src, dst) is None:
                logger.debug("No route %d->%d yet, re-querying in %.1f s", src, dst, timeout)
            timeout = min(timeout * 2, self.routing.max_request_timeout)
        self.discovering.discard((src, dst))
        self._flush_send_buffer(src, dst)

    def _receive_request(self, node: int, request: Packet):
        self._emit(self.env.now, node, NO_NODE, request, RREQ, RECEIVED)
        route = request.route + [node]
        action = self.discovery.on_request(node, (request.src, request.request_id), route, request.dst)
        if action == REPLY:
            self._reply(route)
            return
        if action == DISCARD:
            return
        copy = Packet(
            id=request.id, payload=RREQ, src=request.src, dst=request.dst, size=request.size,
            route=route, request_id=request.request_id,
        )
        if self._misbehaves(node, copy):
            return
        self.env.process(self._delayed_enqueue(node, copy, float(self.rng.uniform(0, self.routing.rreq_jitter))))

    def _reply(self, discovered: List[int]):
        destination = discovered[-1]
        reply = Packet(
            id=self._new_id(), payload=RREP, src=destination, dst=discovered[0], size=self.routing.rrep_size,
            route=list(reversed(discovered)), discovered=list(discovered),
        )
        self._enqueue(destination, reply)

    def _receive(self, node: int, packet: Packet):
        if node == packet.route[-1]:
            if packet.payload == DATA:
                if self.live.pop(packet.id, None) is not None:
                    self.flows[packet.flow].delivered += 1
                self._emit(self.env.now, node, NO_NODE, packet, DATA, DELIVERED)
            elif packet.payload == RREP:
                self._emit(self.env.now, node, NO_NODE, packet, RREP, RECEIVED)
                self.discovery.on_reply(packet.discovered)
                self._flush_send_buffer(node, packet.discovered[-1])
            elif packet.payload == RERR:
                self._emit(self.env.now, node, NO_NODE, packet, RERR, RECEIVED)
                self.discovery.on_error(node, *packet.broken_link)
            return
        if packet.payload == RERR:
            self.discovery.on_error(node, *packet.broken_link)
        if self._misbehaves(node, packet):
            return
        self._enqueue(node, packet)

    def _link_failure(self, node: int, next_hop: int, packet: Packet):
        purged = self.discovery.on_error(node, node, next_hop)
        logger.debug("Link %d->%d broken, %d cached routes purged", node, next_hop, purged)
        self._drop(node, packet, DROPPED_CONTENTION, next_hop)
        if packet.payload != DATA or node == packet.src:
            return
        error = Packet(
            id=self._new_id(), payload=RERR, src=node, dst=packet.src, size=self.routing.rerr_size,
            route=list(reverse_prefix(packet.route, packet.hop)), broken_link=(node, next_hop),
        )
        self._emit(self.env.now, node, NO_NODE, error, RERR, ORIGINATED)
        self._enqueue(node, error)


def run_simulation(
    topology: Topology,
    connections: List[Connection],
    plan: MisbehaviorPlan,
    duration: float,
    seed: int,
    **options,
) -> Trace:
    return Simulator(topology, connections, plan, duration, seed, **options).run()


@dataclass(frozen=True)
class WatchRecord:
    """A packet a node handed to its next hop and, if overheard, when that hop sent it on."""
    packet_id: int
    next_hop: int
    handed_us: int
    forwarded_us: Optional[int] = None

    @property
    def handed_at(self) -> float:
        return self.handed_us / MICROSECONDS

    @property
    def forwarded_at(self) -> Optional[float]:
        return None if self.forwarded_us is None else self.forwarded_us / MICROSECONDS

    @property
    def forwarded(self) -> bool:
        return self.forwarded_us is not None

    @property
    def delay(self) -> Optional[float]:
        return None if self.forwarded_us is None else (self.forwarded_us - self.handed_us) / MICROSECONDS


def watch_records(
    events: Iterable[PacketEvent],
    payloads: Tuple[str, ...] = (DATA, RERR),
) -> Dict[Tuple[int, str], List[WatchRecord]]:
    """WatchRecords of every watching node in one pass, keyed by (node, payload), in hand-over order.

    A node watches a packet once its handshake with the next hop completed,
    unless that next hop is the destination. Only the first overhearing after
    the hand-over counts.
    """
    handed: Dict[Tuple[int, str, int], Tuple[int, int]] = {}
    forwarded: Dict[Tuple[int, str, int], int] = {}
    for event in events:
        if event.payload not in payloads:
            continue
        key = (event.node, event.payload, event.packet_id)
        if event.frame == ACK and event.action == RECEIVED:
            if event.next_hop != event.dst:
                handed.setdefault(key, (event.next_hop, event.clock_us))
        elif event.action == OVERHEARD and key in handed:
            forwarded.setdefault(key, event.clock_us)
    records: Dict[Tuple[int, str], List[WatchRecord]] = {}
    for (node, payload, packet_id), (next_hop, at) in handed.items():
        records.setdefault((node, payload), []).append(
            WatchRecord(packet_id, next_hop, at, forwarded.get((node, payload, packet_id)))
        )
    return records


def promiscuous_observe(
    trace: Iterable[PacketEvent],
    node: int,
    start: float = 0.0,
    end: float = float("inf"),
    payload: str = DATA,
) -> List[WatchRecord]:
    """What node saw of its next hops forwarding the packets it handed them between start and end."""
    visible = (e for e in trace if e.node == node and start <= e.clock < end)
    return watch_records(visible, (payload,)).get((node, payload), [])
