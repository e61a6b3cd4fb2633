import pytest

from app.ais.encoding import INFINITY
from app.ais.genes import (
    WindowStats, accumulate, accumulate_per_next_hop, forwarded_packets, gene_vector, next_hops, window_count,
    window_index,
)
from app.netsim.simulator import Connection, MisbehaviorPlan, promiscuous_observe, run_simulation
from app.netsim.trace import ACK, DATA, OVERHEARD, RECEIVED, RERR, RTS, SENT, PacketEvent, Trace


def event(seconds, node, next_hop, frame, action, packet_id, payload=DATA, src=0, dst=3):
    return PacketEvent(int(round(seconds * 1_000_000)), node, next_hop, src, dst, 512, frame, action, packet_id, payload)


@pytest.fixture
def relay_trace():
    """Node 1 relays 0->3 traffic to node 2; node 2 delivers and relays one RERR back towards 0."""
    events = [
        event(1.0, 1, 2, RTS, SENT, 1),
        event(1.001, 1, 2, ACK, RECEIVED, 1),
        event(1.4, 2, 3, RTS, SENT, 1),
        event(1.5, 1, 3, DATA, OVERHEARD, 1),
        event(1.501, 2, 3, ACK, RECEIVED, 1),
        event(2.0, 1, 2, RTS, SENT, 2),
        event(2.001, 1, 2, ACK, RECEIVED, 2),
        event(3.0, 2, 1, RTS, SENT, 9, payload=RERR, src=2, dst=0),
        event(3.001, 2, 1, ACK, RECEIVED, 9, payload=RERR, src=2, dst=0),
        event(3.2, 2, 0, DATA, OVERHEARD, 9, payload=RERR, src=2, dst=0),
        event(9.9, 1, 2, RTS, SENT, 4),
        event(9.901, 1, 2, ACK, RECEIVED, 4),
        event(10.0, 1, 2, RTS, SENT, 3),
        event(10.5, 1, 3, DATA, OVERHEARD, 4),
    ]
    return Trace(run=0, duration=20.0, events=events)


class TestWindows:

    @pytest.mark.parametrize("duration,size,expected", [(14400, 500, 28), (3600, 500, 7), (499, 500, 0)])
    def test_window_count(self, duration, size, expected):
        assert window_count(duration, size) == expected

    def test_boundary_belongs_to_earlier_window(self):
        assert window_index(0, 10) == 0
        assert window_index(10, 10) == 0
        assert window_index(11, 10) == 1


class TestAccumulate:

    def test_relay_counters(self, relay_trace):
        stats = accumulate(relay_trace, window_size=10.0)
        first, second = stats[1]
        assert first.rts_sent == 4
        assert first.handshakes_complete == 3
        assert first.data_sent_to_next == 3
        assert first.data_forwarded_by_next == 1
        assert first.forward_delays == [pytest.approx(0.499)]
        assert first.data_packets_forwarded_by_self == 3
        assert second.counters() == WindowStats(node=1, window=1).counters()

    def test_cross_window_overhearing_is_ignored(self, relay_trace):
        """Packet 4 is handed over in window 0 but overheard in window 1"""
        stats = accumulate(relay_trace, window_size=10.0)
        assert stats[1][1].data_forwarded_by_next == 0

    def test_genes(self, relay_trace):
        stats = accumulate(relay_trace, window_size=10.0)
        g = gene_vector(stats[1][0], run=0)
        assert g[0] == pytest.approx(0.75)
        assert g[1] == pytest.approx(1 / 3)
        assert g[2] == pytest.approx(0.499)
        assert g[3] == INFINITY
        assert g[4] == 0.0

    def test_last_hop_is_not_watched(self, relay_trace):
        stats = accumulate(relay_trace, window_size=10.0)
        node2 = stats[2][0]
        assert node2.data_sent_to_next == 0
        assert node2.data_packets_forwarded_by_self == 1
        g = gene_vector(node2)
        assert g[0] == 1.0
        assert g[1] == INFINITY
        assert g[3] == 1.0
        assert g[4] == pytest.approx(0.199)

    def test_silent_window_genes(self):
        g = gene_vector(WindowStats(node=5, window=0))
        assert g.values == (INFINITY, INFINITY, 0.0, INFINITY, 0.0)

    def test_per_next_hop_keys(self, relay_trace):
        per_hop = accumulate_per_next_hop(relay_trace, window_size=10.0)
        assert set(per_hop) == {(1, 2), (2, 3), (2, 1)}
        merged = accumulate(relay_trace, window_size=10.0)
        assert merged[2][0].rts_sent == per_hop[(2, 3)][0].rts_sent + per_hop[(2, 1)][0].rts_sent

    def test_per_next_hop_sums_to_node_totals(self, line_topology, lossless_mac):
        plan = MisbehaviorPlan(nodes={2}, drop_probability=0.3)
        trace = run_simulation(
            line_topology, [Connection(0, 3, rate=4.0, start=0.5), Connection(3, 0, rate=2.0, start=0.7)],
            plan, 100.0, seed=5, mac=lossless_mac,
        )
        per_node = accumulate(trace, window_size=10.0)
        per_hop = accumulate_per_next_hop(trace, window_size=10.0)
        for node, series in per_node.items():
            for window, ws in enumerate(series):
                parts = [s[window] for (owner, _), s in per_hop.items() if owner == node]
                assert ws.counters() == sum(parts, WindowStats(node=node, window=window)).counters()
        assert sum(ws.data_sent_to_next for ws in per_node[1]) > 0

    def test_counters_agree_with_watchdog(self, line_topology, lossless_mac):
        plan = MisbehaviorPlan(nodes={2}, drop_probability=0.3)
        trace = run_simulation(line_topology, [Connection(0, 3, rate=4.0, start=0.5)], plan, 100.0, seed=5, mac=lossless_mac)
        series = accumulate(trace, window_size=10.0)[1]
        for ws in series:
            start, end = 10.0 * ws.window, 10.0 * (ws.window + 1)
            records = [r for r in promiscuous_observe(trace, 1, 0.0, end + 10.0) if start < r.handed_at <= end]
            assert ws.data_sent_to_next == len(records)

    def test_requested_nodes_only(self, relay_trace):
        stats = accumulate(relay_trace, window_size=10.0, nodes=[1, 7])
        assert set(stats) == {1, 7}
        assert forwarded_packets(stats[7]) == 0
        assert forwarded_packets(stats[1]) == 3

    def test_incomplete_window_dropped(self, relay_trace):
        stats = accumulate(relay_trace, window_size=10.0, duration=15.0)
        assert len(stats[1]) == 1

    def test_next_hops(self, relay_trace):
        assert next_hops(relay_trace) == {1: {2: 3}, 2: {3: 1}}
