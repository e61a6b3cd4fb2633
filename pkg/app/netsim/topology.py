"""Static unit-disk topologies frozen from random-waypoint movement."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodePosition:
    id: int
    x: float
    y: float


@dataclass
class Topology:
    nodes: List[NodePosition]
    radio_radius: float
    width: float = 0.0
    height: float = 0.0
    graph: nx.Graph = field(default=None, repr=False)

    def __post_init__(self):
        if self.graph is None:
            self.graph = build_edges(self, self.radio_radius)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> List[int]:
        return [n.id for n in self.nodes]

    def neighbors(self, node: int) -> Set[int]:
        return set(self.graph.neighbors(node))

    def has_edge(self, a: int, b: int) -> bool:
        return self.graph.has_edge(a, b)

    def two_hop(self, node: int) -> Set[int]:
        reach = set(nx.single_source_shortest_path_length(self.graph, node, cutoff=2))
        reach.discard(node)
        return reach

    def components(self) -> List[Set[int]]:
        return sorted(nx.connected_components(self.graph), key=lambda c: (-len(c), min(c)))

    def giant_component(self) -> Set[int]:
        parts = self.components()
        return parts[0] if parts else set()

    def to_dict(self) -> dict:
        return {
            "radio_radius": self.radio_radius,
            "width": self.width,
            "height": self.height,
            "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        nodes = [NodePosition(int(n["id"]), float(n["x"]), float(n["y"])) for n in data["nodes"]]
        return cls(nodes=nodes, radio_radius=float(data["radio_radius"]),
                   width=float(data.get("width", 0.0)), height=float(data.get("height", 0.0)))


def build_edges(topology: Topology, radius: float) -> nx.Graph:
    """Symmetric unit-disk adjacency: edge iff distance <= radius."""
    graph = nx.Graph()
    graph.add_nodes_from(n.id for n in topology.nodes)
    if len(topology.nodes) < 2:
        return graph
    ids = np.array([n.id for n in topology.nodes])
    coords = np.array([(n.x, n.y) for n in topology.nodes])
    deltas = coords[:, None, :] - coords[None, :, :]
    within = np.hypot(deltas[..., 0], deltas[..., 1]) <= radius
    rows, cols = np.nonzero(np.triu(within, k=1))
    graph.add_edges_from(zip(ids[rows].tolist(), ids[cols].tolist()))
    return graph


def random_waypoint_snapshot(
    n: int,
    width: float,
    height: float,
    seed: int,
    radius: float = 100.0,
    min_speed: float = 1.0,
    max_speed: float = 10.0,
    max_pause: float = 30.0,
    burn_in: float = 1000.0,
) -> Topology:
    """Move n nodes by random waypoint for burn_in seconds, then freeze them."""
    if n < 2:
        raise ValueError(f"A topology needs at least 2 nodes, got {n}")
    if width <= 0 or height <= 0:
        raise ValueError("Area must be positive")
    rng = np.random.default_rng(seed)
    nodes = []
    for node in range(n):
        x, y = rng.uniform(0, width), rng.uniform(0, height)
        clock = 0.0
        while clock < burn_in:
            tx, ty = rng.uniform(0, width), rng.uniform(0, height)
            speed = rng.uniform(min_speed, max_speed)
            travel = math.hypot(tx - x, ty - y) / speed
            if clock + travel >= burn_in:
                fraction = (burn_in - clock) / travel if travel > 0 else 1.0
                x, y = x + (tx - x) * fraction, y + (ty - y) * fraction
                break
            x, y = tx, ty
            clock += travel + rng.uniform(0, max_pause)
        nodes.append(NodePosition(node, float(x), float(y)))
    topology = Topology(nodes=nodes, radio_radius=radius, width=width, height=height)
    logger.info(
        "Topology: %d nodes, %d edges, giant component %d",
        n, topology.graph.number_of_edges(), len(topology.giant_component()),
    )
    return topology


def select_connections(
    topology: Topology,
    count: int,
    target_hops: int,
    seed: int,
    tolerance: int = 1,
    require_disjoint: bool = True,
    max_tries: int = 20000,
) -> List[Tuple[int, int]]:
    """Source/destination pairs about target_hops apart, with alternative routes when possible."""
    rng = np.random.default_rng(seed)
    giant = sorted(topology.giant_component())
    if len(giant) < 2:
        return []
    chosen: List[Tuple[int, int]] = []
    fallback: List[Tuple[int, int]] = []
    for _ in range(max_tries):
        if len(chosen) >= count:
            break
        src, dst = (int(v) for v in rng.choice(giant, size=2, replace=False))
        if (src, dst) in chosen or (src, dst) in fallback:
            continue
        hops = nx.shortest_path_length(topology.graph, src, dst)
        if abs(hops - target_hops) > tolerance:
            continue
        if require_disjoint and nx.node_connectivity(topology.graph, src, dst) < 2:
            fallback.append((src, dst))
            continue
        chosen.append((src, dst))
    chosen.extend(fallback[: count - len(chosen)])
    if len(chosen) < count:
        logger.warning("Only %d of %d connections found near %d hops", len(chosen), count, target_hops)
    return chosen


def path_nodes(topology: Topology, connections: List[Tuple[int, int]]) -> List[int]:
    """Relays on the shortest path of each connection, endpoints excluded."""
    relays: Dict[int, None] = {}
    for src, dst in connections:
        for node in nx.shortest_path(topology.graph, src, dst)[1:-1]:
            relays[node] = None
    return list(relays)
