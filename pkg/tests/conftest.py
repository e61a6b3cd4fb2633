import pytest

from app.ais.bitmatch import BitString
from app.ais.encoding import Antigen
from app.netsim.mac import MacParams
from app.netsim.topology import NodePosition, Topology
from app.schemas.schemas import build_config

TINY = {
    "name": "tiny",
    "allow_off_grid": True,
    "topology": {"n": 12, "width": 300.0, "height": 300.0, "radius": 120.0},
    "traffic": {"connections": 2, "target_hops": 2, "hop_tolerance": 1},
    "misbehavior": {"node_count": 1, "level": 0.5},
    "ais": {"r": 10, "detector_count": 50, "growth_candidates": 10},
    "thresholds": {"packet_threshold": 20},
    "runs": {"learning": 2, "detection": 2},
    "duration": 300.0,
    "window_size": 50.0,
    "master_seed": 7,
}


@pytest.fixture
def tiny_config():
    return build_config(TINY)


@pytest.fixture
def line_topology():
    """0 - 1 - 2 - 3 spaced 100 m apart with a 150 m radio range."""
    return Topology(nodes=[NodePosition(i, 100.0 * i, 0.0) for i in range(4)], radio_radius=150.0)


@pytest.fixture
def lossless_mac():
    return MacParams(base_loss=0.0, contention_loss=0.0)


def antigen(text: str, node: int = 0, window: int = 0, run: int = 0) -> Antigen:
    return Antigen(bits=BitString.from_str(text), node=node, window=window, run=run)
