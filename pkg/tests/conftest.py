"""
Shared fixtures: the Abilene topology, tiny hand-built topologies and
small-network configs that keep the RL checks fast.
"""
import os

import numpy as np
import pytest

from lbsim.net.topology import build_abilene, load_topology
from lbsim.net.traffic import TrafficSample

os.environ.setdefault("LBSIM_PROGRESS", "0")
for _var in ("LBSIM_OUTPUT_DIR", "LBSIM_SEED", "LBSIM_WORKERS"):
    os.environ.pop(_var, None)


def two_path_document(c0=10.0, c1=10.0, d0=9.0, d1=1.67, name="two-path"):
    """One tunnel s->t over two disjoint single-link paths."""
    return {
        "name": name,
        "nodes": ["s", "a", "b", "t"],
        "links": [
            {"id": "s>a", "src": "s", "dst": "a", "capacity_mbps": c0, "prop_delay_ms": d0},
            {"id": "a>t", "src": "a", "dst": "t", "capacity_mbps": 1000.0, "prop_delay_ms": 0.0},
            {"id": "s>b", "src": "s", "dst": "b", "capacity_mbps": c1, "prop_delay_ms": d1},
            {"id": "b>t", "src": "b", "dst": "t", "capacity_mbps": 1000.0, "prop_delay_ms": 0.0},
        ],
        "tunnels": [
            {"id": "s-t", "src": "s", "dst": "t", "paths": [["s>a", "a>t"], ["s>b", "b>t"]]},
        ],
    }


def shared_link_document():
    """Two tunnels that share the bottleneck link m>n on their second path."""
    return {
        "name": "shared",
        "nodes": ["a", "b", "m", "n", "x", "y"],
        "links": [
            {"id": "a>x", "src": "a", "dst": "x", "capacity_mbps": 8.0, "prop_delay_ms": 3.0},
            {"id": "b>y", "src": "b", "dst": "y", "capacity_mbps": 8.0, "prop_delay_ms": 3.0},
            {"id": "a>m", "src": "a", "dst": "m", "capacity_mbps": 20.0, "prop_delay_ms": 0.5},
            {"id": "b>m", "src": "b", "dst": "m", "capacity_mbps": 20.0, "prop_delay_ms": 0.5},
            {"id": "m>n", "src": "m", "dst": "n", "capacity_mbps": 6.0, "prop_delay_ms": 0.5},
            {"id": "n>x", "src": "n", "dst": "x", "capacity_mbps": 20.0, "prop_delay_ms": 0.5},
            {"id": "n>y", "src": "n", "dst": "y", "capacity_mbps": 20.0, "prop_delay_ms": 0.5},
        ],
        "tunnels": [
            {"id": "a-x", "src": "a", "dst": "x", "paths": [["a>x"], ["a>m", "m>n", "n>x"]]},
            {"id": "b-y", "src": "b", "dst": "y", "paths": [["b>y"], ["b>m", "m>n", "n>y"]]},
        ],
    }


@pytest.fixture(scope="session")
def abilene():
    return build_abilene()


@pytest.fixture
def two_path():
    return load_topology(two_path_document())


@pytest.fixture
def shared():
    return load_topology(shared_link_document())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def heavy_sample(abilene):
    """Peak-hour demand: ECMP overloads the low-capacity links, UCMP does not."""
    return TrafficSample(0, {k: 9.0 for k in abilene.tunnel_ids})


@pytest.fixture
def small_hidden():
    return (16, 16)
