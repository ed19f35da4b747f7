# lbsim/net/topology.py
"""
Directed capacitated graph, tunnels and their candidate paths.

A topology document is JSON:
    {
      "name": "abilene",
      "capacity_classes": {"hi": 20.0, "lo": 10.0},      # optional
      "nodes": ["1", "2", ...],
      "links": [{"id": "1>2", "src": "1", "dst": "2",
                 "capacity_mbps": 20.0, "prop_delay_ms": 1.78, "tag": "hi"}, ...],
      "tunnels": [{"id": "1-5", "src": "1", "dst": "5",
                   "paths": [["1>2", "2>11", ...], ["1>3", ...]]}, ...]
    }
A link with a tag listed in `capacity_classes` may omit `capacity_mbps`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import orjson
from pydantic import BaseModel, Field, ValidationError

from ..errors import TopologyError
from ..utils import TOPOLOGIES, write_json

logger = logging.getLogger(__name__)

ABILENE_PATH = TOPOLOGIES / "abilene.json"

C_HI = 20.0
C_LO = 10.0


@dataclass(frozen=True)
class Link:
    id: str
    src: str
    dst: str
    capacity: float      # Mbps
    prop_delay: float    # ms
    tag: str = ""


@dataclass(frozen=True)
class PathDef:
    tunnel_id: str
    index: int           # position inside the tunnel
    link_ids: Tuple[str, ...]


@dataclass(frozen=True)
class Tunnel:
    id: str
    src: str
    dst: str
    paths: Tuple[PathDef, ...]


@dataclass(frozen=True)
class Topology:
    """
    Immutable network description plus compiled numpy views.

    Paths are numbered globally in tunnel order, then path order; every
    vectorized helper in the package uses that flat ordering.
    """
    name: str
    nodes: Tuple[str, ...]
    links: Tuple[Link, ...]
    tunnels: Tuple[Tunnel, ...]

    # ---- lookups ---------------------------------------------------------
    @cached_property
    def link_index(self) -> Dict[str, int]:
        return {link.id: i for i, link in enumerate(self.links)}

    @cached_property
    def tunnel_index(self) -> Dict[str, int]:
        return {tunnel.id: i for i, tunnel in enumerate(self.tunnels)}

    @property
    def tunnel_ids(self) -> List[str]:
        return [t.id for t in self.tunnels]

    @cached_property
    def paths(self) -> Tuple[PathDef, ...]:
        return tuple(p for t in self.tunnels for p in t.paths)

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_tunnels(self) -> int:
        return len(self.tunnels)

    @cached_property
    def offsets(self) -> np.ndarray:
        """offsets[k]:offsets[k+1] is tunnel k's slice of the flat path vector."""
        counts = [len(t.paths) for t in self.tunnels]
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def tunnel_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    # ---- compiled arrays -------------------------------------------------
    @cached_property
    def incidence(self) -> np.ndarray:
        """(n_paths, n_links) 0/1 matrix."""
        inc = np.zeros((self.n_paths, self.n_links), dtype=np.float64)
        for i, path in enumerate(self.paths):
            for lid in path.link_ids:
                inc[i, self.link_index[lid]] = 1.0
        return inc

    @cached_property
    def capacities(self) -> np.ndarray:
        return np.array([l.capacity for l in self.links], dtype=np.float64)

    @cached_property
    def prop_delays(self) -> np.ndarray:
        return np.array([l.prop_delay for l in self.links], dtype=np.float64)

    @cached_property
    def path_tunnel(self) -> np.ndarray:
        """Tunnel index of each flat path."""
        return np.repeat(np.arange(self.n_tunnels), np.diff(self.offsets))

    @cached_property
    def path_prop_delays(self) -> np.ndarray:
        return np.array([
            math.fsum(self.links[self.link_index[lid]].prop_delay for lid in p.link_ids)
            for p in self.paths
        ])

    @cached_property
    def path_bottlenecks(self) -> np.ndarray:
        """Minimum link capacity along each path."""
        return np.array([
            min(self.links[self.link_index[lid]].capacity for lid in p.link_ids)
            for p in self.paths
        ])

    @cached_property
    def graph(self) -> nx.MultiDiGraph:
        g = nx.MultiDiGraph(name=self.name)
        g.add_nodes_from(self.nodes)
        for link in self.links:
            g.add_edge(link.src, link.dst, key=link.id,
                       capacity=link.capacity, prop_delay=link.prop_delay)
        return g

    def tunnel(self, tunnel_id: str) -> Tunnel:
        try:
            return self.tunnels[self.tunnel_index[tunnel_id]]
        except KeyError:
            raise TopologyError(f"Unknown tunnel: {tunnel_id}") from None

    def link(self, link_id: str) -> Link:
        try:
            return self.links[self.link_index[link_id]]
        except KeyError:
            raise TopologyError(f"Unknown link: {link_id}") from None

    def path_nodes(self, path: PathDef) -> List[str]:
        nodes = [self.link(path.link_ids[0]).src]
        nodes.extend(self.link(lid).dst for lid in path.link_ids)
        return nodes

    def summary(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "nodes": len(self.nodes),
            "links": self.n_links,
            "tunnels": self.n_tunnels,
            "paths": self.n_paths,
            "components": nx.number_weakly_connected_components(self.graph),
        }


# ---------------------------------------------------------------------------
# Document schema
# ---------------------------------------------------------------------------
class LinkSpec(BaseModel):
    id: str
    src: str
    dst: str
    capacity_mbps: Optional[float] = Field(default=None, gt=0)
    prop_delay_ms: float = Field(ge=0)
    tag: str = ""


class TunnelSpec(BaseModel):
    id: str
    src: str
    dst: str
    paths: List[List[str]] = Field(min_length=1)


class TopologyDocument(BaseModel):
    name: str = "unnamed"
    capacity_classes: Dict[str, float] = Field(default_factory=dict)
    nodes: List[str]
    links: List[LinkSpec]
    tunnels: List[TunnelSpec]


def _build(doc: TopologyDocument) -> Topology:
    """Resolve capacities and run every structural check."""
    node_set = set(doc.nodes)
    if len(node_set) != len(doc.nodes):
        raise TopologyError("Duplicate node ids in topology document")

    links: List[Link] = []
    seen: set = set()
    for spec in doc.links:
        if spec.id in seen:
            raise TopologyError(f"Duplicate link id: {spec.id}")
        seen.add(spec.id)
        for end in (spec.src, spec.dst):
            if end not in node_set:
                raise TopologyError(f"Link {spec.id} references unknown node {end}")
        capacity = spec.capacity_mbps
        if capacity is None:
            if spec.tag not in doc.capacity_classes:
                raise TopologyError(f"Link {spec.id} has no capacity and no known class tag")
            capacity = doc.capacity_classes[spec.tag]
        if not capacity > 0:
            raise TopologyError(f"Link {spec.id} capacity must be positive, got {capacity}")
        links.append(Link(spec.id, spec.src, spec.dst, float(capacity),
                          float(spec.prop_delay_ms), spec.tag))

    graph = nx.MultiDiGraph()
    graph.add_nodes_from(doc.nodes)
    for link in links:
        graph.add_edge(link.src, link.dst, key=link.id)
    by_id = {link.id: link for link in links}

    tunnels: List[Tunnel] = []
    tunnel_seen: set = set()
    for spec in doc.tunnels:
        if spec.id in tunnel_seen:
            raise TopologyError(f"Duplicate tunnel id: {spec.id}")
        tunnel_seen.add(spec.id)
        paths = []
        for p, link_ids in enumerate(spec.paths):
            _check_walk(spec, p, link_ids, by_id, graph)
            paths.append(PathDef(spec.id, p, tuple(link_ids)))
        tunnels.append(Tunnel(spec.id, spec.src, spec.dst, tuple(paths)))

    return Topology(doc.name, tuple(doc.nodes), tuple(links), tuple(tunnels))


def _check_walk(spec: TunnelSpec, p: int, link_ids: Sequence[str],
                by_id: Mapping[str, Link], graph: nx.MultiDiGraph) -> None:
    where = f"tunnel {spec.id} path {p}"
    if not link_ids:
        raise TopologyError(f"Empty path in {where}")
    if len(set(link_ids)) != len(link_ids):
        raise TopologyError(f"Repeated link in {where}")
    for lid in link_ids:
        if lid not in by_id:
            raise TopologyError(f"Unknown link {lid} in {where}")
    first, last = by_id[link_ids[0]], by_id[link_ids[-1]]
    if first.src != spec.src or last.dst != spec.dst:
        raise TopologyError(
            f"{where} runs {first.src}->{last.dst}, expected {spec.src}->{spec.dst}")
    for a, b in zip(link_ids, link_ids[1:]):
        if by_id[a].dst != by_id[b].src:
            raise TopologyError(f"Disconnected walk in {where}: {a} then {b}")
    for lid in link_ids:
        link = by_id[lid]
        if not graph.has_edge(link.src, link.dst, key=lid):
            raise TopologyError(f"Link {lid} missing from graph in {where}")


def load_topology(source: Union[str, Path, Mapping[str, Any]]) -> Topology:
    """
    Parse a topology document from a path, a JSON string, or a mapping.
    """
    if isinstance(source, Mapping):
        raw = dict(source)
    else:
        text: Union[str, bytes]
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            path = Path(source)
            if not path.exists():
                raise TopologyError(f"Missing topology file: {path}")
            text = path.read_bytes()
        else:
            text = source
        try:
            raw = orjson.loads(text)
        except orjson.JSONDecodeError as exc:
            raise TopologyError(f"Failed to parse topology document: {exc}") from exc

    try:
        doc = TopologyDocument.model_validate(raw)
    except ValidationError as exc:
        raise TopologyError(f"Invalid topology document: {exc}") from exc

    topo = _build(doc)
    logger.info("Loaded topology %(name)s: %(nodes)d nodes, %(links)d links, "
                "%(tunnels)d tunnels, %(paths)d paths", topo.summary())
    return topo


def topology_to_document(topo: Topology) -> Dict[str, Any]:
    return {
        "name": topo.name,
        "nodes": list(topo.nodes),
        "links": [
            {"id": l.id, "src": l.src, "dst": l.dst, "capacity_mbps": l.capacity,
             "prop_delay_ms": l.prop_delay, "tag": l.tag}
            for l in topo.links
        ],
        "tunnels": [
            {"id": t.id, "src": t.src, "dst": t.dst,
             "paths": [list(p.link_ids) for p in t.paths]}
            for t in topo.tunnels
        ],
    }


def dump_topology(topo: Topology, path: Union[str, Path]) -> Path:
    return write_json(path, topology_to_document(topo))


def path_links(topo: Topology, tunnel_id: str, p: int) -> List[Link]:
    """Ordered links of path `p` of a tunnel."""
    tunnel = topo.tunnel(tunnel_id)
    if not 0 <= p < len(tunnel.paths):
        raise TopologyError(f"Tunnel {tunnel_id} has no path {p}")
    return [topo.link(lid) for lid in tunnel.paths[p].link_ids]


def path_prop_delay(topo: Topology, tunnel_id: str, p: int) -> float:
    return math.fsum(link.prop_delay for link in path_links(topo, tunnel_id, p))


def with_capacities(topo: Topology, c_hi: float, c_lo: float) -> Topology:
    """Reassign capacities of links tagged "hi" / "lo"."""
    if c_hi <= 0 or c_lo <= 0:
        raise TopologyError(f"Capacities must be positive, got hi={c_hi} lo={c_lo}")
    classes = {"hi": float(c_hi), "lo": float(c_lo)}
    links = tuple(replace(l, capacity=classes.get(l.tag, l.capacity)) for l in topo.links)
    return Topology(topo.name, topo.nodes, links, topo.tunnels)


def scale_capacities(topo: Topology, factor: float) -> Topology:
    if factor <= 0:
        raise TopologyError(f"Capacity scale must be positive, got {factor}")
    links = tuple(replace(l, capacity=l.capacity * factor) for l in topo.links)
    return Topology(f"{topo.name}x{factor:g}", topo.nodes, links, topo.tunnels)


# ---------------------------------------------------------------------------
# Abilene
# ---------------------------------------------------------------------------
# Physical links (both directions share the delay). The "hi" links form the
# long high-capacity paths, the "lo" links the short low-capacity ones.
ABILENE_LINKS: Tuple[Tuple[str, str, float, str], ...] = (
    ("1", "2", 1.78, "hi"),
    ("2", "11", 1.78, "hi"),
    ("11", "8", 2.26, "hi"),
    ("8", "7", 1.40, "hi"),
    ("7", "5", 1.78, "hi"),
    ("4", "7", 1.40, "hi"),
    ("8", "9", 1.39, "hi"),
    ("11", "10", 2.25, "hi"),
    ("1", "3", 0.22, "lo"),
    ("3", "10", 0.23, "lo"),
    ("10", "9", 0.37, "lo"),
    ("9", "6", 0.43, "lo"),
    ("6", "5", 0.42, "lo"),
    ("4", "5", 0.43, "lo"),
)

# (tunnel src, tunnel dst) -> [high-capacity node walk, low-capacity node walk]
ABILENE_TUNNELS: Tuple[Tuple[str, str, Tuple[Tuple[str, ...], ...]], ...] = (
    ("1", "5", (("1", "2", "11", "8", "7", "5"), ("1", "3", "10", "9", "6", "5"))),
    ("5", "1", (("5", "7", "8", "11", "2", "1"), ("5", "6", "9", "10", "3", "1"))),
    ("4", "9", (("4", "7", "8", "9"), ("4", "5", "6", "9"))),
    ("9", "4", (("9", "8", "7", "4"), ("9", "6", "5", "4"))),
    ("4", "10", (("4", "7", "8", "11", "10"), ("4", "5", "6", "9", "10"))),
    ("10", "4", (("10", "11", "8", "7", "4"), ("10", "9", "6", "5", "4"))),
)

# Expected end-to-end propagation delay per flat path index (ms).
ABILENE_PATH_DELAYS = (9.0, 1.67, 9.0, 1.67, 4.19, 1.28, 4.19, 1.28, 7.31, 1.65, 7.31, 1.65)


def _link_id(u: str, v: str) -> str:
    return f"{u}>{v}"


def abilene_document(c_hi: float = C_HI, c_lo: float = C_LO) -> Dict[str, Any]:
    nodes = [str(i) for i in range(1, 12)]
    links = []
    for u, v, delay, tag in ABILENE_LINKS:
        for a, b in ((u, v), (v, u)):
            links.append({"id": _link_id(a, b), "src": a, "dst": b,
                          "prop_delay_ms": delay, "tag": tag})
    tunnels = []
    for src, dst, walks in ABILENE_TUNNELS:
        tunnels.append({
            "id": f"{src}-{dst}", "src": src, "dst": dst,
            "paths": [[_link_id(a, b) for a, b in zip(w, w[1:])] for w in walks],
        })
    return {
        "name": "abilene",
        "capacity_classes": {"hi": float(c_hi), "lo": float(c_lo)},
        "nodes": nodes,
        "links": links,
        "tunnels": tunnels,
    }


def build_abilene(c_hi: float = C_HI, c_lo: float = C_LO) -> Topology:
    """Abilene with 6 bidirectional tunnels, one hi and one lo path each."""
    return load_topology(abilene_document(c_hi, c_lo))
