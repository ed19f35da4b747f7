from .topology import Topology, build_abilene, load_topology
from .traffic import TrafficConfig, TrafficGenerator, TrafficSample, sample_trace

__all__ = ["Topology", "build_abilene", "load_topology",
           "TrafficConfig", "TrafficGenerator", "TrafficSample", "sample_trace"]
