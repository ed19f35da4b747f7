# lbsim/core/baselines.py
"""
Heuristic split policies: STATIC, RANDOM, ECMP, UCMP.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ..errors import ActionError
from ..net.topology import Topology
from ..net.traffic import TrafficSample
from .flow_env import SplitAction


class BaselineKind(Enum):
    STATIC = "static"
    RANDOM = "random"
    ECMP = "ecmp"
    UCMP = "ucmp"


@dataclass(frozen=True)
class Baseline:
    kind: BaselineKind
    static_path: int = 1

    @property
    def name(self) -> str:
        if self.kind is BaselineKind.STATIC:
            return f"static{self.static_path}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str, static_path: int = 1) -> "Baseline":
        try:
            return cls(BaselineKind(text.lower()), static_path)
        except ValueError:
            raise ActionError(f"Unknown baseline: {text}") from None


def baseline_vector(baseline: Baseline, topo: Topology,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Flat split vector for the whole topology."""
    x = np.zeros(topo.n_paths)
    for k, tunnel in enumerate(topo.tunnels):
        sl = topo.tunnel_slice(k)
        n = len(tunnel.paths)
        if baseline.kind is BaselineKind.STATIC:
            if not 0 <= baseline.static_path < n:
                raise ActionError(
                    f"Static path {baseline.static_path} invalid for tunnel {tunnel.id} ({n} paths)")
            x[sl.start + baseline.static_path] = 1.0
        elif baseline.kind is BaselineKind.RANDOM:
            if rng is None:
                raise ActionError("RANDOM baseline needs an rng")
            x[sl] = rng.dirichlet(np.ones(n))
        elif baseline.kind is BaselineKind.ECMP:
            x[sl] = 1.0 / n
        else:
            weights = topo.path_bottlenecks[sl]
            x[sl] = weights / weights.sum()
    return x


def baseline_action(baseline: Baseline, topo: Topology,
                    demand: Optional[TrafficSample] = None,
                    rng: Optional[np.random.Generator] = None) -> SplitAction:
    """Demand-oblivious: `demand` is accepted for a uniform policy signature."""
    return SplitAction.from_vector(topo, baseline_vector(baseline, topo, rng))
