# lbsim/net/traffic.py
"""
Deterministic sinusoidal demand with seeded Gaussian noise.

    T_k(t) = max(0, B_k + A_k * sin(2*pi*t/P + phi_k) + eps_t),  eps_t ~ N(0, s^2)

The noise for (seed, k, t) comes from its own generator, so any sample can be
recomputed without replaying the stream.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from ..errors import TrafficError
from ..utils import rng_for
from .topology import Topology

logger = logging.getLogger(__name__)

PerTunnel = Union[float, Dict[str, float]]


@dataclass(frozen=True)
class TrafficSample:
    t: int
    demand: Mapping[str, float]   # tunnel id -> Mbps

    def vector(self, topo: Topology) -> np.ndarray:
        try:
            return np.array([self.demand[k] for k in topo.tunnel_ids], dtype=np.float64)
        except KeyError as exc:
            raise TrafficError(f"Sample at t={self.t} has no demand for tunnel {exc.args[0]}") from None

    @classmethod
    def from_vector(cls, topo: Topology, t: int, values: Sequence[float]) -> "TrafficSample":
        return cls(t, {k: float(v) for k, v in zip(topo.tunnel_ids, values)})


class TrafficConfig(BaseModel):
    """Scalars apply to every tunnel; dicts are keyed by tunnel id."""
    base: PerTunnel = 6.0
    amplitude: PerTunnel = 4.0
    period: int = Field(default=64, ge=2)
    phase: Optional[Dict[str, float]] = None
    phase_step: float = math.pi / 3     # default phi_k = k * phase_step
    noise_std: float = Field(default=0.5, ge=0.0)
    seed: int = 0

    @field_validator("base", "amplitude")
    @classmethod
    def _non_negative(cls, value: PerTunnel) -> PerTunnel:
        values = value.values() if isinstance(value, dict) else [value]
        if any(v < 0 for v in values):
            raise ValueError("base and amplitude must be non-negative")
        return value

    def resolve(self, topo: Topology) -> "TrafficProfile":
        """Bind the parameters to the topology's tunnel order."""
        ids = topo.tunnel_ids

        def per_tunnel(value: PerTunnel, name: str) -> np.ndarray:
            if isinstance(value, dict):
                unknown = set(value) - set(ids)
                if unknown:
                    raise TrafficError(f"Traffic {name} names unknown tunnel {sorted(unknown)[0]}")
                missing = [k for k in ids if k not in value]
                if missing:
                    raise TrafficError(f"Traffic {name} missing tunnel {missing[0]}")
                return np.array([value[k] for k in ids], dtype=np.float64)
            return np.full(len(ids), float(value))

        base = per_tunnel(self.base, "base")
        amplitude = per_tunnel(self.amplitude, "amplitude")
        for k, b, a in zip(ids, base, amplitude):
            if b < a:
                raise TrafficError(f"Tunnel {k}: base {b} below amplitude {a}")
        if self.phase is None:
            phase = np.arange(len(ids)) * self.phase_step
        else:
            phase = per_tunnel(self.phase, "phase")
        return TrafficProfile(tuple(ids), base, amplitude, phase,
                              self.period, self.noise_std, self.seed)


@dataclass(frozen=True, eq=False)
class TrafficProfile:
    tunnel_ids: tuple
    base: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray
    period: int
    noise_std: float
    seed: int

    def index(self, k: str) -> int:
        try:
            return self.tunnel_ids.index(k)
        except ValueError:
            raise TrafficError(f"Unknown tunnel: {k}") from None

    def with_seed(self, seed: int) -> "TrafficProfile":
        return TrafficProfile(self.tunnel_ids, self.base, self.amplitude, self.phase,
                              self.period, self.noise_std, seed)


def _demand(profile: TrafficProfile, i: int, t: int) -> float:
    wave = profile.base[i] + profile.amplitude[i] * math.sin(
        2.0 * math.pi * t / profile.period + profile.phase[i])
    noise = 0.0
    if profile.noise_std > 0:
        noise = float(rng_for(profile.seed, i, t).normal(0.0, profile.noise_std))
    return max(0.0, float(wave + noise))


def demand_at(profile: TrafficProfile, k: str, t: int) -> float:
    """Demand of tunnel `k` at integer step `t` (Mbps)."""
    return _demand(profile, profile.index(k), t)


def demand_vector(profile: TrafficProfile, t: int) -> np.ndarray:
    return np.array([_demand(profile, i, t) for i in range(len(profile.tunnel_ids))])


def sample_at(profile: TrafficProfile, t: int) -> TrafficSample:
    return TrafficSample(t, dict(zip(profile.tunnel_ids, demand_vector(profile, t).tolist())))


class TrafficGenerator:
    """Owns the episode clock for one environment."""

    def __init__(self, profile: TrafficProfile, start: int = 0):
        self.profile = profile
        self.t = int(start)

    def sample_episode(self, length: int) -> List[TrafficSample]:
        """Consecutive samples starting at the clock; the clock moves past them."""
        if length < 0:
            raise TrafficError(f"Episode length must be non-negative, got {length}")
        samples = [sample_at(self.profile, self.t + i) for i in range(length)]
        self.t += length
        return samples


def sample_episode(gen: TrafficGenerator, length: int) -> List[TrafficSample]:
    return gen.sample_episode(length)


def sample_trace(profile: TrafficProfile, n: int, start: int = 0) -> List[TrafficSample]:
    """Frozen evaluation trace of `n` samples."""
    return [sample_at(profile, start + i) for i in range(n)]


def save_trace(samples: Sequence[TrafficSample], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"t": s.t, **s.demand} for s in samples]
    pd.DataFrame(rows).to_csv(path, index=False)
    logger.info("Wrote trace with %d samples to %s", len(samples), path)
    return path


def load_trace(path: Union[str, Path]) -> List[TrafficSample]:
    path = Path(path)
    if not path.exists():
        raise TrafficError(f"Missing trace file: {path}")
    df = pd.read_csv(path, dtype={"t": "int64"})
    if "t" not in df.columns:
        raise TrafficError(f"Trace {path} has no 't' column")
    tunnels = [c for c in df.columns if c != "t"]
    return [
        TrafficSample(int(row["t"]), {k: float(row[k]) for k in tunnels})
        for _, row in df.iterrows()
    ]
