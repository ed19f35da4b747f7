# lbsim/core/flow_env.py
"""
Flow-level network environment.

One step = one traffic sample:
  demand x split -> offered link loads -> max-min fair admission ->
  M/M/1 link delays -> path delays -> tunnel delays -> reward.
MLU is always measured on the offered load; delays on the admitted load.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from ..errors import ActionError, LbsimError
from ..net.topology import Link, Topology
from ..net.traffic import TrafficGenerator, TrafficSample, demand_vector

logger = logging.getLogger(__name__)

KAPPA = 1.0
RHO_MAX = 0.999
ACTIVE_THRESHOLD = 1e-6
SIMPLEX_TOL = 1e-9

ArrayLike = Union[np.ndarray, Sequence[float]]


class EnvConfig(BaseModel):
    kappa: float = Field(default=KAPPA, gt=0)            # ms * Mbps
    rho_max: float = Field(default=RHO_MAX, gt=0, lt=1)
    active_threshold: float = Field(default=ACTIVE_THRESHOLD, ge=0)
    sigma: float = Field(default=0.8, ge=0, le=1)
    d_ref: Optional[float] = Field(default=None, gt=0)   # None: max path propagation delay
    obs_scale: Optional[float] = Field(default=None, gt=0)  # None: max + min link capacity
    episode_length: int = Field(default=64, ge=1)


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SplitAction:
    """Per-tunnel split ratios over that tunnel's paths."""
    splits: Mapping[str, Tuple[float, ...]]

    @classmethod
    def from_vector(cls, topo: Topology, x: ArrayLike) -> "SplitAction":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (topo.n_paths,):
            raise ActionError(f"Flat action has shape {x.shape}, expected ({topo.n_paths},)")
        return cls({t.id: tuple(x[topo.tunnel_slice(k)].tolist())
                    for k, t in enumerate(topo.tunnels)})

    def vector(self, topo: Topology, tol: float = SIMPLEX_TOL) -> np.ndarray:
        """Validated flat vector in the topology's path order."""
        return validate_action(topo, self, tol)


def validate_action(topo: Topology, action: Union[SplitAction, ArrayLike],
                    tol: float = SIMPLEX_TOL) -> np.ndarray:
    if isinstance(action, SplitAction):
        extra = set(action.splits) - set(topo.tunnel_ids)
        if extra:
            raise ActionError(f"Action names unknown tunnel {sorted(extra)[0]}")
        parts = []
        for t in topo.tunnels:
            if t.id not in action.splits:
                raise ActionError(f"Action missing tunnel {t.id}")
            split = np.asarray(action.splits[t.id], dtype=np.float64)
            if split.shape != (len(t.paths),):
                raise ActionError(
                    f"Tunnel {t.id} split has {split.size} entries, expected {len(t.paths)}")
            parts.append(split)
        x = np.concatenate(parts) if parts else np.zeros(0)
    else:
        x = np.asarray(action, dtype=np.float64)
        if x.shape != (topo.n_paths,):
            raise ActionError(f"Flat action has shape {x.shape}, expected ({topo.n_paths},)")

    if not np.all(np.isfinite(x)):
        raise ActionError("Action contains non-finite split ratios")
    if np.any(x < -tol):
        k = int(topo.path_tunnel[int(np.argmin(x))])
        raise ActionError(f"Tunnel {topo.tunnel_ids[k]} has a negative split ratio")
    sums = np.add.reduceat(x, topo.offsets[:-1]) if topo.n_tunnels else np.zeros(0)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        k = int(bad[0])
        raise ActionError(f"Tunnel {topo.tunnel_ids[k]} splits sum to {sums[k]!r}, expected 1")
    return x


def _demand_vec(topo: Topology, demand: Union[TrafficSample, ArrayLike]) -> np.ndarray:
    if isinstance(demand, TrafficSample):
        return demand.vector(topo)
    return np.asarray(demand, dtype=np.float64)


def _action_vec(topo: Topology, action: Union[SplitAction, ArrayLike]) -> np.ndarray:
    if isinstance(action, SplitAction):
        return validate_action(topo, action)
    return np.asarray(action, dtype=np.float64)


# ---------------------------------------------------------------------------
# Loads, admission, delays
# ---------------------------------------------------------------------------
def path_rates(topo: Topology, demand: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Subflow rates T_k * x_p; works on (P,) or batched (B, P) splits."""
    return x * demand[topo.path_tunnel]


def offered_loads(topo: Topology, demand: Union[TrafficSample, ArrayLike],
                  action: Union[SplitAction, ArrayLike]) -> np.ndarray:
    """Per-link offered load (Mbps); batched splits give (B, L)."""
    d = _demand_vec(topo, demand)
    x = _action_vec(topo, action)
    return path_rates(topo, d, x) @ topo.incidence


def mlu(topo: Topology, loads: np.ndarray) -> float:
    """Maximum link utilization; 0 for a topology without links."""
    if topo.n_links == 0:
        return 0.0
    return float(np.max(loads / topo.capacities))


def batch_mlu(topo: Topology, loads: np.ndarray) -> np.ndarray:
    return np.max(loads / topo.capacities, axis=-1)


def water_fill(topo: Topology, demand: ArrayLike, rho_max: float = RHO_MAX,
               tol: float = 1e-12) -> np.ndarray:
    """
    Max-min fair admission of per-path subflows with link capacity rho_max * c.

    Progressive filling: raise every unfrozen subflow by the same amount
    until a link saturates or a subflow's demand is met, freeze those, repeat.
    Returns admitted rate per flat path.
    """
    demand = np.asarray(demand, dtype=np.float64)
    inc = topo.incidence
    caps = topo.capacities
    residual = rho_max * caps
    admitted = np.zeros_like(demand)
    active = demand > 0

    while active.any():
        counts = inc[active].sum(axis=0)
        used = np.flatnonzero(counts > 0)
        shares = residual[used] / counts[used]
        j = int(np.argmin(shares))
        link_share = max(float(shares[j]), 0.0)
        remaining = demand - admitted
        demand_step = float(remaining[active].min())

        step = min(link_share, demand_step)
        admitted[active] += step
        residual = np.maximum(residual - step * counts, 0.0)

        met = active & (demand - admitted <= tol * np.maximum(demand, 1.0))
        admitted[met] = demand[met]
        if link_share <= demand_step:
            residual[used[j]] = 0.0
        saturated = residual <= tol * caps
        blocked = active & (inc[:, saturated].sum(axis=1) > 0)
        active &= ~(met | blocked)

    return admitted


def link_delay(link: Link, load: float, kappa: float = KAPPA, rho_max: float = RHO_MAX) -> float:
    """M/M/1 delay in ms: prop + kappa / (c - min(load, rho_max * c))."""
    c = link.capacity
    return link.prop_delay + kappa / (c - min(load, rho_max * c))


def link_delays(topo: Topology, loads: np.ndarray, kappa: float = KAPPA,
                rho_max: float = RHO_MAX) -> np.ndarray:
    caps = topo.capacities
    return topo.prop_delays + kappa / (caps - np.minimum(loads, rho_max * caps))


def tunnel_delays(topo: Topology, path_delay: np.ndarray, x: np.ndarray,
                  active_threshold: float = ACTIVE_THRESHOLD) -> np.ndarray:
    """
    d_k = max delay over the tunnel's active paths (x_p > threshold).
    Accepts (P,) or batched (B, P) inputs.
    """
    starts = topo.offsets[:-1]
    if starts.size == 0:
        return np.zeros(path_delay.shape[:-1] + (0,))
    masked = np.where(x > active_threshold, path_delay, -np.inf)
    worst = np.maximum.reduceat(masked, starts, axis=-1)
    if np.isneginf(worst).any():
        fallback = np.maximum.reduceat(path_delay, starts, axis=-1)
        worst = np.where(np.isneginf(worst), fallback, worst)
    return worst


def reward(mean_delay: float, mlu_value: float, sigma: float, d_ref: float) -> float:
    return -sigma * (mean_delay / d_ref) - (1.0 - sigma) * mlu_value


def default_d_ref(topo: Topology) -> float:
    return float(topo.path_prop_delays.max())


def default_obs_scale(topo: Topology) -> float:
    return float(topo.capacities.max() + topo.capacities.min())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class LinkLoadState:
    offered: np.ndarray
    admitted: np.ndarray
    capacities: np.ndarray

    @property
    def utilization(self) -> np.ndarray:
        return self.admitted / self.capacities

    @property
    def offered_utilization(self) -> np.ndarray:
        return self.offered / self.capacities


@dataclass(frozen=True, eq=False)
class StepReport:
    t: int
    tunnel_delays: Dict[str, float]
    path_delays: np.ndarray
    mean_delay: float
    mlu: float
    acceptance_rate: float
    reward: float
    link_state: LinkLoadState

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "t": self.t,
            "mean_delay_ms": self.mean_delay,
            "mlu": self.mlu,
            "acceptance_rate": self.acceptance_rate,
            "reward": self.reward,
        }
        for k, d in self.tunnel_delays.items():
            record[f"delay_{k}"] = d
        return record


def evaluate_split(topo: Topology, demand: np.ndarray, x: np.ndarray, cfg: EnvConfig,
                   d_ref: float, t: int = 0) -> StepReport:
    """Pure evaluation of a validated flat split against one demand vector."""
    rates = path_rates(topo, demand, x)
    offered = rates @ topo.incidence
    mu = mlu(topo, offered)
    if mu <= cfg.rho_max:
        admitted_rates = rates
        acceptance = 1.0
    else:
        admitted_rates = water_fill(topo, rates, cfg.rho_max)
        offered_total = float(rates.sum())
        acceptance = min(float(admitted_rates.sum()) / offered_total, 1.0) if offered_total > 0 else 1.0
    admitted = admitted_rates @ topo.incidence

    delays = link_delays(topo, admitted, cfg.kappa, cfg.rho_max)
    per_path = topo.incidence @ delays
    per_tunnel = tunnel_delays(topo, per_path, x, cfg.active_threshold)
    mean_delay = float(per_tunnel.mean()) if per_tunnel.size else 0.0

    return StepReport(
        t=t,
        tunnel_delays=dict(zip(topo.tunnel_ids, per_tunnel.tolist())),
        path_delays=per_path,
        mean_delay=mean_delay,
        mlu=mu,
        acceptance_rate=acceptance,
        reward=reward(mean_delay, mu, cfg.sigma, d_ref),
        link_state=LinkLoadState(offered, admitted, topo.capacities),
    )


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------
class FlowEnv:
    """
    Episodic environment: reset() draws the next episode of samples from the
    traffic generator, step() scores an action on the current sample.
    """

    def __init__(self, topo: Topology, traffic: Optional[TrafficGenerator] = None,
                 cfg: Optional[EnvConfig] = None):
        self.topo = topo
        self.traffic = traffic
        self.cfg = cfg or EnvConfig()
        self.d_ref = self.cfg.d_ref or default_d_ref(topo)
        self.obs_scale = self.cfg.obs_scale or default_obs_scale(topo)
        self._episode: List[TrafficSample] = []
        self._i = 0

    @property
    def obs_dim(self) -> int:
        return self.topo.n_tunnels

    @property
    def act_dim(self) -> int:
        return self.topo.n_paths

    @property
    def current_sample(self) -> TrafficSample:
        if not self._episode:
            raise LbsimError("Environment not reset")
        return self._episode[min(self._i, len(self._episode) - 1)]

    def observe(self, sample: TrafficSample) -> np.ndarray:
        return sample.vector(self.topo) / self.obs_scale

    def evaluate(self, sample: TrafficSample, action: Union[SplitAction, ArrayLike]) -> StepReport:
        x = validate_action(self.topo, action)
        return evaluate_split(self.topo, sample.vector(self.topo), x, self.cfg,
                              self.d_ref, sample.t)

    def reset(self) -> np.ndarray:
        if self.traffic is None:
            raise LbsimError("Environment has no traffic generator; only evaluate() is available")
        self._episode = self.traffic.sample_episode(self.cfg.episode_length)
        self._i = 0
        return self.observe(self._episode[0])

    def step(self, action: Union[SplitAction, ArrayLike]) -> Tuple[np.ndarray, float, bool, StepReport]:
        """Returns (next observation, reward, done, report)."""
        sample = self.current_sample
        if self._i >= len(self._episode):
            raise LbsimError("Episode finished; call reset()")
        report = self.evaluate(sample, action)
        self._i += 1
        done = self._i >= len(self._episode)
        if done:
            # bootstrap observation for the sample after the episode
            nxt = demand_vector(self.traffic.profile, sample.t + 1) / self.obs_scale
        else:
            nxt = self.observe(self._episode[self._i])
        return nxt, report.reward, done, report
