# lbsim/core/safety.py
"""
Control-barrier-function shield.

A proto-action from the agent is accepted when its offered-load MLU is at most
eta. Otherwise a local search perturbs it: in every tunnel whose worst path is
overloaded, a random share of that path's traffic is moved to the tunnel's
other paths in proportion to their headroom. The feasible candidate closest to
the proto-action in L1 wins; with none, the least-loaded candidate seen.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from ..net.topology import Topology
from ..net.traffic import TrafficSample
from .flow_env import SplitAction, batch_mlu, mlu, path_rates, validate_action

logger = logging.getLogger(__name__)


class CbfConfig(BaseModel):
    enabled: bool = True
    radius: float = Field(default=0.3, gt=0, le=1)       # delta_s
    n_solutions: int = Field(default=450, ge=1)          # N_cbf
    max_iter: int = Field(default=20, ge=1)              # M_cbf
    eta: float = Field(default=1.0, gt=0, le=1)
    seed: int = 0


@dataclass(frozen=True)
class ProjectionOutcome:
    action: SplitAction
    was_modified: bool
    feasible_found: bool
    mlu_before: float
    mlu_after: float
    l1_distance: float
    candidates_evaluated: int


def _demand(topo: Topology, demand: Union[TrafficSample, np.ndarray]) -> np.ndarray:
    if isinstance(demand, TrafficSample):
        return demand.vector(topo)
    return np.asarray(demand, dtype=np.float64)


def is_safe(topo: Topology, demand: Union[TrafficSample, np.ndarray],
            action: Union[SplitAction, np.ndarray], eta: float) -> bool:
    d = _demand(topo, demand)
    x = validate_action(topo, action)
    return mlu(topo, path_rates(topo, d, x) @ topo.incidence) <= eta


def _perturb_batch(topo: Topology, d: np.ndarray, center: np.ndarray, radius: float,
                   eta: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """(n, P) candidates around `center`."""
    inc = topo.incidence
    loads = path_rates(topo, d, center) @ inc
    util = loads / topo.capacities
    on_path = inc > 0
    path_util = np.where(on_path, util, -np.inf).max(axis=1)
    headroom = np.where(on_path, topo.capacities - loads, np.inf).min(axis=1)
    headroom = np.maximum(headroom, 0.0)

    cands = np.repeat(center[None, :], n, axis=0)
    for k in range(topo.n_tunnels):
        sl = topo.tunnel_slice(k)
        pu = path_util[sl]
        if pu.size < 2 or pu.max() <= eta:
            continue
        worst = int(np.argmax(pu))
        others = np.delete(np.arange(pu.size), worst)
        weights = headroom[sl][others]
        if weights.sum() <= 0:
            weights = np.ones_like(weights)
        weights = weights / weights.sum()

        eps = rng.uniform(0.0, radius, size=n)
        moved = np.minimum(eps, center[sl.start + worst])
        cands[:, sl.start + worst] -= moved
        cands[:, sl.start + others] += moved[:, None] * weights[None, :]
    return np.clip(cands, 0.0, 1.0)


def perturb(topo: Topology, demand: Union[TrafficSample, np.ndarray],
            action: Union[SplitAction, np.ndarray], radius: float,
            rng: np.random.Generator, eta: float = 1.0) -> SplitAction:
    """One random candidate around `action`."""
    d = _demand(topo, demand)
    x = validate_action(topo, action)
    return SplitAction.from_vector(topo, _perturb_batch(topo, d, x, radius, eta, rng, 1)[0])


def project(topo: Topology, demand: Union[TrafficSample, np.ndarray],
            proto: Union[SplitAction, np.ndarray], cfg: Optional[CbfConfig] = None,
            rng: Optional[np.random.Generator] = None) -> ProjectionOutcome:
    """
    Closest feasible perturbation of `proto`, or the lowest-MLU candidate
    (possibly `proto` itself) when none is feasible.
    """
    cfg = cfg or CbfConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d = _demand(topo, demand)
    x0 = validate_action(topo, proto)
    mu0 = mlu(topo, path_rates(topo, d, x0) @ topo.incidence)

    if mu0 <= cfg.eta:
        return ProjectionOutcome(SplitAction.from_vector(topo, x0), False, True, mu0, mu0, 0.0, 0)

    best_x, best_mu = x0, mu0
    evaluated = 0
    for _ in range(cfg.max_iter):
        cands = _perturb_batch(topo, d, best_x, cfg.radius, cfg.eta, rng, cfg.n_solutions)
        mus = batch_mlu(topo, path_rates(topo, d, cands) @ topo.incidence)
        evaluated += len(cands)

        feasible = np.flatnonzero(mus <= cfg.eta)
        if feasible.size:
            dist = np.abs(cands[feasible] - x0).sum(axis=1)
            # closest first, then lower MLU, then earlier candidate
            order = np.lexsort((feasible, mus[feasible], dist))
            pick = feasible[order[0]]
            x = cands[pick]
            return ProjectionOutcome(SplitAction.from_vector(topo, x), True, True, mu0,
                                     float(mus[pick]), float(dist[order[0]]), evaluated)

        i = int(np.argmin(mus))
        if mus[i] < best_mu:
            best_x, best_mu = cands[i], float(mus[i])

    logger.warning("CBF found no feasible candidate: MLU %.4f -> %.4f after %d candidates",
                   mu0, best_mu, evaluated)
    return ProjectionOutcome(SplitAction.from_vector(topo, best_x), best_mu < mu0, False,
                             mu0, best_mu, float(np.abs(best_x - x0).sum()), evaluated)


class CbfShield:
    """Seeded projection operator for one environment worker."""

    def __init__(self, topo: Topology, cfg: Optional[CbfConfig] = None,
                 rng: Optional[np.random.Generator] = None, eta_cap: Optional[float] = None):
        self.topo = topo
        self.cfg = cfg or CbfConfig()
        if eta_cap is not None and eta_cap < self.cfg.eta:
            # an action is only fully admitted below the environment's rho_max
            self.cfg = self.cfg.model_copy(update={"eta": eta_cap})
        self.rng = rng if rng is not None else np.random.default_rng(self.cfg.seed)
        self.calls = 0
        self.modified = 0
        self.fallbacks = 0

    def __call__(self, demand: Union[TrafficSample, np.ndarray],
                 proto: Union[SplitAction, np.ndarray]) -> ProjectionOutcome:
        outcome = project(self.topo, demand, proto, self.cfg, self.rng)
        self.calls += 1
        self.modified += int(outcome.was_modified)
        self.fallbacks += int(not outcome.feasible_found)
        return outcome

    def stats(self) -> dict:
        return {"calls": self.calls, "modified": self.modified, "fallbacks": self.fallbacks}
