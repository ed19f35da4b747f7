# lbsim/opt/optimizer.py
"""
Per-sample nonlinear optimizer: minimize the mean tunnel delay subject to
offered-load MLU <= mu_target.

Solver outline:
  1. exact LP (HiGHS) for the minimum achievable MLU -> feasibility + cut
  2. multi-start projected gradient on a fixed path support per start:
     the tunnel max is smoothed with an annealed log-sum-exp, iterates are
     projected onto (product of simplices) x (capacity half-spaces) with
     Dykstra's alternating projections, steps use Armijo backtracking
  3. support pruning for starts that were not enumerated
  4. best true objective wins (ties: lowest start index)

The true objective is evaluated through flow_env, so solver and environment
agree on every feasible split.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from scipy.optimize import linprog
from tqdm import tqdm

from ..core.baselines import Baseline, BaselineKind, baseline_vector
from ..core.flow_env import (EnvConfig, SplitAction, batch_mlu, evaluate_split, link_delays,
                             mlu, path_rates, tunnel_delays)
from ..errors import SolverError
from ..net.topology import Topology
from ..net.traffic import TrafficSample
from ..utils import progress_enabled

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9


class SolverConfig(BaseModel):
    mu_target: float = Field(default=0.999, gt=0, le=1)
    n_starts: int = Field(default=16, ge=1)
    max_iter: int = Field(default=200, ge=1)           # per temperature stage
    temperature0: float = Field(default=1.0, gt=0)
    temperature_min: float = Field(default=1e-4, gt=0)
    tol: float = Field(default=1e-6, gt=0)
    budget: int = Field(default=400_000, ge=1)         # total descent iterations
    projection_sweeps: int = Field(default=2000, ge=1)
    seed: int = 0
    n_jobs: int = 1


@dataclass(frozen=True, eq=False)
class NlpProblem:
    topo: Topology
    demand: np.ndarray
    mu_target: float = 0.999
    env: EnvConfig = field(default_factory=EnvConfig)

    @classmethod
    def from_sample(cls, topo: Topology, sample: TrafficSample, mu_target: float = 0.999,
                    env: Optional[EnvConfig] = None) -> "NlpProblem":
        return cls(topo, sample.vector(topo), mu_target, env or EnvConfig())

    def __post_init__(self):
        if self.demand.shape != (self.topo.n_tunnels,):
            raise SolverError(f"Demand has shape {self.demand.shape}, expected ({self.topo.n_tunnels},)")
        if np.any(self.demand < 0) or not np.all(np.isfinite(self.demand)):
            raise SolverError("Demand must be finite and non-negative")


@dataclass(frozen=True)
class NlpSolution:
    action: Optional[SplitAction]
    objective: float
    feasible: bool
    iterations: int
    restarts: int = 0
    mlu: float = math.nan
    budget_exhausted: bool = False
    violated_cut: Optional[str] = None


# ---------------------------------------------------------------------------
# LP: minimum achievable MLU
# ---------------------------------------------------------------------------
def _min_mlu_lp(topo: Topology, demand: np.ndarray,
                support: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    P, L = topo.n_paths, topo.n_links
    coef = demand[topo.path_tunnel][:, None] * topo.incidence          # (P, L)
    a_ub = np.hstack([coef.T, -topo.capacities[:, None]])
    b_ub = np.zeros(L)
    a_eq = np.zeros((topo.n_tunnels, P + 1))
    for k in range(topo.n_tunnels):
        a_eq[k, topo.tunnel_slice(k)] = 1.0
    b_eq = np.ones(topo.n_tunnels)
    upper = np.ones(P) if support is None else support.astype(np.float64)
    bounds = [(0.0, float(u)) for u in upper] + [(0.0, None)]
    c = np.zeros(P + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        if support is not None:
            return math.inf, np.zeros(P)
        raise SolverError(f"Min-MLU LP failed: {res.message}")
    x = np.clip(res.x[:P], 0.0, 1.0)
    return float(res.x[-1]), x


def min_mlu(topo: Topology, demand: np.ndarray) -> Tuple[float, SplitAction]:
    """Minimum achievable offered-load MLU and a split attaining it."""
    mu, x = _min_mlu_lp(topo, np.asarray(demand, dtype=np.float64))
    return mu, SplitAction.from_vector(topo, _renormalize(topo, x))


def check_feasibility(problem: NlpProblem) -> Tuple[bool, float, Optional[str]]:
    """(feasible, min MLU, id of the binding link when infeasible)."""
    mu, x = _min_mlu_lp(problem.topo, problem.demand)
    if mu <= problem.mu_target + FEAS_TOL:
        return True, mu, None
    loads = path_rates(problem.topo, problem.demand, x) @ problem.topo.incidence
    cut = problem.topo.links[int(np.argmax(loads / problem.topo.capacities))].id
    return False, mu, cut


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------
def objective(problem: NlpProblem, x: np.ndarray) -> float:
    """True objective: mean tunnel delay from the environment's pipeline."""
    report = evaluate_split(problem.topo, problem.demand, np.asarray(x, dtype=np.float64),
                            problem.env, d_ref=1.0)
    return report.mean_delay


def batch_objective(problem: NlpProblem, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(mean tunnel delay, offered MLU) for each row of X."""
    topo, env = problem.topo, problem.env
    loads = path_rates(topo, problem.demand, X) @ topo.incidence
    mus = batch_mlu(topo, loads)
    per_path = link_delays(topo, loads, env.kappa, env.rho_max) @ topo.incidence.T
    per_tunnel = tunnel_delays(topo, per_path, X, env.active_threshold)
    return per_tunnel.mean(axis=-1), mus


def _smooth(problem: NlpProblem, x: np.ndarray, support: np.ndarray, temp: float,
            with_grad: bool = True):
    """Log-sum-exp smoothed mean tunnel delay restricted to `support`."""
    topo, env = problem.topo, problem.env
    inc, caps = topo.incidence, topo.capacities
    starts, pt = topo.offsets[:-1], topo.path_tunnel
    rates_coef = problem.demand[pt]
    loads = (rates_coef * x) @ inc
    capped = np.minimum(loads, env.rho_max * caps)
    slack = caps - capped
    per_path = inc @ (topo.prop_delays + env.kappa / slack)

    z = np.where(support, per_path / temp, -np.inf)
    top = np.maximum.reduceat(z, starts)
    ez = np.exp(z - top[pt])
    total = np.add.reduceat(ez, starts)
    value = float(np.mean(temp * (top + np.log(total))))
    if not with_grad:
        return value

    weights = ez / total[pt] / topo.n_tunnels
    g_link = (weights @ inc) * env.kappa / slack**2
    g_link[loads > env.rho_max * caps] = 0.0
    grad = rates_coef * (inc @ g_link)
    return value, np.where(support, grad, 0.0)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------
def _simplex_vec(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort based)."""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = ind[cond][-1]
    theta = css[cond][-1] / rho
    return np.maximum(v - theta, 0.0)


def _simplex_project(topo: Topology, y: np.ndarray, support: np.ndarray) -> np.ndarray:
    x = np.zeros_like(y)
    for k in range(topo.n_tunnels):
        sl = topo.tunnel_slice(k)
        idx = np.flatnonzero(support[sl]) + sl.start
        x[idx] = _simplex_vec(y[idx])
    return x


class _FaceProjector:
    """Projection onto {simplex faces} x {a_e . x <= b_e} for one support."""

    def __init__(self, problem: NlpProblem, support: np.ndarray, sweeps: int):
        topo = problem.topo
        self.topo = topo
        self.support = support
        self.sweeps = sweeps
        coef = (problem.demand[topo.path_tunnel] * support)[:, None] * topo.incidence
        rows = np.flatnonzero(np.abs(coef).sum(axis=0) > 0)
        self.a = coef[:, rows].T.copy()                              # (m, P)
        self.b = problem.mu_target * topo.capacities[rows] * (1.0 - 1e-9)
        self.norm2 = np.einsum("ij,ij->i", self.a, self.a)
        self.scale = float(topo.capacities.max()) if topo.n_links else 1.0

    def violation(self, x: np.ndarray) -> float:
        if not self.a.size:
            return 0.0
        return float(np.max(self.a @ x - self.b))

    def __call__(self, y: np.ndarray) -> Optional[np.ndarray]:
        y = np.where(self.support, y, 0.0)
        x = _simplex_project(self.topo, y, self.support)
        if self.violation(x) <= 0:
            return x

        m = len(self.b)
        incr = np.zeros((m + 1, y.size))
        x = y.copy()
        for _ in range(self.sweeps):
            x_old = x
            for i in range(m):
                z = x + incr[i + 1]
                excess = self.a[i] @ z - self.b[i]
                x = z - (excess / self.norm2[i]) * self.a[i] if excess > 0 else z
                incr[i + 1] = z - x
            z = x + incr[0]
            x = _simplex_project(self.topo, z, self.support)
            incr[0] = z - x
            if np.max(np.abs(x - x_old)) < 1e-13:
                break
        if self.violation(x) > 1e-10 * self.scale:
            return None
        return x


# ---------------------------------------------------------------------------
# Descent
# ---------------------------------------------------------------------------
@dataclass
class _StartResult:
    index: int
    x: Optional[np.ndarray]
    value: float
    iterations: int
    exhausted: bool


def _descend(problem: NlpProblem, x: np.ndarray, support: np.ndarray, cfg: SolverConfig,
             project: _FaceProjector, budget: int) -> Tuple[np.ndarray, int, bool]:
    temp = cfg.temperature0
    iters = 0
    step = 1.0
    while True:
        for _ in range(cfg.max_iter):
            if iters >= budget:
                return x, iters, True
            f, g = _smooth(problem, x, support, temp)
            alpha = step
            x_new = x
            for _ in range(50):
                cand = project(x - alpha * g)
                if cand is not None:
                    f_new = _smooth(problem, cand, support, temp, with_grad=False)
                    if f_new <= f + 1e-4 * float(g @ (cand - x)):
                        x_new = cand
                        break
                alpha *= 0.5
            iters += 1
            moved = float(np.max(np.abs(x_new - x))) if x.size else 0.0
            x = x_new
            step = min(alpha * 2.0, 1e4)
            if moved < cfg.tol:
                break
        if temp <= cfg.temperature_min:
            return x, iters, False
        temp = max(temp * 0.5, cfg.temperature_min)


def _face_feasible(problem: NlpProblem, support: np.ndarray) -> bool:
    mu, _ = _min_mlu_lp(problem.topo, problem.demand, support)
    return mu <= problem.mu_target + FEAS_TOL


def _run_start(problem: NlpProblem, index: int, x0: np.ndarray, support: np.ndarray,
               prune: bool, cfg: SolverConfig, budget: int) -> _StartResult:
    topo = problem.topo
    if not _face_feasible(problem, support):
        support = np.ones(topo.n_paths, dtype=bool)
    project = _FaceProjector(problem, support, cfg.projection_sweeps)
    x = project(x0)
    if x is None:
        return _StartResult(index, None, math.inf, 0, False)

    x, iters, exhausted = _descend(problem, x, support, cfg, project, budget)
    best_x, best_f = x, objective(problem, x)

    while prune and not exhausted:
        per_path = objective_path_delays(problem, best_x)
        improved = False
        for k in range(topo.n_tunnels):
            sl = topo.tunnel_slice(k)
            on = np.flatnonzero(support[sl]) + sl.start
            if on.size < 2:
                continue
            worst = on[int(np.argmax(per_path[on]))]
            trial_support = support.copy()
            trial_support[worst] = False
            if not _face_feasible(problem, trial_support):
                continue
            trial_project = _FaceProjector(problem, trial_support, cfg.projection_sweeps)
            y = trial_project(best_x)
            if y is None:
                continue
            y, used, exhausted = _descend(problem, y, trial_support, cfg, trial_project,
                                          max(budget - iters, 0))
            iters += used
            f = objective(problem, y)
            if f < best_f - 1e-12:
                best_x, best_f, support = y, f, trial_support
                improved = True
                break
            if exhausted:
                break
        if not improved:
            break

    return _StartResult(index, best_x, best_f, iters, exhausted)


def objective_path_delays(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    report = evaluate_split(problem.topo, problem.demand, x, problem.env, d_ref=1.0)
    return report.path_delays


def _supports(topo: Topology) -> List[np.ndarray]:
    """Every non-empty per-tunnel support combination."""
    per_tunnel = []
    for k, tunnel in enumerate(topo.tunnels):
        n = len(tunnel.paths)
        masks = [np.array(bits, dtype=bool)
                 for bits in itertools.product([False, True], repeat=n) if any(bits)]
        per_tunnel.append(masks)
    return [np.concatenate(combo) for combo in itertools.product(*per_tunnel)]


def _n_supports(topo: Topology) -> int:
    return math.prod(2 ** len(t.paths) - 1 for t in topo.tunnels)


def _uniform_on(topo: Topology, support: np.ndarray) -> np.ndarray:
    x = np.zeros(topo.n_paths)
    for k in range(topo.n_tunnels):
        sl = topo.tunnel_slice(k)
        on = support[sl]
        x[sl] = on / on.sum()
    return x


def _starts(problem: NlpProblem, cfg: SolverConfig, lp_x: np.ndarray
            ) -> List[Tuple[np.ndarray, np.ndarray, bool]]:
    """(start point, support, prune?) per restart."""
    topo = problem.topo
    if _n_supports(topo) <= cfg.n_starts:
        return [(_uniform_on(topo, s), s, False) for s in _supports(topo)]

    full = np.ones(topo.n_paths, dtype=bool)
    points = [
        baseline_vector(Baseline(BaselineKind.ECMP), topo),
        baseline_vector(Baseline(BaselineKind.UCMP), topo),
        _renormalize(topo, lp_x),
    ]
    max_paths = max(len(t.paths) for t in topo.tunnels)
    for p in range(max_paths):
        vertex = np.zeros(topo.n_paths)
        for k, tunnel in enumerate(topo.tunnels):
            vertex[topo.tunnel_slice(k).start + min(p, len(tunnel.paths) - 1)] = 1.0
        points.append(vertex)
    rng = np.random.default_rng(cfg.seed)
    while len(points) < cfg.n_starts:
        points.append(baseline_vector(Baseline(BaselineKind.RANDOM), topo, rng))

    starts = []
    for x0 in points[: cfg.n_starts]:
        support = x0 > problem.env.active_threshold
        starts.append((x0, support if support.any() else full, True))
    return starts


def _renormalize(topo: Topology, x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, None)
    sums = np.add.reduceat(x, topo.offsets[:-1])
    return x / sums[topo.path_tunnel]


def solve(problem: NlpProblem, cfg: Optional[SolverConfig] = None) -> NlpSolution:
    """Best split found for one demand sample."""
    cfg = cfg or SolverConfig()
    topo = problem.topo
    if topo.n_tunnels == 0:
        return NlpSolution(SplitAction({}), 0.0, True, 0, 0, 0.0)

    mu_star, lp_x = _min_mlu_lp(topo, problem.demand)
    if mu_star > problem.mu_target + FEAS_TOL:
        loads = path_rates(topo, problem.demand, lp_x) @ topo.incidence
        cut = topo.links[int(np.argmax(loads / topo.capacities))].id
        logger.info("Infeasible sample: min MLU %.4f > %.4f (cut %s)", mu_star, problem.mu_target, cut)
        return NlpSolution(None, math.inf, False, 0, 0, mu_star, violated_cut=cut)

    starts = _starts(problem, cfg, lp_x)
    per_start = max(cfg.budget // len(starts), 1)
    results = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_run_start)(problem, i, x0, support, prune, cfg, per_start)
        for i, (x0, support, prune) in enumerate(starts)
    )
    done = [r for r in results if r.x is not None]
    if not done:
        raise SolverError("No restart reached the feasible region")
    best = min(done, key=lambda r: (r.value, r.index))
    x = _renormalize(topo, best.x)
    mu = mlu(topo, path_rates(topo, problem.demand, x) @ topo.incidence)
    return NlpSolution(
        action=SplitAction.from_vector(topo, x),
        objective=objective(problem, x),
        feasible=mu <= problem.mu_target + FEAS_TOL,
        iterations=sum(r.iterations for r in results),
        restarts=len(starts),
        mlu=mu,
        budget_exhausted=any(r.exhausted for r in results),
    )


# ---------------------------------------------------------------------------
# Brute force
# ---------------------------------------------------------------------------
def _simplex_grid(n_paths: int, n: int) -> np.ndarray:
    """All splits with entries in {0, 1/n, ..., 1}."""
    rows = []
    for bars in itertools.combinations(range(n + n_paths - 1), n_paths - 1):
        edges = (-1,) + bars + (n + n_paths - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(n_paths)])
    return np.array(rows, dtype=np.float64) / n


def brute_force(problem: NlpProblem, grid_step: float = 0.01, max_points: int = 10_000_000,
                chunk: int = 50_000) -> NlpSolution:
    """Exhaustive grid oracle; only practical for tiny instances."""
    topo = problem.topo
    n = int(round(1.0 / grid_step))
    if n < 1 or abs(n * grid_step - 1.0) > 1e-9:
        raise SolverError(f"Grid step {grid_step} must divide 1")
    grids = [_simplex_grid(len(t.paths), n) for t in topo.tunnels]
    shape = tuple(len(g) for g in grids)
    total = math.prod(shape)
    if total > max_points:
        raise SolverError(f"Brute-force grid has {total} points, limit is {max_points}")

    best_value, best_x, best_mu = math.inf, None, math.nan
    chunks = range(0, total, chunk)
    for start in tqdm(chunks, desc="brute force", disable=not progress_enabled() or len(chunks) < 10):
        idx = np.unravel_index(np.arange(start, min(total, start + chunk)), shape)
        X = np.concatenate([g[i] for g, i in zip(grids, idx)], axis=1)
        values, mus = batch_objective(problem, X)
        values = np.where(mus <= problem.mu_target + FEAS_TOL, values, np.inf)
        i = int(np.argmin(values))
        if values[i] < best_value:
            best_value, best_x, best_mu = float(values[i]), X[i].copy(), float(mus[i])

    if best_x is None:
        return NlpSolution(None, math.inf, False, total, 0)
    return NlpSolution(SplitAction.from_vector(topo, best_x), best_value, True, total, 0, best_mu)
