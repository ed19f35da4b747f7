# lbsim/harness/evaluation.py
"""
Evaluate policies on a frozen trace and rank them.

Every policy runs on its own FlowEnv built from the same topology and
environment settings, and sees the identical demand samples.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import orjson
import pandas as pd
from joblib import Memory
from tqdm import tqdm

from ..core.baselines import Baseline, baseline_vector
from ..core.flow_env import EnvConfig, FlowEnv, default_obs_scale
from ..core.safety import CbfConfig, CbfShield
from ..errors import EvaluationError
from ..net.topology import Topology, load_topology, topology_to_document
from ..net.traffic import TrafficSample
from ..opt.optimizer import NlpProblem, SolverConfig, min_mlu, solve
from ..rl.checkpoint import Checkpoint, load_checkpoint
from ..rl.ddpg import DdpgAgent, DdpgConfig
from ..rl.ppo import PpoAgent, PpoConfig
from ..utils import content_hash, dumps_json, progress_enabled
from .metrics import SUMMARY_COLUMNS

logger = logging.getLogger(__name__)


class EvalPolicy(Protocol):
    name: str

    def act(self, sample: TrafficSample) -> np.ndarray:
        ...


# ---------------------------------------------------------------------------
# Policy adapters
# ---------------------------------------------------------------------------
class BaselinePolicy:
    def __init__(self, baseline: Baseline, topo: Topology, seed: int = 0):
        self.baseline = baseline
        self.topo = topo
        self.name = baseline.name
        self.rng = np.random.default_rng(seed)
        self.shield_modified = 0

    def act(self, sample: TrafficSample) -> np.ndarray:
        return baseline_vector(self.baseline, self.topo, self.rng)


@lru_cache(maxsize=8)
def _topology_from_json(text: str) -> Topology:
    return load_topology(text)


def _solve_split(topo_json: str, demand: Tuple[float, ...], env_json: str,
                 solver_json: str) -> Tuple[Optional[List[float]], bool, Optional[str]]:
    """Pure-data wrapper so joblib.Memory can key the cache on its arguments."""
    topo = _topology_from_json(topo_json)
    env = EnvConfig.model_validate_json(env_json)
    cfg = SolverConfig.model_validate_json(solver_json)
    problem = NlpProblem(topo, np.asarray(demand, dtype=np.float64), cfg.mu_target, env)
    sol = solve(problem, cfg)
    if sol.action is None:
        return None, False, sol.violated_cut
    return sol.action.vector(topo).tolist(), sol.feasible, None


class NlpPolicy:
    """
    Per-sample optimizer. Infeasible samples fall back to the min-MLU split.
    Results are cached on disk when `cache_dir` is set.
    """

    name = "nlp"

    def __init__(self, topo: Topology, solver: Optional[SolverConfig] = None,
                 env: Optional[EnvConfig] = None, cache_dir: Optional[Path] = None):
        self.topo = topo
        self.solver = solver or SolverConfig()
        self.env = env or EnvConfig()
        self.infeasible = 0
        self.shield_modified = 0
        self._topo_json = orjson.dumps(topology_to_document(topo)).decode()
        if cache_dir is not None:
            self._solve = Memory(str(cache_dir), verbose=0).cache(_solve_split)
        else:
            self._solve = _solve_split

    def act(self, sample: TrafficSample) -> np.ndarray:
        demand = tuple(sample.vector(self.topo).tolist())
        split, _, cut = self._solve(self._topo_json, demand, self.env.model_dump_json(),
                                    self.solver.model_dump_json())
        if split is None:
            self.infeasible += 1
            logger.info("NLP infeasible at t=%d (cut %s); using min-MLU split", sample.t, cut)
            _, action = min_mlu(self.topo, np.asarray(demand))
            return action.vector(self.topo)
        return np.asarray(split)


class LearnedPolicy:
    """Exploit-mode agent, optionally behind a CBF shield."""

    def __init__(self, agent: Union[PpoAgent, DdpgAgent], topo: Topology, env: EnvConfig,
                 shield: Optional[CbfShield] = None, name: Optional[str] = None):
        self.agent = agent
        self.topo = topo
        self.shield = shield
        self.obs_scale = env.obs_scale or default_obs_scale(topo)
        self.name = name or (f"{agent.algo}+cbf" if shield is not None else agent.algo)
        self.shield_modified = 0

    def act(self, sample: TrafficSample) -> np.ndarray:
        obs = sample.vector(self.topo) / self.obs_scale
        proto = self.agent.policy_action(obs)
        if self.shield is None:
            return proto
        outcome = self.shield(sample, proto)
        self.shield_modified += int(outcome.was_modified)
        return outcome.action.vector(self.topo)


def agent_from_checkpoint(ckpt: Checkpoint, topo: Topology) -> Union[PpoAgent, DdpgAgent]:
    """Rebuild an agent with the checkpoint's layout and load its weights."""
    hidden = tuple(ckpt.meta.get("hidden", ()))
    if ckpt.meta.get("obs_dim") not in (None, topo.n_tunnels):
        raise EvaluationError(
            f"Checkpoint expects {ckpt.meta['obs_dim']} tunnels, topology has {topo.n_tunnels}")
    if ckpt.algo == "ppo":
        agent = PpoAgent(topo, hidden, cfg=PpoConfig(), seed=int(ckpt.meta.get("seed", 0)))
    elif ckpt.algo == "ddpg":
        agent = DdpgAgent(topo, hidden, cfg=DdpgConfig(keep_replay=False, buffer_size=1),
                          seed=int(ckpt.meta.get("seed", 0)))
    else:
        raise EvaluationError(f"Unknown agent type in checkpoint: {ckpt.algo}")
    agent.load_checkpoint(Checkpoint(ckpt.algo, ckpt.meta, ckpt.networks, ckpt.optimizers,
                                     ckpt.rng, None, ckpt.schema_version))
    return agent


def load_learned_policy(path: Union[str, Path], topo: Topology, env: EnvConfig,
                        cbf: Optional[CbfConfig] = None, name: Optional[str] = None) -> LearnedPolicy:
    ckpt = load_checkpoint(path)
    agent = agent_from_checkpoint(ckpt, topo)
    shield = None
    if cbf is not None and cbf.enabled:
        shield = CbfShield(topo, cbf, eta_cap=env.rho_max)
    return LearnedPolicy(agent, topo, env, shield, name)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EvalSummary:
    policy: str
    samples: int
    mean_delay_ms: float
    median_delay_ms: float
    p95_delay_ms: float
    mean_mlu: float
    max_mlu: float
    mean_acceptance: float
    min_acceptance: float
    mean_reward: float
    cbf_modified_fraction: float
    inference_seconds: float

    @classmethod
    def from_steps(cls, policy: str, steps: pd.DataFrame, modified: int,
                   seconds: float) -> "EvalSummary":
        delay = steps["mean_delay_ms"]
        return cls(
            policy=policy,
            samples=len(steps),
            mean_delay_ms=float(delay.mean()),
            median_delay_ms=float(delay.median()),
            p95_delay_ms=float(np.percentile(delay, 95)),
            mean_mlu=float(steps["mlu"].mean()),
            max_mlu=float(steps["mlu"].max()),
            mean_acceptance=float(steps["acceptance_rate"].mean()),
            min_acceptance=float(steps["acceptance_rate"].min()),
            mean_reward=float(steps["reward"].mean()),
            cbf_modified_fraction=modified / len(steps),
            inference_seconds=seconds,
        )


@dataclass(frozen=True, eq=False)
class PolicyEvaluation:
    summary: EvalSummary
    steps: pd.DataFrame


def run_eval(topo: Topology, env_cfg: EnvConfig, policies: Sequence[EvalPolicy],
             trace: Sequence[TrafficSample]) -> Dict[str, PolicyEvaluation]:
    """Score every policy on every sample of `trace`."""
    if not trace:
        raise EvaluationError("Evaluation trace is empty")
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise EvaluationError(f"Duplicate policy names: {names}")
    for sample in trace:
        sample.vector(topo)

    results: Dict[str, PolicyEvaluation] = {}
    for policy in policies:
        env = FlowEnv(topo, None, env_cfg)
        rows = []
        seconds = 0.0
        for sample in tqdm(trace, desc=policy.name, disable=not progress_enabled(), leave=False):
            start = time.perf_counter()
            x = policy.act(sample)
            seconds += time.perf_counter() - start
            report = env.evaluate(sample, x)
            rows.append({"policy": policy.name, **report.to_record()})
        steps = pd.DataFrame(rows)
        modified = int(getattr(policy, "shield_modified", 0))
        summary = EvalSummary.from_steps(policy.name, steps, modified, seconds)
        logger.info("%-10s delay %.3f ms  mlu %.3f  acceptance %.4f", policy.name,
                    summary.mean_delay_ms, summary.mean_mlu, summary.mean_acceptance)
        results[policy.name] = PolicyEvaluation(summary, steps)
    return results


def compare(summaries: Sequence[EvalSummary]) -> pd.DataFrame:
    """Rank by mean delay; ties broken by policy name."""
    if len(summaries) < 2:
        raise EvaluationError(f"Need at least two policies to compare, got {len(summaries)}")
    df = pd.DataFrame([asdict(s) for s in summaries], columns=SUMMARY_COLUMNS)
    df = df.sort_values(["mean_delay_ms", "policy"], kind="mergesort").reset_index(drop=True)
    df.insert(0, "rank", np.arange(1, len(df) + 1))
    return df


def summaries_from_frame(df: pd.DataFrame) -> List[EvalSummary]:
    return [EvalSummary(**{c: row[c] for c in SUMMARY_COLUMNS}) for _, row in df.iterrows()]


def render_table(ranked: pd.DataFrame) -> str:
    cols = ["rank", "policy", "mean_delay_ms", "p95_delay_ms", "mean_mlu", "max_mlu",
            "mean_acceptance", "inference_seconds"]
    return ranked[cols].to_string(index=False, float_format=lambda v: f"{v:.4f}")


def trace_fingerprint(trace: Sequence[TrafficSample]) -> str:
    return content_hash(dumps_json([{"t": s.t, **s.demand} for s in trace]))
