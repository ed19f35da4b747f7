# lbsim/harness/campaign.py
"""
Training campaigns and comparison runs.

A campaign directory holds:
  metrics.csv      one row per environment step
  episodes.csv     per-episode aggregates
  checkpoint.json  final agent state
  manifest.json    config, seeds, hashes of the artifacts, throughput
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from .. import __version__
from ..core.baselines import Baseline
from ..core.flow_env import FlowEnv
from ..core.safety import CbfShield
from ..net.topology import Topology
from ..net.traffic import TrafficGenerator, TrafficProfile, TrafficSample, load_trace, sample_trace
from ..rl.checkpoint import load_checkpoint, save_checkpoint
from ..rl.trainer import TrainResult, make_agent, policy_name, train
from ..utils import content_hash, rng_for, write_json
from .config import ExperimentConfig, config_hash
from .evaluation import (BaselinePolicy, EvalPolicy, NlpPolicy, PolicyEvaluation, compare,
                         load_learned_policy, run_eval, trace_fingerprint)
from .metrics import write_metrics, write_summary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CampaignArtifacts:
    out_dir: Path
    metrics_path: Path
    episodes_path: Path
    checkpoint_path: Path
    manifest_path: Path
    result: TrainResult


def env_factory(cfg: ExperimentConfig, topo: Topology, profile: TrafficProfile,
                clocks: Optional[Sequence[int]] = None):
    """Worker w draws traffic with seed traffic.seed + w, starting at clocks[w] (default 0)."""
    def build(w: int) -> FlowEnv:
        start = int(clocks[w]) if clocks and w < len(clocks) else 0
        return FlowEnv(topo, TrafficGenerator(profile.with_seed(profile.seed + w), start), cfg.env)
    return build


def shield_factory(cfg: ExperimentConfig, topo: Topology, enabled: bool):
    def build(w: int) -> Optional[CbfShield]:
        if not enabled:
            return None
        return CbfShield(topo, cfg.cbf, rng_for(cfg.cbf.seed, w), eta_cap=cfg.env.rho_max)
    return build


def run_training_campaign(cfg: ExperimentConfig, out_dir: Optional[Path] = None,
                          fine_tune: Optional[Path] = None) -> CampaignArtifacts:
    """Train one agent and persist every artifact of the run."""
    topo = cfg.topology.build()
    profile = cfg.traffic.resolve(topo)
    shielded = cfg.cbf.enabled
    name = policy_name(cfg.agent.algo, shielded)
    out_dir = Path(out_dir or cfg.output_dir / f"{cfg.name}-{name}")
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.schedule.seed)
    agent = make_agent(topo, cfg.agent, cfg.schedule)
    clocks: Optional[List[int]] = None
    if fine_tune is not None:
        resumed = load_checkpoint(fine_tune)
        agent.load_checkpoint(resumed)
        clocks = resumed.meta.get("traffic_clocks")
        logger.info("Fine-tuning from %s (episode %d, traffic clocks %s)", fine_tune, agent.episode, clocks)

    result = train(agent, env_factory(cfg, topo, profile, clocks), shield_factory(cfg, topo, shielded),
                   cfg.schedule, fine_tune=fine_tune is not None)

    digest = config_hash(cfg)
    metrics_path = write_metrics(result.metrics, out_dir / "metrics.csv")
    episodes_path = write_metrics(result.episodes, out_dir / "episodes.csv")
    checkpoint_path = save_checkpoint(
        agent.to_checkpoint({"config_hash": digest, "topology": topo.name,
                             "cbf": shielded, "fine_tuned_from": str(fine_tune) if fine_tune else None,
                             "traffic_clocks": result.clocks}),
        out_dir / "checkpoint.json")

    manifest = {
        "name": cfg.name,
        "policy": name,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "lbsim_version": __version__,
        "versions": {"numpy": np.__version__, "torch": torch.__version__, "pandas": pd.__version__},
        "config": cfg.model_dump(mode="json"),
        "config_hash": digest,
        "seeds": {"schedule": cfg.schedule.seed, "traffic": cfg.traffic.seed, "cbf": cfg.cbf.seed},
        "episodes": agent.episode,
        "fine_tuned_from": str(fine_tune) if fine_tune else None,
        "throughput": {"samples": result.samples, "seconds": result.seconds,
                       "samples_per_second": result.samples_per_second},
        "shield": result.shield,
        "artifacts": {
            p.name: {"path": p.name, "sha256": content_hash(p)}
            for p in (metrics_path, episodes_path, checkpoint_path)
        },
    }
    manifest_path = write_json(out_dir / "manifest.json", manifest)
    logger.info("Campaign %s written to %s", name, out_dir)
    return CampaignArtifacts(out_dir, metrics_path, episodes_path, checkpoint_path,
                             manifest_path, result)


def eval_trace(cfg: ExperimentConfig, topo: Topology) -> List[TrafficSample]:
    """The configured frozen trace: a file when given, else generated."""
    if cfg.eval.trace_path is not None:
        return load_trace(cfg.eval.trace_path)
    profile = cfg.traffic.resolve(topo).with_seed(cfg.eval.trace_seed)
    return sample_trace(profile, cfg.eval.trace_length, cfg.eval.trace_start)


def build_policies(cfg: ExperimentConfig, topo: Topology,
                   checkpoints: Sequence[Union[str, Path]] = (),
                   baselines: Optional[Sequence[str]] = None,
                   include_nlp: Optional[bool] = None,
                   shield_learned: bool = True) -> List[EvalPolicy]:
    policies: List[EvalPolicy] = []
    for text in (cfg.eval.baselines if baselines is None else baselines):
        baseline = Baseline.parse(text, cfg.eval.static_path)
        policies.append(BaselinePolicy(baseline, topo, seed=cfg.eval.trace_seed))
    if cfg.eval.include_nlp if include_nlp is None else include_nlp:
        policies.append(NlpPolicy(topo, cfg.solver, cfg.env, cfg.eval.nlp_cache_dir))
    for i, path in enumerate(checkpoints):
        learned = load_learned_policy(path, topo, cfg.env, cfg.cbf if shield_learned else None)
        if any(p.name == learned.name for p in policies):
            learned.name = f"{learned.name}@{Path(path).parent.name or i}"
        policies.append(learned)
    return policies


def run_comparison(cfg: ExperimentConfig, policies: Sequence[EvalPolicy],
                   trace: Sequence[TrafficSample], topo: Topology,
                   out_dir: Optional[Path] = None) -> pd.DataFrame:
    """Evaluate, rank and write summary.csv plus per-policy step logs."""
    results: Dict[str, PolicyEvaluation] = run_eval(topo, cfg.env, policies, trace)
    ranked = compare([r.summary for r in results.values()])
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_summary(ranked, out_dir / "summary.csv")
        for name, res in results.items():
            safe = name.replace("+", "_").replace("@", "_")
            write_metrics(res.steps, out_dir / f"steps_{safe}.csv")
        write_json(out_dir / "manifest.json", {
            "name": cfg.name,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "config_hash": config_hash(cfg),
            "trace_sha256": trace_fingerprint(trace),
            "policies": list(results),
        })
    return ranked
