# lbsim/cli.py
"""
Command line entry point: `python -m lbsim <command>`.

    train     train a PPO / DDPG agent, optionally behind the CBF shield
    eval      score baselines, the NLP benchmark and checkpoints on a trace
    baseline  score a single baseline on the evaluation trace
    solve     per-sample optimal splits for a trace CSV
    compare   merge summary.csv files into one ranked table
    trace     write the frozen evaluation trace
"""
from __future__ import annotations

import functools
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import click
import numpy as np
import pandas as pd

from . import __version__
from .core.baselines import Baseline
from .errors import LbsimError
from .harness.campaign import build_policies, eval_trace, run_comparison, run_training_campaign
from .harness.config import deep_merge, load_config, seed_overrides
from .harness.evaluation import BaselinePolicy, compare, render_table, run_eval, summaries_from_frame
from .harness.metrics import read_summary, write_summary
from .net.traffic import load_trace, save_trace
from .opt.optimizer import NlpProblem, solve as solve_sample
from .rl.trainer import policy_name
from .utils import setup_logging

logger = logging.getLogger(__name__)


def _guard(fn):
    """Turn domain errors into a clean CLI failure."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LbsimError as exc:
            raise click.ClickException(f"❌ {exc}") from exc
    return wrapper


config_option = click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
                             default=None, help="Experiment config (.toml/.json/.yaml).")
seed_option = click.option("--seed", type=int, default=None, help="Seed for agent, traffic and CBF.")


@click.group()
@click.version_option(__version__, prog_name="lbsim")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING ... (env LBSIM_LOG_LEVEL).")
def main(log_level: Optional[str]) -> None:
    """Safe load-balancing simulator."""
    setup_logging(log_level)


@main.command()
@config_option
@click.option("--algo", type=click.Choice(["ppo", "ddpg"]), default=None)
@click.option("--cbf", type=click.Choice(["on", "off"]), default=None)
@click.option("--cbf-radius", type=float, default=None)
@click.option("--cbf-n", type=int, default=None, help="Candidates per iteration.")
@click.option("--cbf-m", type=int, default=None, help="Search iterations.")
@click.option("--cbf-eta", type=float, default=None, help="MLU threshold.")
@click.option("--episodes", type=int, default=None)
@click.option("--workers", type=int, default=None)
@seed_option
@click.option("--out", type=click.Path(path_type=Path), default=None)
@click.option("--fine-tune", type=click.Path(exists=True, path_type=Path), default=None,
              help="Resume from a checkpoint with the fine-tune learning rate.")
@_guard
def train(config_path, algo, cbf, cbf_radius, cbf_n, cbf_m, cbf_eta, episodes, workers, seed,
          out, fine_tune) -> None:
    """Train an agent and write metrics, checkpoint and manifest."""
    overrides: Dict[str, Any] = seed_overrides(seed) if seed is not None else {}
    overrides = deep_merge(overrides, {
        "agent": {"algo": algo},
        "cbf": {"enabled": None if cbf is None else cbf == "on", "radius": cbf_radius,
                "n_solutions": cbf_n, "max_iter": cbf_m, "eta": cbf_eta},
        "schedule": {"episodes": episodes, "workers": workers},
    })
    cfg = load_config(config_path, overrides)
    artifacts = run_training_campaign(cfg, out, fine_tune)
    result = artifacts.result
    name = policy_name(cfg.agent.algo, cfg.cbf.enabled)
    click.echo(f"✅ Trained {name} for {cfg.schedule.episodes} episodes"
               f" ({result.samples_per_second:.1f} samples/s)")
    if not result.metrics.empty:
        rejected = int((result.metrics["acceptance_rate"] < 1.0).sum())
        marker = "✅" if rejected == 0 else "⚠️"
        click.echo(f"{marker} Steps with rejected traffic: {rejected}")
    click.echo(f"   Artifacts: {artifacts.out_dir}")


@main.command(name="eval")
@config_option
@click.option("--checkpoint", "checkpoints", multiple=True,
              type=click.Path(exists=True, path_type=Path), help="Learned policy; repeatable.")
@click.option("--baseline", "baselines", multiple=True,
              type=click.Choice(["static", "random", "ecmp", "ucmp"]),
              help="Baselines to include (default: from config).")
@click.option("--nlp/--no-nlp", default=None, help="Include the per-sample NLP benchmark.")
@click.option("--cbf", type=click.Choice(["on", "off"]), default="on",
              help="Shield learned policies during evaluation.")
@click.option("--trace", "trace_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_guard
def evaluate(config_path, checkpoints, baselines, nlp, cbf, trace_path, out) -> None:
    """Rank policies on the frozen evaluation trace."""
    cfg = load_config(config_path, {"eval": {"trace_path": str(trace_path) if trace_path else None}})
    topo = cfg.topology.build()
    trace = eval_trace(cfg, topo)
    policies = build_policies(cfg, topo, checkpoints, list(baselines) or None, nlp,
                              shield_learned=cbf == "on")
    out = out or cfg.output_dir / f"{cfg.name}-eval"
    ranked = run_comparison(cfg, policies, trace, topo, out)
    click.echo(render_table(ranked))
    click.echo(f"✅ Summary written to {out / 'summary.csv'}")


@main.command()
@config_option
@click.option("--policy", type=click.Choice(["static", "random", "ecmp", "ucmp"]), required=True)
@click.option("--static-path", type=int, default=None)
@click.option("--trace", "trace_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_guard
def baseline(config_path, policy, static_path, trace_path, out) -> None:
    """Score one baseline on the evaluation trace."""
    cfg = load_config(config_path, {"eval": {"trace_path": str(trace_path) if trace_path else None,
                                         "static_path": static_path}})
    topo = cfg.topology.build()
    trace = eval_trace(cfg, topo)
    pol = BaselinePolicy(Baseline.parse(policy, cfg.eval.static_path), topo, cfg.eval.trace_seed)
    res = run_eval(topo, cfg.env, [pol], trace)[pol.name]
    s = res.summary
    click.echo(f"{s.policy}: delay {s.mean_delay_ms:.3f} ms, mlu {s.mean_mlu:.3f} (max {s.max_mlu:.3f}),"
               f" acceptance {s.mean_acceptance:.4f}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        res.steps.to_csv(out, index=False)
        click.echo(f"✅ Steps written to {out}")


@main.command()
@config_option
@click.option("--samples", "samples_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Trace CSV (t, tunnel ids); default is the evaluation trace.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_guard
def solve(config_path, samples_path, out) -> None:
    """Per-sample optimal split and objective."""
    cfg = load_config(config_path, {})
    topo = cfg.topology.build()
    samples = load_trace(samples_path) if samples_path else eval_trace(cfg, topo)
    labels = [f"x_{p.tunnel_id}_{p.index}" for p in topo.paths]
    rows = []
    infeasible = 0
    for sample in samples:
        sol = solve_sample(NlpProblem.from_sample(topo, sample, cfg.solver.mu_target, cfg.env),
                           cfg.solver)
        row: Dict[str, Any] = {"t": sample.t, "feasible": sol.feasible, "objective_ms": sol.objective,
                               "mlu": sol.mlu, "violated_cut": sol.violated_cut or ""}
        x = sol.action.vector(topo) if sol.action is not None else np.full(topo.n_paths, np.nan)
        row.update(zip(labels, x.tolist()))
        rows.append(row)
        infeasible += int(sol.action is None)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out, index=False)
    if infeasible:
        click.echo(f"⚠️ {infeasible} infeasible sample(s)")
    click.echo(f"✅ Solved {len(rows)} sample(s) -> {out}")


@main.command(name="compare")
@click.argument("summaries", nargs=-1, required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_guard
def compare_cmd(summaries: Tuple[Path, ...], out: Optional[Path]) -> None:
    """Merge summary.csv files into one ranked table."""
    rows = []
    for path in summaries:
        rows.extend(summaries_from_frame(read_summary(path)))
    ranked = compare(rows)
    click.echo(render_table(ranked))
    if out is not None:
        write_summary(ranked, out)
        click.echo(f"✅ Ranked table written to {out}")


@main.command()
@config_option
@click.option("--n", "length", type=int, default=None)
@click.option("--start", type=int, default=None)
@seed_option
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_guard
def trace(config_path, length, start, seed, out) -> None:
    """Write the frozen evaluation trace as CSV."""
    cfg = load_config(config_path, {"eval": {"trace_length": length, "trace_start": start,
                                         "trace_seed": seed}})
    topo = cfg.topology.build()
    samples = eval_trace(cfg, topo)
    save_trace(samples, out)
    click.echo(f"✅ {len(samples)} samples -> {out}")


if __name__ == "__main__":
    main()
