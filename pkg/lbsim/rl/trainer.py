# lbsim/rl/trainer.py
"""
Training loop.

PPO collects in lockstep across environment workers (on-policy batches).
DDPG collects asynchronously: worker threads push experiences through a
queue into the learner's replay buffer and pick up published actor weights
between episodes. With a single worker both run inline and are fully
deterministic for a fixed seed.
"""
from __future__ import annotations

import copy
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field
from tqdm import tqdm

from ..core.flow_env import FlowEnv, StepReport
from ..core.safety import CbfShield
from ..errors import TrainingError
from ..net.topology import Topology
from ..utils import progress_enabled
from .ddpg import DdpgAgent, DdpgConfig, ddpg_update, noise_std
from .networks import HIDDEN
from .ppo import PpoAgent, PpoConfig, Rollout, ppo_update
from .replay import Experience

logger = logging.getLogger(__name__)

Agent = Union[PpoAgent, DdpgAgent]
EnvFactory = Callable[[int], FlowEnv]
ShieldFactory = Callable[[int], Optional[CbfShield]]


class AgentConfig(BaseModel):
    algo: Literal["ppo", "ddpg"] = "ppo"
    hidden: Tuple[int, ...] = HIDDEN
    ppo: PpoConfig = Field(default_factory=PpoConfig)
    ddpg: DdpgConfig = Field(default_factory=DdpgConfig)


class TrainSchedule(BaseModel):
    episodes: int = Field(default=5000, ge=0)
    update_period: int = Field(default=128, ge=1)    # environment steps between updates
    lr: float = Field(default=1e-5, gt=0)
    fine_tune_lr: float = Field(default=1e-6, gt=0)
    gamma: float = Field(default=0.7, ge=0, le=1)
    workers: int = Field(default=1, ge=1)
    seed: int = 0


@dataclass
class TrainResult:
    agent: Agent
    metrics: pd.DataFrame
    episodes: pd.DataFrame
    samples: int
    seconds: float
    shield: Dict[str, int] = field(default_factory=dict)
    clocks: List[int] = field(default_factory=list)   # traffic clock per worker at the end

    @property
    def samples_per_second(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else math.nan


def make_agent(topo: Topology, cfg: AgentConfig, schedule: TrainSchedule) -> Agent:
    if cfg.algo == "ppo":
        return PpoAgent(topo, cfg.hidden, schedule.lr, schedule.gamma, cfg.ppo, schedule.seed)
    return DdpgAgent(topo, cfg.hidden, schedule.lr, schedule.gamma, cfg.ddpg, schedule.seed)


def policy_name(algo: str, shielded: bool) -> str:
    return f"{algo}+cbf" if shielded else algo


def _execute(env: FlowEnv, shield: Optional[CbfShield], proto: np.ndarray
             ) -> Tuple[np.ndarray, bool, np.ndarray, float, bool, StepReport]:
    """Shield (if any) then step. Returns executed split and the step tuple."""
    executed, modified = proto, False
    if shield is not None:
        outcome = shield(env.current_sample, proto)
        executed = outcome.action.vector(env.topo)
        modified = outcome.was_modified
    next_obs, reward, done, report = env.step(executed)
    return executed, modified, next_obs, reward, done, report


def _row(policy: str, episode: int, step: int, worker: int, modified: bool,
         report: StepReport) -> Dict[str, Any]:
    rec = report.to_record()
    row = {"episode": episode, "step": step, "policy": policy, "worker": worker,
           "cbf_modified": int(modified)}
    row.update(rec)
    return row


def episode_table(metrics: pd.DataFrame) -> pd.DataFrame:
    """Per-episode aggregates of the step log."""
    if metrics.empty:
        return pd.DataFrame(columns=["episode", "policy", "total_reward", "mean_delay_ms",
                                     "mean_mlu", "min_acceptance", "cbf_interventions"])
    grouped = metrics.groupby(["episode", "policy"], sort=True)
    return grouped.agg(
        total_reward=("reward", "sum"),
        mean_delay_ms=("mean_delay_ms", "mean"),
        mean_mlu=("mlu", "mean"),
        min_acceptance=("acceptance_rate", "min"),
        cbf_interventions=("cbf_modified", "sum"),
    ).reset_index()


def _check_finite(stats: Dict[str, float], episode: int) -> None:
    bad = {k: v for k, v in stats.items() if isinstance(v, float) and not math.isfinite(v)}
    if bad:
        raise TrainingError(f"Non-finite training statistics at episode {episode}: {bad}")


# ---------------------------------------------------------------------------
# PPO: synchronous lockstep collection
# ---------------------------------------------------------------------------
def _train_ppo(agent: PpoAgent, envs: List[FlowEnv], shields: List[Optional[CbfShield]],
               schedule: TrainSchedule, policy: str, bar: tqdm) -> Tuple[List[Dict], int]:
    rows: List[Dict[str, Any]] = []
    n_workers = len(envs)
    length = envs[0].cfg.episode_length
    per_rollout = max(1, schedule.update_period // length)
    remaining = schedule.episodes
    samples = 0

    while remaining > 0:
        n_ep = min(per_rollout, math.ceil(remaining / n_workers))
        trajs = [{"obs": [], "latents": [], "log_probs": [], "rewards": [], "dones": []}
                 for _ in range(n_workers)]
        for _ in range(n_ep):
            episode_ids = [agent.episode + w for w in range(n_workers)]
            agent.episode += n_workers
            obs = np.stack([env.reset() for env in envs])
            for step in range(length):
                splits, latents, logps = agent.act(obs, explore=True)
                next_obs = np.empty_like(obs)
                for w, env in enumerate(envs):
                    executed, modified, nxt, reward, done, report = _execute(env, shields[w], splits[w])
                    z, logp = latents[w], logps[w]
                    if modified:
                        z, logp = agent.latent_for(obs[w:w + 1], executed[None, :])
                        z, logp = z[0], logp[0]
                    traj = trajs[w]
                    traj["obs"].append(obs[w])
                    traj["latents"].append(z.numpy())
                    traj["log_probs"].append(float(logp))
                    traj["rewards"].append(reward)
                    traj["dones"].append(done)
                    rows.append(_row(policy, episode_ids[w], step, w, modified, report))
                    next_obs[w] = nxt
                obs = next_obs
                samples += n_workers
            bar.update(n_workers)
        remaining -= n_ep * n_workers

        rollout = Rollout.from_trajectories(trajs, agent.gamma, agent.cfg.critic_target,
                                            agent.policy_version)
        stats = ppo_update(agent, rollout)
        _check_finite(stats, agent.episode)
        bar.set_postfix(kl=f"{stats['approx_kl']:.3f}", epochs=stats["epochs"])
    return rows, samples


# ---------------------------------------------------------------------------
# DDPG: asynchronous collection
# ---------------------------------------------------------------------------
def _ddpg_learn(agent: DdpgAgent, schedule: TrainSchedule) -> None:
    cfg = agent.cfg
    if len(agent.replay) < max(cfg.warmup, 1):
        return
    for _ in range(cfg.gradient_steps):
        stats = ddpg_update(agent, agent.replay.sample(cfg.batch_size), schedule.gamma)
        _check_finite(stats, agent.episode)


def _train_ddpg_inline(agent: DdpgAgent, env: FlowEnv, shield: Optional[CbfShield],
                       schedule: TrainSchedule, policy: str, bar: tqdm) -> Tuple[List[Dict], int]:
    rows: List[Dict[str, Any]] = []
    total_steps = max(schedule.episodes * env.cfg.episode_length, 1)
    samples = 0
    for _ in range(schedule.episodes):
        episode = agent.episode
        agent.episode += 1
        obs = env.reset()
        for step in range(env.cfg.episode_length):
            noise = noise_std(agent.cfg, samples / total_steps)
            proto = agent.act(obs[None, :], explore=True, noise=noise)[0]
            executed, modified, nxt, reward, done, report = _execute(env, shield, proto)
            agent.replay.add(Experience(obs, executed, reward, nxt, done))
            rows.append(_row(policy, episode, step, 0, modified, report))
            obs = nxt
            samples += 1
            if samples % schedule.update_period == 0:
                _ddpg_learn(agent, schedule)
        bar.update(1)
    return rows, samples


def _train_ddpg_async(agent: DdpgAgent, envs: List[FlowEnv], shields: List[Optional[CbfShield]],
                      schedule: TrainSchedule, policy: str, bar: tqdm) -> Tuple[List[Dict], int]:
    inbox: "queue.Queue[Tuple[str, Any]]" = queue.Queue(maxsize=4096)
    lock = threading.Lock()
    published = {"version": 0, "state": copy.deepcopy(agent.actor.state_dict())}
    counter = {"next": agent.episode, "end": agent.episode + schedule.episodes, "steps": 0}
    length = envs[0].cfg.episode_length
    total_steps = max(schedule.episodes * length, 1)

    def worker(w: int) -> None:
        try:
            actor = copy.deepcopy(agent.actor)
            gen = torch.Generator().manual_seed(schedule.seed + 1000 * (w + 1))
            version = -1
            env, shield = envs[w], shields[w]
            while True:
                with lock:
                    if counter["next"] >= counter["end"]:
                        break
                    episode = counter["next"]
                    counter["next"] += 1
                    if published["version"] != version:
                        actor.load_state_dict(published["state"])
                        version = published["version"]
                obs = env.reset()
                for step in range(length):
                    with lock:
                        progress = counter["steps"] / total_steps
                        counter["steps"] += 1
                    proto = agent.act(obs[None, :], True, noise_std(agent.cfg, progress),
                                      actor=actor, generator=gen)[0]
                    executed, modified, nxt, reward, done, report = _execute(env, shield, proto)
                    inbox.put(("step", (Experience(obs, executed, reward, nxt, done),
                                        _row(policy, episode, step, w, modified, report))))
                    obs = nxt
                inbox.put(("episode", episode))
        except Exception as exc:  # surfaced in the learner thread
            inbox.put(("error", exc))
        finally:
            inbox.put(("exit", w))

    threads = [threading.Thread(target=worker, args=(w,), daemon=True, name=f"lbsim-worker-{w}")
               for w in range(len(envs))]
    for t in threads:
        t.start()

    rows: List[Dict[str, Any]] = []
    samples, since_update, alive = 0, 0, len(threads)
    failure: Optional[BaseException] = None
    while alive:
        kind, payload = inbox.get()
        if failure is not None and kind != "exit":
            continue
        if kind == "step":
            exp, row = payload
            agent.replay.add(exp)
            rows.append(row)
            samples += 1
            since_update += 1
            if since_update >= schedule.update_period:
                since_update = 0
                _ddpg_learn(agent, schedule)
                with lock:
                    published["state"] = copy.deepcopy(agent.actor.state_dict())
                    published["version"] += 1
        elif kind == "episode":
            bar.update(1)
        elif kind == "error":
            failure = payload
            with lock:
                counter["end"] = counter["next"]
        else:
            alive -= 1
    for t in threads:
        t.join()
    if failure is not None:
        raise TrainingError(f"Collector worker failed: {failure}") from failure
    agent.episode = counter["end"]
    rows.sort(key=lambda r: (r["episode"], r["step"]))
    return rows, samples


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def train(agent: Agent, env_factory: EnvFactory, shield_factory: ShieldFactory,
          schedule: TrainSchedule, fine_tune: bool = False) -> TrainResult:
    """
    Run `schedule.episodes` episodes of collection and updates.

    env_factory(w) / shield_factory(w) build worker w's environment and
    shield (None disables the shield).
    """
    if fine_tune:
        agent.set_learning_rate(schedule.fine_tune_lr)
    envs = [env_factory(w) for w in range(schedule.workers)]
    shields = [shield_factory(w) for w in range(schedule.workers)]
    shielded = shields[0] is not None
    policy = policy_name(agent.algo, shielded)

    logger.info("Training %s for %d episodes with %d worker(s)%s", policy, schedule.episodes,
                schedule.workers, " (fine-tune)" if fine_tune else "")
    start = time.perf_counter()
    with tqdm(total=schedule.episodes, desc=policy, unit="ep",
              disable=not progress_enabled()) as bar:
        if schedule.episodes == 0:
            rows, samples = [], 0
        elif isinstance(agent, PpoAgent):
            rows, samples = _train_ppo(agent, envs, shields, schedule, policy, bar)
        elif schedule.workers == 1:
            rows, samples = _train_ddpg_inline(agent, envs[0], shields[0], schedule, policy, bar)
        else:
            rows, samples = _train_ddpg_async(agent, envs, shields, schedule, policy, bar)
    seconds = time.perf_counter() - start

    metrics = pd.DataFrame(rows)
    shield_stats: Dict[str, int] = {}
    for s in shields:
        if s is not None:
            for k, v in s.stats().items():
                shield_stats[k] = shield_stats.get(k, 0) + v
    clocks = [env.traffic.t if env.traffic is not None else 0 for env in envs]
    result = TrainResult(agent, metrics, episode_table(metrics), samples, seconds, shield_stats, clocks)
    logger.info("Finished %s: %d samples in %.1fs (%.1f samples/s)", policy, samples, seconds,
                result.samples_per_second)
    return result
