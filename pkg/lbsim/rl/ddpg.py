# lbsim/rl/ddpg.py
"""
DDPG over per-tunnel split actions.

The actor emits logits squashed by the tunnel softmax; exploration adds
Gaussian noise to the logits, with a standard deviation annealed over
training. The critic scores (observation, executed split) pairs.
"""
from __future__ import annotations

import copy
import logging
from typing import Dict, Literal, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch import nn

from ..errors import TrainingError
from ..net.topology import Topology
from .checkpoint import (Checkpoint, check_compatible, generator_state, load_module,
                         load_optimizer, module_to_json, optimizer_to_json, set_generator_state)
from .networks import DTYPE, HIDDEN, Mlp, as_tensor, forward, tunnel_softmax
from .replay import ReplayBuffer

logger = logging.getLogger(__name__)


class DdpgConfig(BaseModel):
    tau: float = Field(default=0.05, gt=0, le=1)
    buffer_size: int = Field(default=100_000, ge=1)
    warmup: int = Field(default=1000, ge=0)
    noise_start: float = Field(default=0.2, ge=0)
    noise_end: float = Field(default=0.05, ge=0)
    batch_size: int = Field(default=64, ge=1)
    gradient_steps: int = Field(default=32, ge=1)      # per update period
    bootstrap_actor: Literal["target", "main"] = "target"
    keep_replay: bool = True                           # embed buffer in checkpoints


def noise_std(cfg: DdpgConfig, progress: float) -> float:
    """Linear anneal from noise_start to noise_end over progress in [0, 1]."""
    progress = min(max(progress, 0.0), 1.0)
    return cfg.noise_start + (cfg.noise_end - cfg.noise_start) * progress


def soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target."""
    with torch.no_grad():
        for t, s in zip(target.parameters(), source.parameters()):
            t.mul_(1.0 - tau).add_(s, alpha=tau)


class DdpgAgent:
    algo = "ddpg"

    def __init__(self, topo: Topology, hidden: Sequence[int] = HIDDEN, lr: float = 1e-5,
                 gamma: float = 0.7, cfg: Optional[DdpgConfig] = None, seed: int = 0):
        self.cfg = cfg or DdpgConfig()
        self.obs_dim = topo.n_tunnels
        self.act_dim = topo.n_paths
        self.tunnel_ids = list(topo.tunnel_ids)
        self.offsets = [int(o) for o in topo.offsets]
        self.hidden = tuple(hidden)
        self.gamma = gamma
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)
        self.actor = Mlp(self.obs_dim, self.act_dim, hidden, output_scale=0.01, generator=self.generator)
        self.critic = Mlp(self.obs_dim + self.act_dim, 1, hidden, generator=self.generator)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic_target = copy.deepcopy(self.critic)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=lr)
        self.replay = ReplayBuffer(self.cfg.buffer_size, self.obs_dim, self.act_dim, seed)
        self.policy_version = 0
        self.episode = 0

    def set_learning_rate(self, lr: float) -> None:
        for opt in (self.actor_opt, self.critic_opt):
            for group in opt.param_groups:
                group["lr"] = lr

    def split(self, net: Mlp, obs: torch.Tensor) -> torch.Tensor:
        return tunnel_softmax(forward(net, obs), self.offsets)

    def q_value(self, net: Mlp, obs: torch.Tensor, split: torch.Tensor) -> torch.Tensor:
        return forward(net, torch.cat([obs, split], dim=-1)).squeeze(-1)

    @torch.no_grad()
    def act(self, obs: np.ndarray, explore: bool = True, noise: float = 0.0,
            actor: Optional[Mlp] = None, generator: Optional[torch.Generator] = None) -> np.ndarray:
        """Batched (W, K) observations -> splits. `actor` overrides the learner's net."""
        logits = forward(actor or self.actor, as_tensor(obs))
        if explore and noise > 0:
            eps = torch.randn(logits.shape, generator=generator or self.generator, dtype=DTYPE)
            logits = logits + noise * eps
        return tunnel_softmax(logits, self.offsets).numpy()

    def policy_action(self, obs: np.ndarray) -> np.ndarray:
        return self.act(np.asarray(obs)[None, :], explore=False)[0]

    # ---- checkpoints -------------------------------------------------------
    def to_checkpoint(self, meta: Optional[Dict] = None) -> Checkpoint:
        return Checkpoint(
            algo=self.algo,
            meta={
                "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "tunnel_ids": self.tunnel_ids, "hidden": list(self.hidden),
                "episode": self.episode, "policy_version": self.policy_version,
                "gamma": self.gamma, "seed": self.seed,
                **(meta or {}),
            },
            networks={
                "actor": module_to_json(self.actor),
                "critic": module_to_json(self.critic),
                "actor_target": module_to_json(self.actor_target),
                "critic_target": module_to_json(self.critic_target),
            },
            optimizers={"actor": optimizer_to_json(self.actor_opt),
                        "critic": optimizer_to_json(self.critic_opt)},
            rng={"torch": generator_state(self.generator),
                 "replay": self.replay.rng.bit_generator.state},
            replay=self.replay.state_dict() if self.cfg.keep_replay else None,
        )

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        check_compatible(ckpt, self.algo, self.tunnel_ids)
        for name in ("actor", "critic", "actor_target", "critic_target"):
            load_module(getattr(self, name), ckpt.networks[name], name)
        load_optimizer(self.actor_opt, ckpt.optimizers["actor"])
        load_optimizer(self.critic_opt, ckpt.optimizers["critic"])
        if "torch" in ckpt.rng:
            set_generator_state(self.generator, ckpt.rng["torch"])
        if "replay" in ckpt.rng:
            self.replay.rng.bit_generator.state = ckpt.rng["replay"]
        if ckpt.replay is not None:
            self.replay.load_state_dict(ckpt.replay)
        self.episode = ckpt.episode
        self.policy_version = int(ckpt.meta.get("policy_version", 0))


def td_targets(agent: DdpgAgent, rewards: torch.Tensor, next_obs: torch.Tensor,
               dones: torch.Tensor, gamma: float) -> torch.Tensor:
    """r + gamma * (1 - done) * Q_target(s', pi(s'))."""
    with torch.no_grad():
        actor = agent.actor_target if agent.cfg.bootstrap_actor == "target" else agent.actor
        nxt = agent.q_value(agent.critic_target, next_obs, agent.split(actor, next_obs))
        return rewards + gamma * (1.0 - dones) * nxt


def ddpg_update(agent: DdpgAgent, batch: Dict[str, np.ndarray], gamma: Optional[float] = None
                ) -> Dict[str, float]:
    """One critic step, one actor step, then Polyak-average both targets."""
    gamma = agent.gamma if gamma is None else gamma
    obs = as_tensor(batch["obs"])
    actions = as_tensor(batch["actions"])
    rewards = as_tensor(batch["rewards"])
    next_obs = as_tensor(batch["next_obs"])
    dones = as_tensor(batch["dones"])

    target = td_targets(agent, rewards, next_obs, dones, gamma)
    critic_loss = (agent.q_value(agent.critic, obs, actions) - target).pow(2).mean()
    if not torch.isfinite(critic_loss):
        raise TrainingError(f"Non-finite DDPG critic loss at episode {agent.episode}: {float(critic_loss)}")
    agent.critic_opt.zero_grad()
    critic_loss.backward()
    agent.critic_opt.step()

    actor_loss = -agent.q_value(agent.critic, obs, agent.split(agent.actor, obs)).mean()
    if not torch.isfinite(actor_loss):
        raise TrainingError(f"Non-finite DDPG actor loss at episode {agent.episode}: {float(actor_loss)}")
    agent.actor_opt.zero_grad()
    actor_loss.backward()
    agent.actor_opt.step()

    soft_update(agent.actor_target, agent.actor, agent.cfg.tau)
    soft_update(agent.critic_target, agent.critic, agent.cfg.tau)
    agent.policy_version += 1
    return {"critic_loss": float(critic_loss), "actor_loss": float(actor_loss)}
