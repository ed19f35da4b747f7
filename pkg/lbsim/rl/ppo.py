# lbsim/rl/ppo.py
"""
PPO with a squashed Gaussian policy over per-tunnel logits.

The policy samples latent logits z ~ N(mu(s), diag(exp(log_std))^2) and
executes the per-tunnel softmax of z. When the safety shield replaces the
action, the stored latent is the log-ratio form of the executed split, so
updates always score what actually ran.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch import nn

from ..errors import TrainingError
from ..net.topology import Topology
from .checkpoint import (Checkpoint, check_compatible, generator_state, load_module, load_optimizer,
                         module_to_json, optimizer_to_json, set_generator_state)
from .networks import DTYPE, HIDDEN, Mlp, as_tensor, centered_logits, forward, tunnel_softmax

logger = logging.getLogger(__name__)


class PpoConfig(BaseModel):
    clip: float = Field(default=0.2, gt=0)
    target_kl: float = Field(default=0.05, gt=0)
    n_epochs: int = Field(default=10, ge=1)
    minibatch_size: int = Field(default=64, ge=1)
    max_grad_norm: float = Field(default=0.5, gt=0)
    critic_target: Literal["immediate", "return"] = "return"
    init_log_std: float = -1.0
    value_coef: float = 0.5
    normalize_advantages: bool = True


class GaussianPolicy(nn.Module):
    """Mean logits from an Mlp plus a state-independent log std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int], init_log_std: float,
                 generator: torch.Generator):
        super().__init__()
        self.mean_net = Mlp(obs_dim, act_dim, hidden, output_scale=0.01, generator=generator)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std), dtype=DTYPE))

    def distribution(self, obs: torch.Tensor) -> torch.distributions.Normal:
        mean = forward(self.mean_net, obs)
        return torch.distributions.Normal(mean, self.log_std.exp().expand_as(mean))


def clipped_surrogate(ratio: torch.Tensor, advantage: torch.Tensor, clip: float) -> torch.Tensor:
    """Elementwise min(r * A, clip(r, 1-eps, 1+eps) * A)."""
    return torch.minimum(ratio * advantage, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantage)


def discounted_returns(rewards: Sequence[float], dones: Sequence[bool], gamma: float) -> np.ndarray:
    """Return-to-go inside each episode; resets after every done flag."""
    out = np.zeros(len(rewards))
    running = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if dones[i]:
            running = 0.0
        running = rewards[i] + gamma * running
        out[i] = running
    return out


@dataclass
class Rollout:
    """On-policy batch tagged with the policy version that produced it."""
    obs: np.ndarray           # (N, K)
    latents: np.ndarray       # (N, P)
    log_probs: np.ndarray     # (N,)
    targets: np.ndarray       # (N,) critic regression targets
    policy_version: int

    def __len__(self) -> int:
        return len(self.targets)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Dict[str, list]], gamma: float,
                          critic_target: str, policy_version: int) -> "Rollout":
        obs, lat, logp, targets = [], [], [], []
        for traj in trajectories:
            if not traj["rewards"]:
                continue
            rewards = np.asarray(traj["rewards"], dtype=np.float64)
            if critic_target == "return":
                tgt = discounted_returns(rewards, traj["dones"], gamma)
            else:
                tgt = rewards
            obs.append(np.asarray(traj["obs"]))
            lat.append(np.asarray(traj["latents"]))
            logp.append(np.asarray(traj["log_probs"]))
            targets.append(tgt)
        if not obs:
            raise TrainingError("Rollout is empty")
        return cls(np.concatenate(obs), np.concatenate(lat), np.concatenate(logp),
                   np.concatenate(targets), policy_version)


class PpoAgent:
    algo = "ppo"

    def __init__(self, topo: Topology, hidden: Sequence[int] = HIDDEN, lr: float = 1e-5,
                 gamma: float = 0.7, cfg: Optional[PpoConfig] = None, seed: int = 0):
        self.cfg = cfg or PpoConfig()
        self.obs_dim = topo.n_tunnels
        self.act_dim = topo.n_paths
        self.tunnel_ids = list(topo.tunnel_ids)
        self.offsets = [int(o) for o in topo.offsets]
        self.hidden = tuple(hidden)
        self.gamma = gamma
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)
        self.policy = GaussianPolicy(self.obs_dim, self.act_dim, hidden, self.cfg.init_log_std,
                                     self.generator)
        self.critic = Mlp(self.obs_dim, 1, hidden, output_scale=1.0, generator=self.generator)
        self.optimizer = torch.optim.Adam(
            list(self.policy.parameters()) + list(self.critic.parameters()), lr=lr)
        self.policy_version = 0
        self.episode = 0

    def set_learning_rate(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    # ---- acting ------------------------------------------------------------
    @torch.no_grad()
    def act(self, obs: np.ndarray, explore: bool = True
            ) -> Tuple[np.ndarray, torch.Tensor, torch.Tensor]:
        """Batched (W, K) observations -> (splits, latents, log probs)."""
        dist = self.policy.distribution(as_tensor(obs))
        if explore:
            eps = torch.randn(dist.mean.shape, generator=self.generator, dtype=DTYPE)
            z = dist.mean + dist.stddev * eps
        else:
            z = dist.mean
        logp = dist.log_prob(z).sum(dim=-1)
        return tunnel_softmax(z, self.offsets).numpy(), z, logp

    @torch.no_grad()
    def latent_for(self, obs: np.ndarray, split: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
        """Latent and log prob for an executed split that the policy did not sample."""
        dist = self.policy.distribution(as_tensor(obs))
        z = centered_logits(as_tensor(split), self.offsets, dist.mean)
        return z, dist.log_prob(z).sum(dim=-1)

    def policy_action(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic split for one observation."""
        split, _, _ = self.act(np.asarray(obs)[None, :], explore=False)
        return split[0]

    @torch.no_grad()
    def value(self, obs: np.ndarray) -> np.ndarray:
        return forward(self.critic, obs).squeeze(-1).numpy()

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
            networks={"policy": module_to_json(self.policy), "critic": module_to_json(self.critic)},
            optimizers={"adam": optimizer_to_json(self.optimizer)},
            rng={"torch": generator_state(self.generator)},
        )

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        check_compatible(ckpt, self.algo, self.tunnel_ids)
        load_module(self.policy, ckpt.networks["policy"], "policy")
        load_module(self.critic, ckpt.networks["critic"], "critic")
        load_optimizer(self.optimizer, ckpt.optimizers["adam"])
        if "torch" in ckpt.rng:
            set_generator_state(self.generator, ckpt.rng["torch"])
        self.episode = ckpt.episode
        self.policy_version = int(ckpt.meta.get("policy_version", 0))


def ppo_update(agent: PpoAgent, rollout: Rollout) -> Dict[str, float]:
    """Clipped-surrogate update; stops the epoch loop once KL exceeds target."""
    if rollout.policy_version != agent.policy_version:
        raise TrainingError(
            f"Rollout from policy version {rollout.policy_version} used with version {agent.policy_version}")
    cfg = agent.cfg
    obs = as_tensor(rollout.obs)
    latents = as_tensor(rollout.latents)
    old_logp = as_tensor(rollout.log_probs)
    targets = as_tensor(rollout.targets)
    with torch.no_grad():
        advantages = targets - forward(agent.critic, obs).squeeze(-1)
        if cfg.normalize_advantages and len(advantages) > 1:
            advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    params = list(agent.policy.parameters()) + list(agent.critic.parameters())
    n = len(rollout)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "approx_kl": 0.0, "epochs": 0, "clip_frac": 0.0}
    stop = False
    for epoch in range(cfg.n_epochs):
        perm = torch.randperm(n, generator=agent.generator)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            dist = agent.policy.distribution(obs[idx])
            logp = dist.log_prob(latents[idx]).sum(dim=-1)
            log_ratio = logp - old_logp[idx]
            ratio = log_ratio.exp()

            with torch.no_grad():
                approx_kl = float(((ratio - 1.0) - log_ratio).mean())
            if approx_kl > cfg.target_kl:
                stop = True
                stats["approx_kl"] = approx_kl
                break

            policy_loss = -clipped_surrogate(ratio, advantages[idx], cfg.clip).mean()
            value_loss = (forward(agent.critic, obs[idx]).squeeze(-1) - targets[idx]).pow(2).mean()
            loss = policy_loss + cfg.value_coef * value_loss
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"Non-finite PPO loss at episode {agent.episode}: "
                    f"policy={float(policy_loss)} value={float(value_loss)}")

            agent.optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            agent.optimizer.step()

            stats["policy_loss"] = float(policy_loss)
            stats["value_loss"] = float(value_loss)
            stats["approx_kl"] = approx_kl
            stats["clip_frac"] = float(((ratio - 1.0).abs() > cfg.clip).double().mean())
        stats["epochs"] = epoch + 1
        if stop:
            logger.debug("PPO early stop at epoch %d (KL %.4f)", epoch, stats["approx_kl"])
            break

    agent.policy_version += 1
    return stats
