# lbsim/rl/replay.py
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np


@dataclass(frozen=True)
class Experience:
    obs: np.ndarray
    action: np.ndarray        # executed (post-shield) split
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """
    Fixed-capacity ring buffer with uniform sampling.
    add/sample hold a lock so collector threads can push while the learner reads.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"Replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.size = 0
        self.pos = 0
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def add(self, exp: Experience) -> None:
        with self._lock:
            i = self.pos
            self.obs[i] = exp.obs
            self.actions[i] = exp.action
            self.rewards[i] = exp.reward
            self.next_obs[i] = exp.next_obs
            self.dones[i] = float(exp.done)
            self.pos = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Dict[str, np.ndarray]:
        with self._lock:
            if self.size == 0:
                raise ValueError("Cannot sample from an empty replay buffer")
            idx = self.rng.integers(0, self.size, size=batch_size)
            return {
                "obs": self.obs[idx].copy(),
                "actions": self.actions[idx].copy(),
                "rewards": self.rewards[idx].copy(),
                "next_obs": self.next_obs[idx].copy(),
                "dones": self.dones[idx].copy(),
            }

    # ---- checkpoint support ---------------------------------------------
    def state_dict(self) -> Dict[str, Any]:
        with self._lock:
            n = self.size
            # oldest first
            order = np.arange(self.pos - n, self.pos) % self.capacity
            return {
                "capacity": self.capacity,
                "obs": self.obs[order].tolist(),
                "actions": self.actions[order].tolist(),
                "rewards": self.rewards[order].tolist(),
                "next_obs": self.next_obs[order].tolist(),
                "dones": self.dones[order].tolist(),
            }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        rows = len(state["rewards"])
        with self._lock:
            keep = min(rows, self.capacity)
            start = rows - keep
            if keep:
                self.obs[:keep] = np.asarray(state["obs"])[start:]
                self.actions[:keep] = np.asarray(state["actions"])[start:]
                self.rewards[:keep] = np.asarray(state["rewards"])[start:]
                self.next_obs[:keep] = np.asarray(state["next_obs"])[start:]
                self.dones[:keep] = np.asarray(state["dones"])[start:]
            self.size = keep
            self.pos = keep % self.capacity
