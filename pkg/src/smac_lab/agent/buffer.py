from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    cost: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.rew)


class ReplayBuffer:
    """Fixed-capacity ring of (x, u, r, r_c, x', done) transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.cost = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, act, rew: float, cost: float, next_obs, done: bool) -> None:
        i = self._next
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.cost[i] = cost
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sample without replacement; shrinks to the buffer size if needed."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.cost[idx],
                     self.next_obs[idx], self.done[idx])
