"""FIFO replay buffer over fixed-width transition arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..policy import ObservationBatch

DEFAULT_CAPACITY = 100_000
DEFAULT_MIN_FILL = 2_000


@dataclass
class TransitionBatch:
    """Column-oriented batch of transitions (histories padded with -1)."""

    features: np.ndarray       # (B, F) int
    history: np.ndarray        # (B, H) int
    hyper: np.ndarray          # (B, d) stored latent-action sample
    action: np.ndarray         # (B, k) item ids
    feedback: np.ndarray       # (B, k) 0/1
    reward: np.ndarray         # (B,)
    next_history: np.ndarray   # (B, H) int
    done: np.ndarray           # (B,) 0/1

    def __len__(self) -> int:
        return self.features.shape[0]

    def observations(self) -> ObservationBatch:
        return ObservationBatch(self.features, self.history)

    def next_observations(self) -> ObservationBatch:
        return ObservationBatch(self.features, self.next_history)


class ReplayBuffer:
    """Uniform-sampling ring buffer with a minimum-fill threshold.

    Push is always allowed and evicts strictly FIFO at capacity; sampling is
    uniform with replacement and is an error until the fill threshold is
    reached.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY,
                 min_fill: int = DEFAULT_MIN_FILL, *,
                 feature_dim: int, history_len: int, slate_size: int,
                 latent_dim: int, dtype=np.float64):
        if capacity < 1 or min_fill < 1:
            raise ValueError("capacity and min_fill must be positive")
        self.capacity = capacity
        self.min_fill = min_fill
        self.size = 0
        self._next = 0
        self.features = np.zeros((capacity, feature_dim), dtype=np.int64)
        self.history = np.full((capacity, history_len), -1, dtype=np.int64)
        self.hyper = np.zeros((capacity, latent_dim), dtype=dtype)
        self.action = np.zeros((capacity, slate_size), dtype=np.int64)
        self.feedback = np.zeros((capacity, slate_size), dtype=dtype)
        self.reward = np.zeros(capacity, dtype=dtype)
        self.next_history = np.full((capacity, history_len), -1, dtype=np.int64)
        self.done = np.zeros(capacity, dtype=dtype)

    def __len__(self) -> int:
        return self.size

    @property
    def ready(self) -> bool:
        return self.size >= self.min_fill

    def push(self, *, features, history, hyper, action, feedback, reward,
             next_history, done) -> None:
        i = self._next
        self.features[i] = features
        self.history[i] = history
        self.hyper[i] = hyper
        self.action[i] = action
        self.feedback[i] = feedback
        self.reward[i] = reward
        self.next_history[i] = next_history
        self.done[i] = float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, seed: int | None = None,
               rng: np.random.Generator | None = None) -> TransitionBatch:
        if not self.ready:
            raise ValueError(
                f"buffer has {self.size} transitions; sampling requires at "
                f"least {self.min_fill}")
        if rng is None:
            rng = np.random.default_rng(seed)
        idx = rng.integers(0, self.size, size=batch_size)
        return TransitionBatch(
            features=self.features[idx].copy(),
            history=self.history[idx].copy(),
            hyper=self.hyper[idx].copy(),
            action=self.action[idx].copy(),
            feedback=self.feedback[idx].copy(),
            reward=self.reward[idx].copy(),
            next_history=self.next_history[idx].copy(),
            done=self.done[idx].copy(),
        )
