"""Expert demonstration buffer, online ring buffer and mixture sampling."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .envs import Trajectory, Transition, load_demos, save_demos


class EmptyBufferError(ValueError):
    pass


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    e: np.ndarray


class MixedBatch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    e: np.ndarray
    from_online: np.ndarray  # bool per row


def _check_batch_size(batch_size: int) -> None:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")


class DemoBuffer:
    """Flat storage of expert transitions, indexed by trajectory."""

    def __init__(self, trajectories: list[Trajectory]):
        transitions = [tr for traj in trajectories for tr in traj.transitions]
        if not transitions:
            raise EmptyBufferError("demonstration buffer needs at least one transition")
        self.s = np.stack([tr.s for tr in transitions])
        self.a = np.stack([tr.a for tr in transitions])
        self.s_next = np.stack([tr.s_next for tr in transitions])
        self.e = np.asarray([tr.e for tr in transitions], dtype=np.float64)
        self.traj_index = np.concatenate(
            [np.full(len(traj), traj.traj_id, dtype=np.int64) for traj in trajectories]
        )
        self.n_trajectories = len(trajectories)
        if self.s.shape != self.s_next.shape:
            raise ValueError("inconsistent state dimensions in demonstrations")

    @classmethod
    def from_file(cls, path) -> DemoBuffer:
        return cls(load_demos(path))

    def to_file(self, path) -> None:
        trajs = {}
        for i, tid in enumerate(self.traj_index):
            trajs.setdefault(int(tid), Trajectory(int(tid))).transitions.append(
                Transition(self.s[i], self.a[i], self.s_next[i], int(self.e[i]))
            )
        save_demos(path, list(trajs.values()))

    def __len__(self) -> int:
        return len(self.s)

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def sample_transitions(self, batch_size: int, rng) -> Batch:
        """Uniform draws with replacement over all stored transitions."""
        _check_batch_size(batch_size)
        idx = rng.integers(0, len(self), size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.s_next[idx], self.e[idx])

    def sample_initial_states(self, batch_size: int, rng) -> np.ndarray:
        """Uniform draws over every stored ``s``: each suffix of a demonstration
        counts as its own episode, so each of its states is a valid start."""
        _check_batch_size(batch_size)
        return self.s[rng.integers(0, len(self), size=batch_size)]


class OnlineBuffer:
    """FIFO ring buffer of policy-generated transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.s_next = np.zeros((capacity, state_dim))
        self.e = np.zeros(capacity)
        self.inserted = 0
        self.reads = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, s, a, s_next, e) -> None:
        i = self.inserted % self.capacity
        self.s[i], self.a[i], self.s_next[i], self.e[i] = s, a, s_next, e
        self.inserted += 1

    def sample_transitions(self, batch_size: int, rng) -> Batch:
        _check_batch_size(batch_size)
        if len(self) == 0:
            raise EmptyBufferError("online buffer is empty")
        self.reads += 1
        idx = rng.integers(0, len(self), size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.s_next[idx], self.e[idx])


def mix_sample(demo: DemoBuffer, online: OnlineBuffer | None, alpha: float, batch_size: int, rng) -> MixedBatch:
    """Each row comes from ``online`` with probability ``alpha``, else from ``demo``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_batch_size(batch_size)
    if alpha > 0 and (online is None or len(online) == 0):
        raise EmptyBufferError("alpha > 0 requires a non-empty online buffer")
    from_online = rng.random(batch_size) < alpha
    out = demo.sample_transitions(batch_size, rng)
    n_online = int(from_online.sum())
    if n_online == 0:
        return MixedBatch(*out, from_online)
    fill = online.sample_transitions(n_online, rng)
    fields = []
    for base, extra in zip(out, fill):
        base = base.copy()
        base[from_online] = extra
        fields.append(base)
    return MixedBatch(*fields, from_online)
