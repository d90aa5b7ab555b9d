"""Replay storage with uniform and dynamic frequency-based sampling (DFS).

Two integer counters run alongside the transitions: ``v`` counts how often
a transition was in a world-model batch, ``b`` how often it seeded
imagination. World-model windows are drawn from softmax(-v); imagination
windows from softmax(f(v, b)) with f = v - b - max(0, v - b), i.e. 0 where
v >= b and v - b < 0 otherwise. Windows are scored by the counter of their
start transition; every transition a window covers gets its counter bumped.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .world_model import TrajectoryBatch

_RECORD_FIELDS = ("action", "reward", "done", "is_first", "episode")


def stable_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def dfs_score(v: np.ndarray, b: np.ndarray) -> np.ndarray:
    """f(v, b) in exact integer arithmetic."""
    diff = np.asarray(v, dtype=np.int64) - np.asarray(b, dtype=np.int64)
    return diff - np.maximum(0, diff)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape: tuple, obs_dtype=np.uint8):
        self.capacity = int(capacity)
        self.obs_shape = tuple(obs_shape)
        self.obs = np.zeros((self.capacity, *self.obs_shape), dtype=obs_dtype)
        self.action = np.zeros(self.capacity, dtype=np.int64)
        self.reward = np.zeros(self.capacity, dtype=np.float32)
        self.done = np.zeros(self.capacity, dtype=np.uint8)
        self.is_first = np.zeros(self.capacity, dtype=np.uint8)
        self.episode = np.zeros(self.capacity, dtype=np.int64)
        self.v = np.zeros(self.capacity, dtype=np.int64)
        self.b = np.zeros(self.capacity, dtype=np.int64)
        self.size = 0
        self._persisted = 0

    def __len__(self) -> int:
        return self.size

    @property
    def counts_v(self) -> np.ndarray:
        return self.v[:self.size]

    @property
    def counts_b(self) -> np.ndarray:
        return self.b[:self.size]

    def append(self, obs, action: int, reward: float, done: bool, first: bool | None = None) -> int:
        """Store one (O, a, r, e) record; ``first`` defaults to "previous step was terminal"."""
        if self.size >= self.capacity:
            raise OverflowError(f"replay buffer full (capacity {self.capacity})")
        i = self.size
        if first is None:
            first = i == 0 or bool(self.done[i - 1])
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.done[i] = bool(done)
        self.is_first[i] = bool(first)
        self.episode[i] = (self.episode[i - 1] + int(bool(first))) if i else 0
        self.size += 1
        return i

    def transition(self, i: int) -> tuple:
        if not 0 <= i < self.size:
            raise IndexError(i)
        return (self.obs[i], int(self.action[i]), float(self.reward[i]), bool(self.done[i]))

    # -- sampling laws -------------------------------------------------------
    def valid_starts(self, length: int) -> int:
        n = self.size - length + 1
        if length < 1 or n < 1:
            raise ValueError(f"need at least {length} transitions, buffer holds {self.size}")
        return n

    def world_probs(self, length: int) -> np.ndarray:
        n = self.valid_starts(length)
        return stable_softmax(-self.v[:n])

    def imagination_probs(self, length: int) -> np.ndarray:
        n = self.valid_starts(length)
        return stable_softmax(dfs_score(self.v[:n], self.b[:n]))

    def uniform_probs(self, length: int) -> np.ndarray:
        n = self.valid_starts(length)
        return np.full(n, 1.0 / n)

    def _draw(self, probs: np.ndarray, batch: int, length: int, rng: np.random.Generator,
              counter: np.ndarray) -> tuple[TrajectoryBatch, np.ndarray]:
        starts = rng.choice(len(probs), size=batch, p=probs)
        idx = starts[:, None] + np.arange(length)[None, :]
        np.add.at(counter, idx.reshape(-1), 1)
        return self.gather(idx), starts

    def sample_world(self, batch: int, length: int, rng: np.random.Generator):
        return self._draw(self.world_probs(length), batch, length, rng, self.v)

    def sample_imagination(self, batch: int, length: int, rng: np.random.Generator):
        return self._draw(self.imagination_probs(length), batch, length, rng, self.b)

    def sample_uniform(self, batch: int, length: int, rng: np.random.Generator, counter: str = "v"):
        """Uniform ablation; still bumps the matching counter (v for world, b for imagination)."""
        if counter not in ("v", "b"):
            raise ValueError("counter must be 'v' or 'b'")
        return self._draw(self.uniform_probs(length), batch, length, rng, getattr(self, counter))

    def gather(self, idx: np.ndarray) -> TrajectoryBatch:
        obs = torch.from_numpy(self.obs[idx])
        dtype = torch.get_default_dtype()
        return TrajectoryBatch(
            obs=obs,
            actions=torch.from_numpy(self.action[idx]),
            rewards=torch.from_numpy(self.reward[idx]).to(dtype),
            dones=torch.from_numpy(self.done[idx]).to(dtype),
            is_first=torch.from_numpy(self.is_first[idx]).to(dtype),
        )

    # -- persistence ---------------------------------------------------------
    def _record_dtype(self) -> np.dtype:
        return np.dtype([("obs", self.obs.dtype, self.obs_shape), ("action", "<i8"),
                         ("reward", "<f4"), ("done", "u1"), ("is_first", "u1"), ("episode", "<i8")])

    def save(self, directory) -> None:
        """Append unsaved transitions to ``transitions.bin``; rewrite the counter sidecar."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"capacity": self.capacity, "obs_shape": list(self.obs_shape),
                "obs_dtype": self.obs.dtype.str}
        (d / "meta.json").write_text(json.dumps(meta))
        log = d / "transitions.bin"
        if self._persisted == 0 and log.exists():
            log.unlink()
        lo, hi = self._persisted, self.size
        rec = np.zeros(hi - lo, dtype=self._record_dtype())
        rec["obs"] = self.obs[lo:hi]
        for name in _RECORD_FIELDS:
            rec[name] = getattr(self, name)[lo:hi]
        with open(log, "ab") as fh:
            fh.write(rec.tobytes())
        self._persisted = hi
        np.savez(d / "counters.npz", v=self.v[:hi], b=self.b[:hi])

    @classmethod
    def load(cls, directory) -> "ReplayBuffer":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        buf = cls(meta["capacity"], tuple(meta["obs_shape"]), np.dtype(meta["obs_dtype"]))
        rec = np.fromfile(d / "transitions.bin", dtype=buf._record_dtype())
        n = len(rec)
        buf.obs[:n] = rec["obs"]
        for name in _RECORD_FIELDS:
            getattr(buf, name)[:n] = rec[name]
        counters = np.load(d / "counters.npz")
        buf.v[:n] = counters["v"]
        buf.b[:n] = counters["b"]
        buf.size = buf._persisted = n
        return buf
