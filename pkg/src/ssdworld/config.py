"""Run configuration: plain-text ``key = value`` files with ``#`` comments."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .behavior import BehaviorConfig
from .world_model import WorldModelConfig


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "chunked"            # recurrent | chunked | quadratic | gru
    threads: int = 1

    # world model (reference-scale defaults)
    wm_lr: float = 4e-5
    weight_decay: float = 1e-4
    dropout: float = 0.1
    layers: int = 2
    state_dim: int = 16
    d_model: int = 128
    head_dim: int = 32
    chunk_size: int = 16
    categories: int = 16
    classes: int = 16
    codec_hidden: int = 256
    action_embed: int = 32
    head_hidden: int = 256
    reward_bins: int = 41
    free_nats: float = 1.0
    rep_scale: float = 0.1
    unimix: float = 0.01
    wm_clip: float = 100.0

    # behaviour policy
    gamma: float = 0.985
    lam: float = 0.95
    entropy: float = 3e-4
    ac_clip: float = 100.0
    actor_hidden: int = 256
    critic_hidden: int = 512
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    l_img: int = 8
    b_img: int = 64
    horizon: int = 16

    # replay / agent loop
    sampler: str = "dfs"             # dfs | uniform
    capacity: int = 100_000
    batch_size: int = 16
    seq_len: int = 64
    env_size: int = 5
    max_episode_steps: int = 4
    env_steps: int = 3000
    prefill: int = 200
    ac_warmup: int = 0               # world-model updates before behaviour learning starts
    train_every: int = 1
    eval_every: int = 500
    eval_episodes: int = 100
    baseline_episodes: int = 2000
    checkpoint_every: int = 1000
    time_budget_s: float = 1800.0

    # grid-world token benchmark
    grid_size: int = 5
    grid_frames: int = 8
    grid_batch: int = 16
    grid_steps: int = 4000
    grid_lr: float = 1e-3
    grid_eval_every: int = 500
    grid_eval_sequences: int = 64

    # scaling benchmark
    bench_lengths: str = "208,416,832,1664"
    bench_modes: str = "recurrent,chunked,quadratic,gru"
    bench_batch: int = 1
    bench_warmup: int = 3
    bench_repeats: int = 20

    def __post_init__(self):
        if self.mode not in ("recurrent", "chunked", "quadratic", "gru"):
            raise ValueError(f"mode must be recurrent|chunked|quadratic|gru, got {self.mode!r}")
        if self.sampler not in ("dfs", "uniform"):
            raise ValueError(f"sampler must be dfs|uniform, got {self.sampler!r}")
        if self.d_model % self.head_dim:
            raise ValueError("d_model must be divisible by head_dim")
        if self.l_img < 1 or self.horizon < 0:
            raise ValueError("l_img must be >= 1 and horizon >= 0")

    # -- derived ---------------------------------------------------------
    def world_model(self, obs_shape=(5, 5, 3), n_actions: int = 4) -> WorldModelConfig:
        return WorldModelConfig(
            obs_shape=tuple(obs_shape), n_actions=n_actions, categories=self.categories,
            classes=self.classes, codec_hidden=self.codec_hidden, d_model=self.d_model,
            head_dim=self.head_dim, state_dim=self.state_dim, chunk_size=self.chunk_size,
            layers=self.layers, dropout=self.dropout,
            backbone="gru" if self.mode == "gru" else "ssd", action_embed=self.action_embed,
            head_hidden=self.head_hidden, reward_bins=self.reward_bins, free_nats=self.free_nats,
            rep_scale=self.rep_scale, unimix=self.unimix)

    def behavior(self) -> BehaviorConfig:
        return BehaviorConfig(self.gamma, self.lam, self.entropy, self.ac_clip, self.actor_lr,
                              self.critic_lr, self.actor_hidden, self.critic_hidden)

    @property
    def ssd_mode(self) -> str:
        """Kernel mode for SSD backbones (GRU ignores it)."""
        return "chunked" if self.mode == "gru" else self.mode

    # -- serialisation ---------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], val)
        return dataclasses.replace(base or cls(), **values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _coerce(type_name, val: str):
    kind = type_name if isinstance(type_name, str) else type_name.__name__
    if kind == "int":
        return int(float(val)) if "e" in val.lower() else int(val.replace("_", ""))
    if kind == "float":
        return float(val)
    if kind == "bool":
        return val.lower() in ("1", "true", "yes", "on")
    return val
