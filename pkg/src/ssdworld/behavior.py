"""Behaviour learning inside the world model.

A context window of real transitions warms the sequence state; from the
last real frame the policy and the world model then roll out ``h`` steps
autoregressively. The rollout never stops at predicted episode ends; the
predicted continue probability discounts the returns instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import tensor_grad as tg
from .ssd import RMSNorm
from .world_model import TrajectoryBatch, WorldModel


class Mlp(nn.Module):
    """Linear -> RMSNorm -> SiLU, ``layers`` times, then a linear output."""

    def __init__(self, d_in: int, hidden: int, d_out: int, layers: int = 2):
        super().__init__()
        mods, width = [], d_in
        for _ in range(layers):
            mods += [nn.Linear(width, hidden), RMSNorm(hidden), nn.SiLU()]
            width = hidden
        self.body = nn.Sequential(*mods)
        self.out = nn.Linear(width, d_out)

    def forward(self, x):
        return self.out(self.body(x))


class Actor(Mlp):
    def __init__(self, state_dim: int, n_actions: int, hidden: int = 256, layers: int = 2):
        super().__init__(state_dim, hidden, n_actions, layers)

    def act(self, state, greedy: bool = False, generator=None):
        logits = self(state)
        if greedy:
            return torch.argmax(logits, -1)
        return torch.multinomial(tg.softmax(logits), 1, generator=generator)[:, 0]


class Critic(Mlp):
    def __init__(self, state_dim: int, hidden: int = 512, layers: int = 2):
        super().__init__(state_dim, hidden, 1, layers)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return super().forward(x)[..., 0]


@dataclass
class ImaginedRollout:
    states: torch.Tensor      # (b, h+1, K*C + d) policy states
    latents: torch.Tensor     # (b, h+1, K, C) codes fed to the sequence model
    firsts: torch.Tensor      # (b, h+1) reset flags fed with them
    actions: torch.Tensor     # (b, h)
    rewards: torch.Tensor     # (b, h)
    continues: torch.Tensor   # (b, h)
    d: torch.Tensor           # (b, h, d) sequence outputs produced during the rollout

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]


def policy_state(z: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """concat(flattened code, deterministic state)."""
    return torch.cat([z.flatten(-2), d], -1)


@torch.no_grad()
def imagine(world_model: WorldModel, actor: Actor, contexts: TrajectoryBatch, horizon: int,
            mode: str = "chunked", greedy: bool = False, generator=None) -> ImaginedRollout:
    """Warm up on the first l_img - 1 real steps, then roll out ``horizon`` steps."""
    wm = world_model
    was_training = wm.training
    wm.eval()
    b, l = contexts.shape
    post = wm.codec.encode(contexts.obs, greedy=greedy, generator=generator).z
    state = wm.initial_state(b)
    d_prev = torch.zeros(b, wm.cfg.d_model, dtype=post.dtype)
    if l > 1:
        x = wm.token(post[:, :-1], contexts.actions[:, :-1], contexts.is_first[:, :-1])
        warm_mode = "chunked" if mode == "quadratic" else mode
        d_seq, state = wm.backbone(x, warm_mode, state)
        d_prev = d_seq[:, -1]
    z = post[:, -1]
    first = contexts.is_first[:, -1].to(post.dtype)

    states, latents, firsts = [policy_state(z, d_prev)], [z], [first]
    actions, rewards, conts, ds = [], [], [], []
    for _ in range(horizon):
        a = actor.act(states[-1], greedy, generator)
        d, state = wm.step(z, a, first, state)
        z, r, c = wm.predict(d, greedy, generator)
        first = (c < 0.5).to(z.dtype)
        actions.append(a)
        rewards.append(r)
        conts.append(c)
        ds.append(d)
        states.append(policy_state(z, d))
        latents.append(z)
        firsts.append(first)
    wm.train(was_training)

    def stack(xs, shape):
        return torch.stack(xs, 1) if xs else torch.zeros(shape, dtype=post.dtype)

    return ImaginedRollout(
        states=torch.stack(states, 1), latents=torch.stack(latents, 1),
        firsts=torch.stack(firsts, 1),
        actions=torch.stack(actions, 1) if actions else torch.zeros(b, 0, dtype=torch.long),
        rewards=stack(rewards, (b, 0)), continues=stack(conts, (b, 0)),
        d=stack(ds, (b, 0, wm.cfg.d_model)),
    )


def lambda_returns(rewards, continues, values, gamma: float = 0.985, lam: float = 0.95):
    """R_t = r_t + gamma c_t ((1 - lam) V_{t+1} + lam R_{t+1}), with R_h = V_h.

    rewards/continues (b, h), values (b, h+1) -> returns (b, h).
    """
    h = rewards.shape[1]
    out = []
    ret = values[:, h]
    for t in reversed(range(h)):
        ret = rewards[:, t] + gamma * continues[:, t] * ((1 - lam) * values[:, t + 1] + lam * ret)
        out.append(ret)
    return torch.stack(out[::-1], 1) if out else rewards.new_zeros(rewards.shape[0], 0)


class ReturnNormalizer:
    """Tracks an EMA of the 5th and 95th return percentiles; scale = max(1, high - low)."""

    def __init__(self, decay: float = 0.99, low: float = 0.05, high: float = 0.95):
        self.decay, self.low_q, self.high_q = decay, low, high
        self.low: float | None = None
        self.high: float | None = None

    def update(self, returns: torch.Tensor) -> float:
        flat = returns.detach().reshape(-1).to(torch.float64)
        lo = float(torch.quantile(flat, self.low_q))
        hi = float(torch.quantile(flat, self.high_q))
        if self.low is None:
            self.low, self.high = lo, hi
        else:
            self.low = self.decay * self.low + (1 - self.decay) * lo
            self.high = self.decay * self.high + (1 - self.decay) * hi
        return self.scale

    @property
    def scale(self) -> float:
        if self.low is None:
            return 1.0
        return max(1.0, self.high - self.low)


@dataclass
class BehaviorConfig:
    gamma: float = 0.985
    lam: float = 0.95
    entropy: float = 3e-4
    clip: float = 100.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    actor_hidden: int = 256
    critic_hidden: int = 512
    layers: int = 2


class ActorCritic:
    """Actor, critic, their optimisers and the return normaliser."""

    def __init__(self, state_dim: int, n_actions: int, cfg: BehaviorConfig | None = None):
        self.cfg = cfg = cfg or BehaviorConfig()
        self.actor = Actor(state_dim, n_actions, cfg.actor_hidden, cfg.layers)
        self.critic = Critic(state_dim, cfg.critic_hidden, cfg.layers)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.actor_lr, eps=1e-5)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=cfg.critic_lr, eps=1e-5)
        self.normalizer = ReturnNormalizer()

    def losses(self, rollout: ImaginedRollout, scale: float | None = None):
        """Actor and critic losses plus diagnostics; ``scale`` overrides the normaliser."""
        cfg = self.cfg
        states = rollout.states.detach()
        values = self.critic(states)
        with torch.no_grad():
            returns = lambda_returns(rollout.rewards, rollout.continues, values, cfg.gamma, cfg.lam)
            if scale is None:
                scale = self.normalizer.update(returns)
            adv = (returns - values[:, :-1]) / scale
            # steps after a predicted episode end count less
            weight = torch.cumprod(torch.cat([torch.ones_like(rollout.continues[:, :1]),
                                              rollout.continues[:, :-1]], 1), 1)
        logits = self.actor(states[:, :-1])
        logp = tg.log_softmax(logits)
        logp_a = logp.gather(-1, rollout.actions[..., None])[..., 0]
        entropy = -(logp.exp() * logp).sum(-1)
        actor_loss = -(weight * (logp_a * adv + cfg.entropy * entropy)).mean()
        critic_loss = (weight * 0.5 * (values[:, :-1] - returns).pow(2)).mean()
        info = {"actor_loss": float(actor_loss.detach()), "critic_loss": float(critic_loss.detach()),
                "entropy": float(entropy.detach().mean()), "return_mean": float(returns.mean()),
                "return_scale": float(scale), "imag_reward": float(rollout.rewards.mean())}
        return actor_loss, critic_loss, info

    def update(self, rollout: ImaginedRollout) -> dict:
        actor_loss, critic_loss, info = self.losses(rollout)
        self.actor_opt.zero_grad(set_to_none=True)
        self.critic_opt.zero_grad(set_to_none=True)
        tg.backward(actor_loss)
        tg.backward(critic_loss)
        info["actor_grad_norm"] = tg.clip_gradients(self.actor.parameters(), self.cfg.clip)
        info["critic_grad_norm"] = tg.clip_gradients(self.critic.parameters(), self.cfg.clip)
        self.actor_opt.step()
        self.critic_opt.step()
        return info


def ac_update(rollout: ImaginedRollout, agent: ActorCritic) -> dict:
    return agent.update(rollout)


def random_policy_return(env_factory, episodes: int, seed: int = 0) -> float:
    """Mean episodic return of the uniform random policy."""
    rng = np.random.default_rng(seed)
    env = env_factory()
    total = 0.0
    for _ in range(episodes):
        env.reset()
        while True:
            _, r, done, info = env.step(int(rng.integers(env.n_actions)))
            total += r
            if done or info["truncated"]:
                break
    return total / episodes
