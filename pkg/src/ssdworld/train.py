"""Training loops: the token grid-world benchmark and the full agent loop."""
from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import gridworld as gw
from .behavior import ActorCritic, imagine, policy_state, random_policy_return
from .config import RunConfig
from .metrics import MetricsWriter
from .replay import ReplayBuffer
from .ssd import BackboneState
from .world_model import TokenWorldModel, WorldModel, make_optimizer, save_checkpoint, train_step

log = logging.getLogger(__name__)


def _setup(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)


def _cat_states(states: list[BackboneState], kind: str) -> BackboneState:
    dim = 1 if kind == "gru" else 0
    return BackboneState([torch.cat(layer, dim) for layer in zip(*(s.layers for s in states))])


# --------------------------------------------------------------------------
# grid-world token benchmark
# --------------------------------------------------------------------------

@torch.no_grad()
def predict_frames(model: TokenWorldModel, tokens: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy frame generation from real prefixes.

    For every frame k >= 1 of every sequence, the model reads the true tokens
    up to the action that closes frame k-1 and then generates the l_g^2
    cells of frame k one token at a time. Returns (predicted, truth) stacks.
    """
    was_training = model.training
    model.eval()
    lf, cells = gw.frame_length(size), size * size
    toks = torch.from_numpy(tokens)
    n, l = toks.shape
    state = model.initial_state(n)
    branch_logits, branch_states = [], []
    for t in range(l - 1):
        logits, state = model.step(toks[:, t], state)
        if (t + 1) % lf == 0:
            branch_logits.append(logits)
            branch_states.append(state)
    logits = torch.cat(branch_logits, 0)
    state = _cat_states(branch_states, model.backbone.kind)
    generated = []
    for i in range(cells):
        tok = torch.argmax(logits, -1)
        generated.append(tok)
        if i < cells - 1:
            logits, state = model.step(tok, state)
    model.train(was_training)
    k = len(branch_logits)
    pred = torch.stack(generated, 1).reshape(k, n, size, size).transpose(0, 1).numpy()
    frames = np.stack([gw.detokenize(row, size)[0] for row in tokens])[:, 1:k + 1]
    return pred.reshape(-1, size, size), frames.reshape(-1, size, size)


def evaluate_grid(model: TokenWorldModel, tokens: np.ndarray, size: int) -> gw.GridErrors:
    return gw.grid_errors(*predict_frames(model, tokens, size))


def train_gridworld(cfg: RunConfig, out_dir, max_seconds: float | None = None) -> dict:
    """Token-mode world-model training on flattened grid-world trajectories."""
    _setup(cfg)
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng(cfg.seed + 10_007)
    wcfg = cfg.world_model()
    model = TokenWorldModel(len(gw.VOCAB), wcfg)
    opt = make_optimizer(model, cfg.grid_lr, cfg.weight_decay)
    seq_len = cfg.grid_frames * gw.frame_length(cfg.grid_size)
    eval_tokens = gw.batch_tokens(cfg.grid_size, cfg.grid_frames, cfg.grid_eval_sequences, eval_rng)
    metrics = MetricsWriter(out / "metrics.csv", cfg,
                            ["seq_len", "loss", "grad_norm", "ms_per_step", "E_g", "E_l", "error",
                             "elapsed_s"])
    budget = cfg.time_budget_s if max_seconds is None else max_seconds
    start = time.perf_counter()
    err = evaluate_grid(model, eval_tokens, cfg.grid_size)
    metrics.write(0, seq_len=seq_len, E_g=err.geometric, E_l=err.logic, error=err.combined,
                  elapsed_s=0.0)
    step = 0
    for step in range(1, cfg.grid_steps + 1):
        tokens = torch.from_numpy(gw.batch_tokens(cfg.grid_size, cfg.grid_frames, cfg.grid_batch, rng))
        t0 = time.perf_counter()
        terms = train_step(model, tokens, opt, cfg.ssd_mode, cfg.wm_clip)
        ms = 1000 * (time.perf_counter() - t0)
        elapsed = time.perf_counter() - start
        last = step == cfg.grid_steps or elapsed > budget
        row = dict(seq_len=seq_len, loss=terms["loss"], grad_norm=terms["grad_norm"],
                   ms_per_step=ms, elapsed_s=elapsed)
        if step % cfg.grid_eval_every == 0 or last:
            err = evaluate_grid(model, eval_tokens, cfg.grid_size)
            row.update(E_g=err.geometric, E_l=err.logic, error=err.combined)
            log.info("grid step %d loss %.4f error %.2f%% (E_g %.2f, E_l %.2f)", step,
                     terms["loss"], err.combined, err.geometric, err.logic)
        metrics.write(step, **row)
        if last:
            break
    save_checkpoint(model, out / "checkpoint")
    return {"steps": step, "seq_len": seq_len, "error": err.combined, "E_g": err.geometric,
            "E_l": err.logic, "elapsed_s": time.perf_counter() - start,
            "metrics": str(out / "metrics.csv"), "model": model}


# --------------------------------------------------------------------------
# full agent loop
# --------------------------------------------------------------------------

class Acting:
    """Carries the sequence state across real environment steps (never reset manually)."""

    def __init__(self, wm: WorldModel):
        self.wm = wm
        self.state = wm.initial_state(1)
        self.d_prev = torch.zeros(1, wm.cfg.d_model)

    @torch.no_grad()
    def __call__(self, obs: np.ndarray, first: bool, actor, greedy: bool, generator=None,
                 action: int | None = None) -> int:
        wm = self.wm
        was_training = wm.training
        wm.eval()
        z = wm.codec.encode(torch.from_numpy(obs)[None], greedy=True).z
        if action is None:
            action = int(actor.act(policy_state(z, self.d_prev), greedy, generator)[0])
        flag = torch.tensor([float(first)])
        self.d_prev, self.state = wm.step(z, torch.tensor([action]), flag, self.state)
        wm.train(was_training)
        return action


def evaluate_agent(wm: WorldModel, agent: ActorCritic, env: gw.PixelGridEnv, episodes: int,
                   greedy: bool = True) -> float:
    act = Acting(wm)
    total = 0.0
    for _ in range(episodes):
        obs, first = env.reset(), True
        while True:
            a = act(obs, first, agent.actor, greedy)
            obs, r, done, info = env.step(a)
            total += r
            first = False
            if done or info["truncated"]:
                break
    return total / episodes


AGENT_COLUMNS = ["phase", "episode_return", "eval_return", "random_return", "wm_loss", "recon",
                 "dyn", "rep", "reward_nll", "term_nll", "actor_loss", "critic_loss", "entropy",
                 "imag_reward", "return_scale", "sum_v", "sum_b", "expected_sum_v",
                 "expected_sum_b", "ms_per_step", "elapsed_s"]


def train_agent(cfg: RunConfig, out_dir) -> dict:
    """Collect -> world-model update -> imagination + actor-critic, repeated."""
    _setup(cfg)
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    env = gw.PixelGridEnv(cfg.env_size, cfg.max_episode_steps, seed=cfg.seed)
    eval_env = gw.PixelGridEnv(cfg.env_size, cfg.max_episode_steps, seed=cfg.seed + 1)
    wcfg = cfg.world_model(env.obs_shape, env.n_actions)
    wm = WorldModel(wcfg)
    wm_opt = make_optimizer(wm, cfg.wm_lr, cfg.weight_decay)
    agent = ActorCritic(wcfg.categories * wcfg.classes + wcfg.d_model, env.n_actions, cfg.behavior())
    buffer = ReplayBuffer(cfg.capacity, env.obs_shape)
    metrics = MetricsWriter(out / "metrics.csv", cfg, AGENT_COLUMNS)

    random_return = random_policy_return(
        lambda: gw.PixelGridEnv(cfg.env_size, cfg.max_episode_steps, seed=cfg.seed + 2),
        cfg.baseline_episodes, seed=cfg.seed + 3)
    metrics.write(0, phase="baseline", random_return=random_return)
    log.info("random-policy return %.4f", random_return)

    acting = Acting(wm)
    obs, first, ep_return = env.reset(), True, 0.0
    world_calls = imag_calls = wm_updates = 0
    start = time.perf_counter()
    wm_terms: dict = {}
    ac_info: dict = {}
    eval_return = float("nan")
    for step in range(1, cfg.env_steps + 1):
        t0 = time.perf_counter()
        # phase 1: data collection
        explore = step <= cfg.prefill
        a = acting(obs, first, agent.actor, greedy=False, generator=gen,
                   action=int(rng.integers(env.n_actions)) if explore else None)
        next_obs, r, done, info = env.step(a)
        buffer.append(obs, a, r, done, first)
        ep_return += r
        finished = done or info["truncated"]
        if finished:
            metrics.write(step, phase="episode", episode_return=ep_return)
            obs, first, ep_return = env.reset(), True, 0.0
        else:
            obs, first = next_obs, False

        if step > cfg.prefill and step % cfg.train_every == 0:
            # phase 2: world model
            length = min(cfg.seq_len, len(buffer))
            if cfg.sampler == "dfs":
                batch, _ = buffer.sample_world(cfg.batch_size, length, rng)
            else:
                batch, _ = buffer.sample_uniform(cfg.batch_size, length, rng, "v")
            world_calls += cfg.batch_size * length
            wm_terms = train_step(wm, batch, wm_opt, cfg.ssd_mode, cfg.wm_clip, gen)
            wm_updates += 1
            # phase 3: behaviour
            if wm_updates > cfg.ac_warmup:
                if cfg.sampler == "dfs":
                    ctx, _ = buffer.sample_imagination(cfg.b_img, cfg.l_img, rng)
                else:
                    ctx, _ = buffer.sample_uniform(cfg.b_img, cfg.l_img, rng, "b")
                imag_calls += cfg.b_img * cfg.l_img
                rollout = imagine(wm, agent.actor, ctx, cfg.horizon, cfg.ssd_mode, generator=gen)
                ac_info = agent.update(rollout)

        ms = 1000 * (time.perf_counter() - t0)
        elapsed = time.perf_counter() - start
        last = step == cfg.env_steps or elapsed > cfg.time_budget_s
        if step % cfg.eval_every == 0 or last:
            eval_return = evaluate_agent(wm, agent, eval_env, cfg.eval_episodes)
            metrics.write(
                step, phase="train", eval_return=eval_return, random_return=random_return,
                wm_loss=wm_terms.get("loss"), recon=wm_terms.get("recon"), dyn=wm_terms.get("dyn"),
                rep=wm_terms.get("rep"), reward_nll=wm_terms.get("reward_nll"),
                term_nll=wm_terms.get("term_nll"), actor_loss=ac_info.get("actor_loss"),
                critic_loss=ac_info.get("critic_loss"), entropy=ac_info.get("entropy"),
                imag_reward=ac_info.get("imag_reward"), return_scale=ac_info.get("return_scale"),
                sum_v=int(buffer.counts_v.sum()), sum_b=int(buffer.counts_b.sum()),
                expected_sum_v=world_calls, expected_sum_b=imag_calls, ms_per_step=ms,
                elapsed_s=elapsed)
            log.info("step %d eval return %.3f (random %.3f) wm %.3f", step, eval_return,
                     random_return, wm_terms.get("loss", float("nan")))
        if step % cfg.checkpoint_every == 0 or last:
            save_checkpoint(wm, out / "world_model")
            save_checkpoint({**{f"actor.{k}": v for k, v in agent.actor.state_dict().items()},
                             **{f"critic.{k}": v for k, v in agent.critic.state_dict().items()}},
                            out / "behavior")
        if last:
            break

    final = evaluate_agent(wm, agent, gw.PixelGridEnv(cfg.env_size, cfg.max_episode_steps,
                                                       seed=cfg.seed + 4), cfg.eval_episodes * 5)
    metrics.write(step, phase="final", eval_return=final, random_return=random_return,
                  sum_v=int(buffer.counts_v.sum()), sum_b=int(buffer.counts_b.sum()),
                  expected_sum_v=world_calls, expected_sum_b=imag_calls,
                  elapsed_s=time.perf_counter() - start)
    return {"final_return": final, "random_return": random_return, "steps": step,
            "sum_v": int(buffer.counts_v.sum()), "sum_b": int(buffer.counts_b.sum()),
            "expected_sum_v": world_calls, "expected_sum_b": imag_calls,
            "elapsed_s": time.perf_counter() - start, "metrics": str(out / "metrics.csv"),
            "buffer": buffer, "world_model": wm, "agent": agent}
