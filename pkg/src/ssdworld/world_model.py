"""World model: latent codec + SSD sequence model + prediction heads.

At each position the token fuses the posterior code z_t, an action
embedding and a reset flag. The backbone turns the token stream into the
deterministic sequence d_t, from which the heads predict the next code, the
reward and the termination flag. The next-code target depends only on the
next observation, so a whole (b, l) batch trains in one parallel pass.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import tensor_grad as tg
from .codec import LatentCode, LatentCodec, TokenCodec, sample_one_hot, unimix
from .ssd import BackboneState, RMSNorm, SequenceBackbone, SsdConfig


@dataclass
class TrajectoryBatch:
    obs: torch.Tensor        # (b, l, *obs_shape)
    actions: torch.Tensor    # (b, l) int
    rewards: torch.Tensor    # (b, l)
    dones: torch.Tensor      # (b, l) termination after the step
    is_first: torch.Tensor   # (b, l) 1 where the step opens an episode

    def __post_init__(self):
        bl = tuple(self.actions.shape)
        for name in ("rewards", "dones", "is_first"):
            if tuple(getattr(self, name).shape) != bl:
                raise tg.ShapeError(f"TrajectoryBatch.{name}: {tuple(getattr(self, name).shape)} vs {bl}")
        if tuple(self.obs.shape[:2]) != bl:
            raise tg.ShapeError(f"TrajectoryBatch.obs: {tuple(self.obs.shape)} vs {bl}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.actions.shape)


@dataclass
class WorldModelConfig:
    obs_shape: tuple = (5, 5, 3)
    n_actions: int = 4
    categories: int = 16
    classes: int = 16
    codec_hidden: int = 256
    codec_arch: str = "mlp"
    d_model: int = 128
    head_dim: int = 32
    state_dim: int = 16
    chunk_size: int = 16
    layers: int = 2
    dropout: float = 0.1
    backbone: str = "ssd"
    action_embed: int = 32
    head_hidden: int = 256
    reward_bins: int = 41
    free_nats: float = 1.0
    rep_scale: float = 0.1
    unimix: float = 0.01

    def ssd(self) -> SsdConfig:
        return SsdConfig(self.d_model, self.state_dim, self.head_dim, self.chunk_size, self.dropout)


# --------------------------------------------------------------------------
# distributions
# --------------------------------------------------------------------------

def symlog(x):
    return torch.sign(x) * torch.log1p(x.abs())


def symexp(x):
    return torch.sign(x) * torch.expm1(x.abs())


class TwoHot:
    """Discrete regression over symexp-spaced bins (evenly spaced in symlog space)."""

    def __init__(self, bins: int = 41, low: float = -20.0, high: float = 20.0):
        self.bins = torch.linspace(low, high, bins, dtype=torch.float64)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        bins = self.bins.to(x.dtype)
        y = symlog(x).clamp(bins[0], bins[-1])
        hi = torch.bucketize(y, bins).clamp(1, len(bins) - 1)
        lo = hi - 1
        w_hi = (y - bins[lo]) / (bins[hi] - bins[lo])
        out = torch.zeros(*x.shape, len(bins), dtype=x.dtype)
        out.scatter_(-1, lo[..., None], (1 - w_hi)[..., None])
        out.scatter_add_(-1, hi[..., None], w_hi[..., None])
        return out

    def mean(self, logits: torch.Tensor) -> torch.Tensor:
        return symexp((tg.softmax(logits) * self.bins.to(logits.dtype)).sum(-1))

    def nll(self, logits: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return -(self.encode(x) * tg.log_softmax(logits)).sum(-1)


def categorical_kl(p_logits: torch.Tensor, q_logits: torch.Tensor, mix: float = 0.0) -> torch.Tensor:
    """KL[p || q] per categorical row, summed over the K rows: (..., K, C) -> (...)."""
    p = unimix(tg.softmax(p_logits), mix)
    q = unimix(tg.softmax(q_logits), mix)
    return (p * (torch.log(p) - torch.log(q))).sum(-1).sum(-1)


def free_bits(kl: torch.Tensor, floor: float = 1.0) -> torch.Tensor:
    """max(floor, kl): no gradient once the KL is below the floor."""
    return torch.clamp(kl, min=floor)


class MlpHead(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, zero_out: bool = False):
        super().__init__()
        self.fc = nn.Linear(d_in, hidden)
        self.norm = RMSNorm(hidden)
        self.out = nn.Linear(hidden, d_out)
        if zero_out:
            # untrained heads predict exactly zero instead of noise
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(tg.silu(self.norm(self.fc(x))))


@dataclass
class WorldModelOutput:
    post: LatentCode
    d: torch.Tensor
    prior_logits: torch.Tensor
    reward_logits: torch.Tensor
    term_logits: torch.Tensor
    recon: torch.Tensor
    state: BackboneState | None = None


class WorldModel(nn.Module):
    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        self.codec = LatentCodec(cfg.obs_shape, cfg.categories, cfg.classes,
                                 cfg.codec_hidden, cfg.codec_arch)
        self.action_embed = nn.Embedding(cfg.n_actions, cfg.action_embed)
        latent = cfg.categories * cfg.classes
        self.token_proj = nn.Linear(latent + cfg.action_embed + 1, cfg.d_model)
        self.backbone = SequenceBackbone(cfg.ssd(), cfg.layers, cfg.backbone)
        self.latent_head = nn.Linear(cfg.d_model, latent)
        self.reward_head = MlpHead(cfg.d_model, cfg.head_hidden, cfg.reward_bins, zero_out=True)
        self.term_head = MlpHead(cfg.d_model, cfg.head_hidden, 1)
        self.twohot = TwoHot(cfg.reward_bins)

    @property
    def latent_dim(self) -> int:
        return self.cfg.categories * self.cfg.classes

    def token(self, z, actions, is_first):
        """Fuse (z, a, reset flag) and project to the model width; z is gradient-detached."""
        emb = tg.embedding(self.action_embed.weight, actions)
        flag = is_first.to(emb.dtype)[..., None]
        return self.token_proj(tg.concat([tg.stop_gradient(z.flatten(-2)), emb, flag], -1))

    def prior_logits(self, d):
        return self.latent_head(d).reshape(*d.shape[:-1], self.cfg.categories, self.cfg.classes)

    def forward(self, batch: TrajectoryBatch, mode: str = "chunked", state=None,
                greedy: bool | None = None, generator=None) -> WorldModelOutput:
        post = self.codec.encode(batch.obs, greedy, generator)
        recon = self.codec.decode(post.z)
        x = self.token(post.z, batch.actions, batch.is_first)
        d, state = self.backbone(x, mode, state)
        return WorldModelOutput(post, d, self.prior_logits(d), self.reward_head(d),
                                self.term_head(d)[..., 0], recon, state)

    def loss_terms(self, batch: TrajectoryBatch, mode: str = "chunked", greedy: bool | None = None,
                   generator=None) -> tuple[dict[str, torch.Tensor], WorldModelOutput]:
        """Unweighted loss terms as tensors (recon, dyn, rep, reward, term) plus the forward output."""
        cfg = self.cfg
        out = self(batch, mode, greedy=greedy, generator=generator)
        target = batch.obs
        if target.dtype == torch.uint8:
            target = target.to(out.recon.dtype) / 255.0
        recon = (target - out.recon).pow(2).flatten(2).sum(-1).mean()

        post = out.post.logits[:, 1:]
        prior = out.prior_logits[:, :-1]
        kl_dyn = categorical_kl(tg.stop_gradient(post), prior, cfg.unimix)
        kl_rep = categorical_kl(post, tg.stop_gradient(prior), cfg.unimix)
        terms = {
            "recon": recon,
            "dyn": free_bits(kl_dyn, cfg.free_nats).mean(),
            "rep": free_bits(kl_rep, cfg.free_nats).mean(),
            "kl": kl_dyn.mean(),
            "reward": self.twohot.nll(out.reward_logits, batch.rewards.to(out.d.dtype)).mean(),
            "term": nn.functional.binary_cross_entropy_with_logits(
                out.term_logits, batch.dones.to(out.d.dtype)),
        }
        return terms, out

    def loss(self, batch: TrajectoryBatch, mode: str = "chunked", greedy: bool | None = None,
             generator=None):
        t, out = self.loss_terms(batch, mode, greedy, generator)
        total = t["recon"] + t["dyn"] + self.cfg.rep_scale * t["rep"] + t["reward"] + t["term"]

        with torch.no_grad():
            prior = out.prior_logits[:, :-1]
            ent = -(tg.softmax(prior) * tg.log_softmax(prior)).sum(-1).sum(-1)
            boundary = batch.is_first[:, 1:].bool()
        terms = {
            "loss": float(total.detach()), "recon": float(t["recon"].detach()),
            "dyn": float(t["dyn"].detach()), "rep": float(t["rep"].detach()),
            "kl": float(t["kl"].detach()), "reward_nll": float(t["reward"].detach()),
            "term_nll": float(t["term"].detach()),
            "prior_entropy_boundary": float(ent[boundary].mean()) if boundary.any() else math.nan,
            "prior_entropy_mid": float(ent[~boundary].mean()) if (~boundary).any() else math.nan,
        }
        return total, terms

    # -- stepwise inference ------------------------------------------------
    def initial_state(self, batch: int) -> BackboneState:
        return self.backbone.initial_state(batch, self.token_proj.weight.dtype)

    def step(self, z_t, a_t, first_t, state: BackboneState):
        return self.backbone.step(self.token(z_t, a_t, first_t), state)

    def predict(self, d, greedy: bool = False, generator=None):
        """Heads on d: (next code one-hot, reward mean, continue probability)."""
        z = sample_one_hot(self.prior_logits(d), greedy, generator)
        reward = self.twohot.mean(self.reward_head(d))
        cont = 1.0 - torch.sigmoid(self.term_head(d)[..., 0])
        return z, reward, cont


class TokenWorldModel(nn.Module):
    """Token-stream variant: embedding-table codec, next-symbol cross-entropy."""

    def __init__(self, vocab: int, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.codec = TokenCodec(vocab, cfg.d_model)
        self.backbone = SequenceBackbone(cfg.ssd(), cfg.layers, cfg.backbone)
        self.head = nn.Linear(cfg.d_model, vocab)

    def forward(self, tokens, mode="chunked", state=None):
        d, state = self.backbone(self.codec(tokens), mode, state)
        return self.head(d), state

    def loss(self, tokens, mode="chunked"):
        logits, _ = self(tokens, mode)
        loss = tg.cross_entropy(logits[:, :-1], tokens[:, 1:])
        return loss, {"loss": float(loss.detach())}

    def initial_state(self, batch: int) -> BackboneState:
        return self.backbone.initial_state(batch, self.head.weight.dtype)

    def step(self, token_t, state):
        d, state = self.backbone.step(self.codec(token_t), state)
        return self.head(d), state


def make_optimizer(model: nn.Module, lr: float, weight_decay: float = 1e-4):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay, eps=1e-8)


def train_step(model, batch, optimizer, mode: str = "chunked", clip: float = 100.0,
               generator=None, greedy: bool = False) -> dict:
    """One end-to-end gradient step; returns the metrics record for it."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    if isinstance(model, TokenWorldModel):
        total, terms = model.loss(batch, mode)
    else:
        total, terms = model.loss(batch, mode, greedy=greedy, generator=generator)
    tg.backward(total)
    terms["grad_norm"] = tg.clip_gradients(model.parameters(), clip)
    optimizer.step()
    return terms


# --------------------------------------------------------------------------
# checkpoints: flat binary + text manifest
# --------------------------------------------------------------------------

def save_checkpoint(tensors: dict[str, torch.Tensor] | nn.Module, path) -> None:
    """Write ``path.bin`` (raw little-endian tensors) and ``path.manifest``.

    Manifest lines: ``name dtype shape offset nbytes sha256``.
    """
    if isinstance(tensors, nn.Module):
        tensors = tensors.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, t in tensors.items():
            arr = t.detach().cpu().contiguous().numpy()
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(raw)
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name} {arr.dtype.str} {shape} {offset} {len(raw)} "
                         f"{hashlib.sha256(raw).hexdigest()}")
            offset += len(raw)
    path.with_suffix(".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for line in path.with_suffix(".manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, dtype, shape, offset, nbytes, digest = line.split()
        raw = blob[int(offset):int(offset) + int(nbytes)]
        if hashlib.sha256(raw).hexdigest() != digest:
            raise ValueError(f"checkpoint {path}: checksum mismatch for {name}")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        arr = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(dims)
        out[name] = torch.from_numpy(arr.copy())
    return out
