"""Discrete latent codec: observations <-> one-hot categorical codes.

The encoder emits K x C logits, a one-hot code is drawn per row (argmax in
eval mode) and the straight-through estimator lets the decoder's gradient
reach the encoder as if the code were the softmax probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import tensor_grad as tg
from .ssd import RMSNorm


@dataclass
class LatentCode:
    z: torch.Tensor        # (..., K, C) one-hot, straight-through in training
    logits: torch.Tensor   # (..., K, C)

    @property
    def flat(self) -> torch.Tensor:
        return self.z.flatten(-2)


def normalize_frame(obs: torch.Tensor) -> torch.Tensor:
    """uint8 [0, 255] frames to float [0, 1]; float input is assumed normalised."""
    if obs.dtype == torch.uint8:
        return obs.to(torch.get_default_dtype()) / 255.0
    return obs


def sample_one_hot(logits: torch.Tensor, greedy: bool = False,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Per-row categorical draw (or argmax) as a one-hot tensor."""
    classes = logits.shape[-1]
    if greedy:
        idx = torch.argmax(logits, dim=-1)
    else:
        probs = tg.softmax(logits.detach()).reshape(-1, classes)
        idx = torch.multinomial(probs, 1, generator=generator).reshape(logits.shape[:-1])
    return tg.one_hot(idx, classes, logits.dtype)


def straight_through(logits: torch.Tensor, sample: torch.Tensor) -> torch.Tensor:
    """Forward value is exactly ``sample``; backward behaves like softmax(logits)."""
    probs = tg.softmax(logits)
    # (probs - sg(probs)) is exactly zero, so the sum stays exactly one-hot
    return tg.stop_gradient(sample) + (probs - tg.stop_gradient(probs))


def unimix(probs: torch.Tensor, mix: float) -> torch.Tensor:
    return (1.0 - mix) * probs + mix / probs.shape[-1]


def check_one_hot(z: torch.Tensor, atol: float = 1e-3) -> None:
    # tolerance admits the finite-difference surrogate, which moves z by ~eps
    ok = ((z - z.round()).abs() <= atol).all() and ((z.sum(-1) - 1).abs() <= atol).all()
    if not ok:
        raise ValueError("malformed latent code: rows must be one-hot")


class MlpEncoder(nn.Module):
    def __init__(self, obs_shape: tuple, categories: int, classes: int, hidden: int = 256):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        self.categories, self.classes = categories, classes
        in_dim = int(torch.tensor(self.obs_shape).prod())
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), RMSNorm(hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), RMSNorm(hidden), nn.SiLU(),
            nn.Linear(hidden, categories * classes),
        )

    def forward(self, obs):
        if tuple(obs.shape[-len(self.obs_shape):]) != self.obs_shape:
            raise tg.ShapeError(f"encoder: expected frames {self.obs_shape}, got {tuple(obs.shape)}")
        lead = obs.shape[:-len(self.obs_shape)]
        logits = self.net(normalize_frame(obs).reshape(*lead, -1))
        return logits.reshape(*lead, self.categories, self.classes)


class MlpDecoder(nn.Module):
    def __init__(self, obs_shape: tuple, categories: int, classes: int, hidden: int = 256):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        out_dim = int(torch.tensor(self.obs_shape).prod())
        self.net = nn.Sequential(
            nn.Linear(categories * classes, hidden), RMSNorm(hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), RMSNorm(hidden), nn.SiLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, z):
        return self.net(z.flatten(-2)).reshape(*z.shape[:-2], *self.obs_shape)


class CnnEncoder(nn.Module):
    """Strided conv stack for 64x64 frames: filters 16/32/48/64/64, strides 1/2/2/2/2, kernel 5."""

    def __init__(self, obs_shape: tuple, categories: int, classes: int,
                 filters=(16, 32, 48, 64, 64), strides=(1, 2, 2, 2, 2), kernel: int = 5):
        super().__init__()
        self.obs_shape = tuple(obs_shape)          # (h, w, c)
        self.categories, self.classes = categories, classes
        layers, ch = [], obs_shape[-1]
        for f, s in zip(filters, strides):
            layers += [nn.Conv2d(ch, f, kernel, s, padding=kernel // 2), nn.BatchNorm2d(f), nn.SiLU()]
            ch = f
        self.conv = nn.Sequential(*layers)
        with torch.no_grad():
            n = self.conv(torch.zeros(1, obs_shape[-1], *obs_shape[:2])).numel()
        self.head = nn.Linear(n, categories * classes)

    def forward(self, obs):
        lead = obs.shape[:-3]
        x = normalize_frame(obs).reshape(-1, *self.obs_shape).permute(0, 3, 1, 2)
        logits = self.head(self.conv(x).flatten(1))
        return logits.reshape(*lead, self.categories, self.classes)


class CnnDecoder(nn.Module):
    def __init__(self, obs_shape: tuple, categories: int, classes: int,
                 filters=(16, 32, 48, 64, 64), strides=(1, 2, 2, 2, 2), kernel: int = 5):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        shrink = 1
        for s in strides:
            shrink *= s
        self.start = (filters[-1], obs_shape[0] // shrink, obs_shape[1] // shrink)
        self.fc = nn.Linear(categories * classes, int(torch.tensor(self.start).prod()))
        layers = []
        chans = list(filters[::-1]) + [obs_shape[-1]]
        for i, s in enumerate(strides[::-1]):
            last = i == len(strides) - 1
            layers.append(nn.ConvTranspose2d(chans[i], chans[i + 1], kernel, s,
                                             padding=kernel // 2, output_padding=s - 1))
            if not last:
                layers += [nn.BatchNorm2d(chans[i + 1]), nn.SiLU()]
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):
        lead = z.shape[:-2]
        x = self.fc(z.flatten(-2).reshape(-1, self.fc.in_features)).reshape(-1, *self.start)
        return self.deconv(x).permute(0, 2, 3, 1).reshape(*lead, *self.obs_shape)


class LatentCodec(nn.Module):
    """Encoder + decoder pair with categorical latents."""

    def __init__(self, obs_shape: tuple, categories: int = 16, classes: int = 16,
                 hidden: int = 256, arch: str = "mlp"):
        super().__init__()
        self.categories, self.classes = categories, classes
        if arch == "mlp":
            self.encoder = MlpEncoder(obs_shape, categories, classes, hidden)
            self.decoder = MlpDecoder(obs_shape, categories, classes, hidden)
        elif arch == "cnn":
            self.encoder = CnnEncoder(obs_shape, categories, classes)
            self.decoder = CnnDecoder(obs_shape, categories, classes)
        else:
            raise ValueError(f"unknown codec arch {arch!r}")

    def encode(self, obs, greedy: bool | None = None, generator=None) -> LatentCode:
        logits = self.encoder(obs)
        greedy = (not self.training) if greedy is None else greedy
        z = straight_through(logits, sample_one_hot(logits, greedy, generator))
        return LatentCode(z, logits)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        check_one_hot(z.detach())
        return self.decoder(z)


class TokenCodec(nn.Module):
    """Symbol observations: a plain embedding table."""

    def __init__(self, vocab: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.randn(vocab, dim) * 0.02)

    def forward(self, tokens):
        return tg.embedding(self.table, tokens)
