"""Structured state-space duality (SSD) sequence kernel.

Per head the recurrence is ``H_t = a_t H_{t-1} + x_t B_t^T`` and
``y_t = H_t C_t`` with a scalar decay ``a_t`` in (0, 1]. The same map is a
lower-triangular semi-separable matrix ``M = L * (C B^T)`` applied to x,
where ``L[j, i] = a_{i+1} ... a_j``. Three execution modes compute it:

* recurrent: the literal recurrence, O(l) time and O(1) state.
* quadratic: materialise M (l x l per head), O(l^2).
* chunked: q x q diagonal blocks in quadratic form, chunk boundaries
  carried by the hidden state, O(l q) time.

Kernel tensors: x (b, l, h, p), log_a (b, l, h) <= 0, B and C (b, l, n),
shared across heads. The hidden state is (b, h, p, n).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor_grad as tg

MODES = ("recurrent", "chunked", "quadratic")
DEFAULT_MAX_QUADRATIC_LEN = 2048


class MaterializationError(ValueError):
    pass


@dataclass
class SsdState:
    """Per-layer hidden matrices; shape never depends on sequence length."""

    h: list[torch.Tensor]
    step_index: int = 0

    @classmethod
    def zeros(cls, n_layers: int, batch: int, heads: int, head_dim: int, state_dim: int,
              dtype=None) -> "SsdState":
        return cls([torch.zeros(batch, heads, head_dim, state_dim, dtype=dtype)
                    for _ in range(n_layers)])

    def detach(self) -> "SsdState":
        return SsdState([h.detach() for h in self.h], self.step_index)

    def nbytes(self) -> int:
        return sum(h.numel() * h.element_size() for h in self.h)


def _check(x, log_a, B, C):
    b, l, h, p = x.shape
    if log_a.shape != (b, l, h) or B.shape[:2] != (b, l) or C.shape != B.shape:
        raise tg.ShapeError(
            f"ssd scan: x {tuple(x.shape)}, log_a {tuple(log_a.shape)}, "
            f"B {tuple(B.shape)}, C {tuple(C.shape)}")
    if l < 1:
        raise tg.ShapeError("ssd scan: sequence length must be >= 1")
    if not torch.isfinite(x).all():
        raise FloatingPointError("ssd scan: non-finite input")


def segsum(log_a: torch.Tensor) -> torch.Tensor:
    """out[..., j, i] = sum_{k=i+1..j} log_a[..., k] for j >= i, -inf above the diagonal.

    Built by masked cumulative sums rather than differences of a prefix sum,
    which keeps it exact-ish for long segments.
    """
    l = log_a.shape[-1]
    x = log_a.unsqueeze(-1).expand(*log_a.shape, l)  # x[..., k, i] = log_a[k]
    strict = torch.tril(torch.ones(l, l, dtype=torch.bool, device=log_a.device), diagonal=-1)
    x = x.masked_fill(~strict, 0.0)
    out = torch.cumsum(x, dim=-2)
    lower = torch.tril(torch.ones(l, l, dtype=torch.bool, device=log_a.device))
    return out.masked_fill(~lower, -math.inf)


def decay_matrix(log_a: torch.Tensor) -> torch.Tensor:
    """The mask L = exp(segsum(log a)) for log_a (..., l)."""
    return torch.exp(segsum(log_a))


def scan_recurrent(x, log_a, B, C, initial_state=None):
    _check(x, log_a, B, C)
    b, l, h, p = x.shape
    H = initial_state if initial_state is not None else x.new_zeros(b, h, p, B.shape[-1])
    # unbind once: per-step indexing would make the backward pass O(l^2)
    steps = zip(torch.exp(log_a).unbind(1), x.unbind(1), B.unbind(1), C.unbind(1))
    ys = []
    for a_t, x_t, B_t, C_t in steps:
        H = a_t[:, :, None, None] * H + x_t[..., None] * B_t[:, None, None, :]
        ys.append(torch.einsum("bhpn,bn->bhp", H, C_t))
    return torch.stack(ys, dim=1), H


def step(x_t, log_a_t, B_t, C_t, H):
    """One recurrent update; x_t (b, h, p), log_a_t (b, h), B_t/C_t (b, n)."""
    if H.shape[:3] != x_t.shape or H.shape[-1] != B_t.shape[-1]:
        raise tg.ShapeError(f"ssd step: state {tuple(H.shape)} vs x_t {tuple(x_t.shape)}, "
                            f"B_t {tuple(B_t.shape)}")
    H = torch.exp(log_a_t)[..., None, None] * H + x_t[..., None] * B_t[:, None, None, :]
    return torch.einsum("bhpn,bn->bhp", H, C_t), H


def scan_quadratic(x, log_a, B, C, initial_state=None, max_len: int = DEFAULT_MAX_QUADRATIC_LEN):
    _check(x, log_a, B, C)
    l = x.shape[1]
    if l > max_len:
        raise MaterializationError(
            f"quadratic mode would materialise a {l}x{l} matrix per head "
            f"(cap {max_len}); use chunked mode for long sequences")
    L = decay_matrix(log_a.transpose(1, 2))             # (b, h, j, i)
    G = torch.einsum("bjn,bin->bji", C, B)              # C B^T
    M = L * G[:, None]
    y = torch.einsum("bhji,bihp->bjhp", M, x)
    if initial_state is not None:
        decay = torch.exp(torch.cumsum(log_a, dim=1))   # a_1 ... a_j
        y = y + torch.einsum("bjn,bhpn,bjh->bjhp", C, initial_state, decay)
    return y


def scan_chunked(x, log_a, B, C, q: int = 16, initial_state=None):
    _check(x, log_a, B, C)
    if q < 1:
        raise ValueError("chunk size must be >= 1")
    b, l, h, p = x.shape
    n = B.shape[-1]
    pad = (-l) % q
    if pad:
        # a = 1 and x = 0 on the padding leaves the carried state untouched
        x = F.pad(x, (0, 0, 0, 0, 0, pad))
        log_a = F.pad(log_a, (0, 0, 0, pad))
        B = F.pad(B, (0, 0, 0, pad))
        C = F.pad(C, (0, 0, 0, pad))
    c = x.shape[1] // q
    x = x.reshape(b, c, q, h, p)
    B = B.reshape(b, c, q, n)
    C = C.reshape(b, c, q, n)
    log_a = log_a.reshape(b, c, q, h).permute(0, 1, 3, 2)   # (b, c, h, q)

    L = decay_matrix(log_a)                                  # (b, c, h, q, q)
    y_diag = torch.einsum("bcjn,bcin,bchji,bcihp->bcjhp", C, B, L, x)

    # state contributed by each chunk, measured at the chunk's last position
    to_end = L[..., -1, :]                                   # (b, c, h, q)
    chunk_states = torch.einsum("bcin,bchi,bcihp->bchpn", B, to_end, x)
    chunk_decay = torch.exp(log_a.sum(-1))                   # (b, c, h)

    H = initial_state if initial_state is not None else x.new_zeros(b, h, p, n)
    entering = []
    for k in range(c):
        entering.append(H)
        H = chunk_decay[:, k, :, None, None] * H + chunk_states[:, k]
    entering = torch.stack(entering, dim=1)                  # (b, c, h, p, n)

    from_start = torch.exp(torch.cumsum(log_a, dim=-1))      # (b, c, h, q)
    y_off = torch.einsum("bcjn,bchpn,bchj->bcjhp", C, entering, from_start)
    y = (y_diag + y_off).reshape(b, c * q, h, p)[:, :l]
    return y, H


def scan(x, log_a, B, C, mode: str = "chunked", q: int = 16, initial_state=None,
         max_quadratic_len: int = DEFAULT_MAX_QUADRATIC_LEN):
    """Dispatch to a mode; always returns (y, final_state or None)."""
    if mode == "recurrent":
        return scan_recurrent(x, log_a, B, C, initial_state)
    if mode == "chunked":
        return scan_chunked(x, log_a, B, C, q, initial_state)
    if mode == "quadratic":
        return scan_quadratic(x, log_a, B, C, initial_state, max_quadratic_len), None
    raise ValueError(f"unknown ssd mode {mode!r}; expected one of {MODES}")


def causal_linear_attention(x, B, C):
    """Reference for a_t = 1: y_j = sum_{i <= j} (C_j . B_i) x_i."""
    l = x.shape[1]
    G = torch.einsum("bjn,bin->bji", C, B)
    G = G * torch.tril(torch.ones(l, l, dtype=G.dtype))
    return torch.einsum("bji,bihp->bjhp", G, x)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return tg.rms_norm(x, self.weight, self.eps)


@dataclass
class SsdConfig:
    d_model: int = 128
    state_dim: int = 16
    head_dim: int = 32
    chunk_size: int = 16
    dropout: float = 0.1
    max_quadratic_len: int = DEFAULT_MAX_QUADRATIC_LEN

    @property
    def heads(self) -> int:
        return self.d_model // self.head_dim

    def __post_init__(self):
        if self.d_model % self.head_dim:
            raise ValueError(f"d_model={self.d_model} not divisible by head_dim={self.head_dim}")
        if self.state_dim < 1 or self.chunk_size < 1:
            raise ValueError("state_dim and chunk_size must be >= 1")


class SsdMixer(nn.Module):
    """Emits the time-varying (x, a, B, C) and gate from the normalised input.

    a_t = exp(-softplus(dt_t + dt_bias) * exp(A_log)), so 0 < a_t <= 1.
    """

    def __init__(self, cfg: SsdConfig):
        super().__init__()
        self.cfg = cfg
        d, n, h = cfg.d_model, cfg.state_dim, cfg.heads
        self.split = (d, d, n, n, h)                       # gate, x, B, C, dt
        self.in_proj = nn.Linear(d, sum(self.split), bias=False)
        self.A_log = nn.Parameter(torch.log(torch.empty(h).uniform_(1.0, 16.0)))
        dt = torch.exp(torch.rand(h) * (math.log(0.1) - math.log(0.001)) + math.log(0.001))
        self.dt_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))   # inverse softplus
        self.out_proj = nn.Linear(d, d, bias=False)

    def emit(self, u):
        cfg = self.cfg
        gate, x, B, C, dt = torch.split(self.in_proj(u), self.split, dim=-1)
        delta = F.softplus(dt + self.dt_bias)
        log_a = -delta * torch.exp(self.A_log)
        x = x.reshape(*x.shape[:-1], cfg.heads, cfg.head_dim)
        return gate, x, log_a.clamp(max=0.0), B, C

    def forward(self, u, mode="chunked", initial_state=None):
        gate, x, log_a, B, C = self.emit(u)
        y, state = scan(x, log_a, B, C, mode, self.cfg.chunk_size, initial_state,
                        self.cfg.max_quadratic_len)
        y = y.reshape(*y.shape[:2], -1) * tg.silu(gate)
        return self.out_proj(y), state

    def step(self, u_t, H):
        gate, x, log_a, B, C = self.emit(u_t)
        y, H = step(x, log_a, B, C, H)
        return self.out_proj(y.reshape(y.shape[0], -1) * tg.silu(gate)), H


class SsdBlock(nn.Module):
    """RMSNorm -> SSD mixer (multi-head scan, gated projection) -> dropout -> residual."""

    def __init__(self, cfg: SsdConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = RMSNorm(cfg.d_model)
        self.mixer = SsdMixer(cfg)
        self.dropout = nn.Dropout(cfg.dropout)

    def initial_state(self, batch: int, dtype=None):
        cfg = self.cfg
        return torch.zeros(batch, cfg.heads, cfg.head_dim, cfg.state_dim,
                           dtype=dtype or self.mixer.A_log.dtype)

    def forward(self, x, mode="chunked", state=None):
        out, state = self.mixer(self.norm(x), mode, state)
        return x + self.dropout(out), state

    def step(self, x_t, state):
        out, state = self.mixer.step(self.norm(x_t), state)
        return x_t + self.dropout(out), state


class GruBlock(nn.Module):
    """GRU reference inside the same norm/residual scaffolding as SsdBlock."""

    def __init__(self, cfg: SsdConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = RMSNorm(cfg.d_model)
        self.gru = nn.GRU(cfg.d_model, cfg.d_model, batch_first=True)
        self.out_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.dropout = nn.Dropout(cfg.dropout)

    def initial_state(self, batch: int, dtype=None):
        return torch.zeros(1, batch, self.cfg.d_model, dtype=dtype or self.out_proj.weight.dtype)

    def forward(self, x, mode=None, state=None):
        h, state = self.gru(self.norm(x), state)
        return x + self.dropout(self.out_proj(h)), state

    def step(self, x_t, state):
        h, state = self.gru(self.norm(x_t)[:, None], state)
        return x_t + self.dropout(self.out_proj(h[:, 0])), state


@dataclass
class BackboneState:
    layers: list = field(default_factory=list)

    def detach(self) -> "BackboneState":
        return BackboneState([s.detach() for s in self.layers])


class SequenceBackbone(nn.Module):
    """Stack of SSD (or GRU) blocks with a final RMSNorm."""

    def __init__(self, cfg: SsdConfig, n_layers: int = 2, kind: str = "ssd"):
        super().__init__()
        if kind not in ("ssd", "gru"):
            raise ValueError(f"unknown backbone kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        block = SsdBlock if kind == "ssd" else GruBlock
        self.blocks = nn.ModuleList(block(cfg) for _ in range(n_layers))
        self.norm = RMSNorm(cfg.d_model)

    def initial_state(self, batch: int, dtype=None) -> BackboneState:
        return BackboneState([blk.initial_state(batch, dtype) for blk in self.blocks])

    def forward(self, x, mode="chunked", state: BackboneState | None = None):
        """x (b, l, d) -> (d_seq (b, l, d), final state). Quadratic mode returns no state."""
        finals = []
        for i, blk in enumerate(self.blocks):
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations entering {self.kind} block {i}")
            x, s = blk(x, mode, state.layers[i] if state is not None else None)
            finals.append(s)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite activations after {self.kind} block {len(self.blocks) - 1}")
        has_state = all(s is not None for s in finals)
        return self.norm(x), (BackboneState(finals) if has_state else None)

    def step(self, x_t, state: BackboneState):
        new = []
        for blk, s in zip(self.blocks, state.layers):
            x_t, s = blk.step(x_t, s)
            new.append(s)
        return self.norm(x_t), BackboneState(new)
