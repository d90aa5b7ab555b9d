"""Named invariant checks with per-check timing; nonzero exit on any failure."""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import gridworld as gw
from . import ssd
from . import tensor_grad as tg
from .replay import ReplayBuffer, dfs_score, stable_softmax
from .world_model import (TrajectoryBatch, WorldModel, WorldModelConfig, categorical_kl, free_bits,
                          load_checkpoint, save_checkpoint)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def random_scan_inputs(rng: np.random.Generator, b: int, l: int, h: int, p: int, n: int,
                       dtype=torch.float64):
    """Random (x, log_a, B, C) with decays spread over (0, 1].

    B and C have standard deviation n ** -0.25 so each score C_t . B_s has unit
    variance whatever the state size, keeping outputs O(1).
    """
    x = torch.tensor(rng.standard_normal((b, l, h, p)), dtype=dtype)
    log_a = -torch.tensor(rng.uniform(0.0, 1.5, (b, l, h)), dtype=dtype)
    scale = n ** -0.25
    B = torch.tensor(scale * rng.standard_normal((b, l, n)), dtype=dtype)
    C = torch.tensor(scale * rng.standard_normal((b, l, n)), dtype=dtype)
    return x, log_a, B, C


def mode_gap(x, log_a, B, C, chunk_sizes=(1, 4, 16)) -> float:
    """Largest |difference| between recurrent, quadratic and chunked (every q, plus q = l)."""
    ref, _ = ssd.scan_recurrent(x, log_a, B, C)
    outs = [ssd.scan_quadratic(x, log_a, B, C)]
    outs += [ssd.scan_chunked(x, log_a, B, C, q)[0] for q in (*chunk_sizes, x.shape[1])]
    return max(float((o - ref).abs().max()) for o in outs)


def check_mode_equivalence(instances: int = 40, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = {torch.float64: 0.0, torch.float32: 0.0}
    tol = {torch.float64: 1e-10, torch.float32: 1e-5}
    for i in range(instances):
        dtype = torch.float64 if i % 2 == 0 else torch.float32
        l = int(rng.integers(1, 97))
        shape = (int(rng.integers(1, 3)), l, int(rng.integers(1, 4)), int(rng.integers(1, 9)),
                 int(rng.integers(1, 9)))
        worst[dtype] = max(worst[dtype], mode_gap(*random_scan_inputs(rng, *shape, dtype=dtype)))
    ok = all(worst[d] <= tol[d] for d in worst)
    return ok, f"max gap 64-bit {worst[torch.float64]:.2e}, 32-bit {worst[torch.float32]:.2e}"


def check_linear_attention(scan_fn: Callable = ssd.scan, seed: int = 0) -> tuple[bool, str]:
    """With every a_t = 1 each mode must reproduce causal linear attention."""
    rng = np.random.default_rng(seed)
    x, _, B, C = random_scan_inputs(rng, 2, 40, 2, 4, 5)
    ref = ssd.causal_linear_attention(x, B, C)
    unit = torch.zeros(x.shape[:3], dtype=x.dtype)
    gaps = {m: float((scan_fn(x, unit, B, C, mode=m, q=8)[0] - ref).abs().max()) for m in ssd.MODES}
    return all(g <= 1e-6 for g in gaps.values()), ", ".join(f"{m} {g:.1e}" for m, g in gaps.items())


def tiny_world_model(seed: int = 0) -> tuple[WorldModel, TrajectoryBatch]:
    """d=16, l=8, K=C=4 model and a random batch, built in the current default dtype."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = WorldModelConfig(obs_shape=(3, 3, 3), n_actions=3, categories=4, classes=4,
                           codec_hidden=16, d_model=16, head_dim=8, state_dim=4, chunk_size=4,
                           layers=2, dropout=0.0, action_embed=4, head_hidden=16, reward_bins=9)
    model = WorldModel(cfg)
    b, l = 2, 8
    dones = rng.random((b, l)) < 0.2
    firsts = np.zeros((b, l), dtype=bool)
    firsts[:, 0] = True
    firsts[:, 1:] = dones[:, :-1]
    batch = TrajectoryBatch(
        obs=torch.tensor(rng.random((b, l, 3, 3, 3)), dtype=torch.get_default_dtype()),
        actions=torch.tensor(rng.integers(0, 3, (b, l))),
        rewards=torch.tensor(rng.standard_normal((b, l)), dtype=torch.get_default_dtype()),
        dones=torch.tensor(dones), is_first=torch.tensor(firsts))
    return model, batch


def world_model_gradient_check(n_probes: int = 24, seed: int = 0, eps: float = 1e-6) -> list[dict]:
    """Full world-model loss: autograd versus central differences at 64-bit."""
    with tg.precision(torch.float64):
        model, batch = tiny_world_model(seed)
        params = [p for p in model.parameters() if p.requires_grad]

        def loss_fn():
            gen = torch.Generator().manual_seed(seed)
            return model.loss(batch, "chunked", greedy=False, generator=gen)[0]

        return tg.gradient_check(loss_fn, params, n_probes, eps, seed)


def check_gradients(seed: int = 0) -> tuple[bool, str]:
    res = world_model_gradient_check(seed=seed)
    worst = max(r["rel_error"] for r in res)
    return worst <= 1e-4, f"{len(res)} probes, worst relative error {worst:.2e}"


def check_dfs_laws(seed: int = 0, draws: int = 100_000) -> tuple[bool, str]:
    problems = []
    rng = np.random.default_rng(seed)
    for _ in range(50):
        v = rng.integers(0, 1000, size=int(rng.integers(1, 50)))
        if abs(stable_softmax(-v).sum() - 1) > 1e-12:
            problems.append("softmax(-v) does not sum to 1")
    grid = np.arange(0, 12)
    vv, bb = np.meshgrid(grid, grid)
    if not np.array_equal(dfs_score(vv, bb) == 0, vv >= bb):
        problems.append("f(v, b) = 0 does not coincide with v >= b")
    pairs = {"world": (stable_softmax(-np.array([1, 0])), (0.2689, 0.7311)),
             "imagination": (stable_softmax(dfs_score([0, 1], [1, 1])), (0.2689, 0.7311)),
             "imagination_swapped": (stable_softmax(dfs_score([1, 0], [1, 1])), (0.7311, 0.2689))}
    for name, (got, want) in pairs.items():
        if np.abs(got - np.array(want)).max() > 1e-4:
            problems.append(f"{name} pair {got} != {want}")
    buf = ReplayBuffer(8, (1,))
    for i in range(8):
        buf.append(np.zeros(1, np.uint8), 0, 0.0, False)
    buf.v[:5] = [0, 1, 2, 3, 0]
    probs = buf.world_probs(1)
    counts = np.bincount(rng.choice(len(probs), size=draws, p=probs), minlength=len(probs))
    sigma = np.sqrt(draws * probs * (1 - probs))
    if np.any(np.abs(counts - draws * probs) > 3 * sigma + 1e-9):
        problems.append("empirical frequencies outside 3 sigma")
    return not problems, "; ".join(problems) or "softmax sums, f law, worked pairs, frequencies"


def check_free_bits(seed: int = 0) -> tuple[bool, str]:
    """Identical posterior and prior give dyn = rep = floor and no gradient from either."""
    with tg.precision(torch.float64):
        model, batch = tiny_world_model(seed)
        problems = []
        _, out = model.loss_terms(batch, greedy=True)
        leaf = out.post.logits[:, 1:].detach().requires_grad_(True)
        forms = {"dyn": categorical_kl(tg.stop_gradient(leaf), leaf, model.cfg.unimix),
                 "rep": categorical_kl(leaf, tg.stop_gradient(leaf), model.cfg.unimix)}
        for name, kl in forms.items():
            value = free_bits(kl, model.cfg.free_nats).mean()
            if float(value.detach()) != model.cfg.free_nats:
                problems.append(f"equal categoricals gave {name} = {float(value.detach())}")
            (g,) = torch.autograd.grad(value, leaf)
            if float(g.abs().max()) != 0.0:
                problems.append(f"{name} gradient leaks through the floor")
        problems += stop_gradient_probe(model, batch)
    return not problems, "; ".join(problems) or "floor exact, zero gradient, masks hold"


def _grad_groups(model: WorldModel, loss: torch.Tensor) -> dict[str, float]:
    model.zero_grad(set_to_none=True)
    loss.backward(retain_graph=True)
    groups = {"encoder": model.codec.encoder, "sequence": model.backbone,
              "prior_head": model.latent_head}
    return {name: sum(float(p.grad.abs().sum()) for p in mod.parameters() if p.grad is not None)
            for name, mod in groups.items()}


def stop_gradient_probe(model: WorldModel, batch: TrajectoryBatch) -> list[str]:
    """dyn must only train the prior side, rep only the encoder side."""
    floor, model.cfg.free_nats = model.cfg.free_nats, 0.0   # the floor would hide small KLs
    try:
        terms, _ = model.loss_terms(batch, greedy=False, generator=torch.Generator().manual_seed(0))
        dyn = _grad_groups(model, terms["dyn"])
        rep = _grad_groups(model, terms["rep"])
    finally:
        model.cfg.free_nats = floor
    problems = []
    if dyn["encoder"] != 0.0 or dyn["sequence"] == 0.0 or dyn["prior_head"] == 0.0:
        problems.append(f"dyn gradient groups wrong: {dyn}")
    if rep["encoder"] == 0.0 or rep["sequence"] != 0.0 or rep["prior_head"] != 0.0:
        problems.append(f"rep gradient groups wrong: {rep}")
    model.zero_grad(set_to_none=True)
    return problems


def check_causality(seed: int = 0) -> tuple[bool, str]:
    """Changing inputs after position t leaves outputs up to t untouched, in every mode."""
    with tg.precision(torch.float64):
        torch.manual_seed(seed)
        cfg = ssd.SsdConfig(d_model=16, state_dim=4, head_dim=8, chunk_size=4, dropout=0.0)
        net = ssd.SequenceBackbone(cfg, 2).eval()
        x = torch.randn(2, 20, 16)
        y = x.clone()
        y[:, 11:] = torch.randn(2, 9, 16)
        gaps = {m: float((net(x, m)[0][:, :11] - net(y, m)[0][:, :11]).abs().max()) for m in ssd.MODES}
    return all(g == 0.0 for g in gaps.values()), f"prefix gaps {gaps}"


def check_stepwise(seed: int = 0) -> tuple[bool, str]:
    """Token-by-token stepping reproduces the parallel scan."""
    with tg.precision(torch.float64):
        torch.manual_seed(seed)
        cfg = ssd.SsdConfig(d_model=16, state_dim=4, head_dim=8, chunk_size=4, dropout=0.0)
        net = ssd.SequenceBackbone(cfg, 2).eval()
        x = torch.randn(2, 13, 16)
        ref, _ = net(x, "chunked")
        state = net.initial_state(2)
        outs = []
        for t in range(13):
            o, state = net.step(x[:, t], state)
            outs.append(o)
        gap = float((torch.stack(outs, 1) - ref).abs().max())
    return gap <= 1e-10, f"max gap {gap:.2e}"


def check_tokenizer(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for frames in (1, 8, 64):
        f, a = gw.random_trajectory(5, frames, rng)
        toks = gw.tokenize(f, a)
        if len(toks) != frames * 26:
            return False, f"{frames} frames gave {len(toks)} tokens"
        f2, a2 = gw.detokenize(toks, 5)
        if not (np.array_equal(f, f2) and np.array_equal(a, a2)):
            return False, "round trip changed the trajectory"
    return True, "lengths and round trip"


def check_checkpoint(seed: int = 0) -> tuple[bool, str]:
    model, _ = tiny_world_model(seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
    state = model.state_dict()
    same = set(back) == set(state) and all(torch.equal(back[k], state[k]) for k in state)
    return same, f"{len(state)} tensors"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "mode_equivalence": check_mode_equivalence,
    "linear_attention_reduction": check_linear_attention,
    "gradient_fidelity": check_gradients,
    "dfs_laws": check_dfs_laws,
    "free_bits": check_free_bits,
    "causality": check_causality,
    "stepwise_matches_scan": check_stepwise,
    "tokenizer_round_trip": check_tokenizer,
    "checkpoint_round_trip": check_checkpoint,
}


def run_checks(checks: dict[str, Callable] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in (checks or CHECKS).items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as err:  # a crashing check is a failing check
            ok, detail = False, f"{type(err).__name__}: {err}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def report(results: list[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.seconds:7.2f}s  {r.detail}"
             for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
