import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdworld import ssd
from ssdworld import tensor_grad as tg
from ssdworld.verify import check_linear_attention, mode_gap, random_scan_inputs


def loop_oracle(x, log_a, B, C):
    """Plain python loops over batch, head, time in 64-bit."""
    x, a, B, C = (t.double().numpy() for t in (x, torch.exp(log_a), B, C))
    b, l, h, p = x.shape
    y = np.zeros_like(x)
    for bi in range(b):
        for hi in range(h):
            H = np.zeros((p, B.shape[-1]))
            for t in range(l):
                H = a[bi, t, hi] * H + np.outer(x[bi, t, hi], B[bi, t])
                y[bi, t, hi] = H @ C[bi, t]
    return torch.tensor(y)


def test_prefix_sum_degenerate_case():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64).reshape(1, 3, 1, 1)
    ones = torch.ones(1, 3, 1, dtype=torch.float64)
    for mode in ssd.MODES:
        y, _ = ssd.scan(x, torch.zeros(1, 3, 1, dtype=torch.float64), ones, ones, mode, q=2)
        assert y.flatten().tolist() == [1.0, 3.0, 6.0]


def test_zero_decay_is_memoryless(rng):
    x, _, B, C = random_scan_inputs(rng, 1, 7, 2, 3, 4)
    log_a = torch.full((1, 7, 2), -math.inf, dtype=torch.float64)
    y, _ = ssd.scan_recurrent(x, log_a, B, C)
    expect = x * (B * C).sum(-1)[:, :, None, None]
    assert torch.allclose(y, expect, atol=1e-12)


def test_recurrent_matches_loop_oracle(rng):
    x, log_a, B, C = random_scan_inputs(rng, 2, 16, 2, 4, 4)   # d = 8 split into 2 heads of 4
    y, _ = ssd.scan_recurrent(x, log_a, B, C)
    assert float((y - loop_oracle(x, log_a, B, C)).abs().max()) <= 1e-10


def test_decay_matrix_worked_example():
    log_a = torch.log(torch.tensor([1.0, 0.5, 0.5], dtype=torch.float64))
    L = ssd.decay_matrix(log_a)
    expect = torch.tensor([[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]], dtype=torch.float64)
    assert torch.allclose(L, expect, atol=1e-15)


def test_quadratic_basis_example():
    # B_t = C_t = e_1, scalar x: y_j = sum_i L[j, i] x_i
    log_a = torch.log(torch.tensor([1.0, 0.5, 0.5], dtype=torch.float64)).reshape(1, 3, 1)
    e = torch.zeros(1, 3, 2, dtype=torch.float64)
    e[..., 0] = 1
    x = torch.tensor([1.0, 2.0, 4.0], dtype=torch.float64).reshape(1, 3, 1, 1)
    y = ssd.scan_quadratic(x, log_a, e, e)
    assert y.flatten().tolist() == pytest.approx([1.0, 2.5, 5.25])


@settings(max_examples=40, deadline=None)
@given(l=st.integers(1, 80), h=st.integers(1, 3), p=st.integers(1, 6), n=st.integers(1, 6),
       seed=st.integers(0, 2**31 - 1))
def test_mode_equivalence_property_64bit(l, h, p, n, seed):
    inputs = random_scan_inputs(np.random.default_rng(seed), 2, l, h, p, n)
    assert mode_gap(*inputs) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(l=st.integers(1, 80), seed=st.integers(0, 2**31 - 1))
def test_mode_equivalence_property_32bit(l, seed):
    inputs = random_scan_inputs(np.random.default_rng(seed), 1, l, 2, 4, 4, dtype=torch.float32)
    assert mode_gap(*inputs) <= 1e-5


def test_chunked_long_sequence(rng):
    x, log_a, B, C = random_scan_inputs(rng, 1, 208, 2, 4, 4, dtype=torch.float32)
    ref, H_ref = ssd.scan_recurrent(x, log_a, B, C)
    y, H = ssd.scan_chunked(x, log_a, B, C, 16)
    assert float((y - ref).abs().max()) <= 1e-5
    assert float((H - H_ref).abs().max()) <= 1e-5


@pytest.mark.parametrize("q", [1, 3, 16, 50])
def test_chunked_with_initial_state(q, rng):
    x, log_a, B, C = random_scan_inputs(rng, 2, 23, 2, 3, 4)
    H0 = torch.tensor(rng.standard_normal((2, 2, 3, 4)))
    ref, H_ref = ssd.scan_recurrent(x, log_a, B, C, H0)
    y, H = ssd.scan_chunked(x, log_a, B, C, q, H0)
    yq = ssd.scan_quadratic(x, log_a, B, C, H0)
    assert float((y - ref).abs().max()) <= 1e-10
    assert float((yq - ref).abs().max()) <= 1e-10
    assert float((H - H_ref).abs().max()) <= 1e-10


def test_step_iteration_and_prefix_consistency(rng):
    x, log_a, B, C = random_scan_inputs(rng, 1, 208, 2, 3, 4)
    ref, H_ref = ssd.scan_recurrent(x, log_a, B, C)
    H = torch.zeros(1, 2, 3, 4, dtype=torch.float64)
    first, _ = ssd.step(x[:, 0], log_a[:, 0], B[:, 0], C[:, 0], H)
    assert torch.equal(first, ref[:, 0])
    ys = []
    for t in range(208):
        y, H = ssd.step(x[:, t], log_a[:, t], B[:, t], C[:, t], H)
        ys.append(y)
    assert float((torch.stack(ys, 1) - ref).abs().max()) <= 1e-6
    # warm state from a chunked scan over l steps, then one step == last output over l + 1
    _, H_warm = ssd.scan_chunked(x[:, :-1], log_a[:, :-1], B[:, :-1], C[:, :-1], 16)
    y_last, _ = ssd.step(x[:, -1], log_a[:, -1], B[:, -1], C[:, -1], H_warm)
    assert float((y_last - ref[:, -1]).abs().max()) <= 1e-10


def test_causality_bit_identical(rng):
    x, log_a, B, C = random_scan_inputs(rng, 1, 30, 2, 3, 4)
    x2 = x.clone()
    x2[:, 17] += 5.0
    for mode in ssd.MODES:
        y1, _ = ssd.scan(x, log_a, B, C, mode, q=8)
        y2, _ = ssd.scan(x2, log_a, B, C, mode, q=8)
        assert torch.equal(y1[:, :17], y2[:, :17])
        assert not torch.equal(y1[:, 17], y2[:, 17])


def test_linear_attention_reduction_exact():
    ok, detail = check_linear_attention()
    assert ok, detail


def test_linear_attention_check_catches_a_faulty_kernel():
    # mutation probe: a kernel that ignores the forced a_t = 1 and decays anyway
    def faulty(x, log_a, B, C, mode="chunked", q=16, **kw):
        return ssd.scan(x, log_a.clamp(max=-0.05), B, C, mode, q)

    ok, _ = check_linear_attention(faulty)
    assert not ok


def test_quadratic_cap_raises():
    x = torch.zeros(1, 10, 1, 1)
    with pytest.raises(ssd.MaterializationError, match="chunked"):
        ssd.scan_quadratic(x, torch.zeros(1, 10, 1), torch.zeros(1, 10, 2), torch.zeros(1, 10, 2),
                           max_len=8)


def test_errors():
    with pytest.raises(FloatingPointError):
        ssd.scan_recurrent(torch.full((1, 2, 1, 1), math.nan), torch.zeros(1, 2, 1),
                           torch.zeros(1, 2, 1), torch.zeros(1, 2, 1))
    with pytest.raises(tg.ShapeError):
        ssd.scan_chunked(torch.zeros(1, 2, 1, 1), torch.zeros(1, 3, 1), torch.zeros(1, 2, 1),
                         torch.zeros(1, 2, 1))
    with pytest.raises(tg.ShapeError):
        ssd.step(torch.zeros(1, 2, 3), torch.zeros(1, 2), torch.zeros(1, 4), torch.zeros(1, 4),
                 torch.zeros(1, 2, 3, 5))
    with pytest.raises(ValueError):
        ssd.SsdConfig(d_model=10, head_dim=4)


def small_cfg(**kw):
    return ssd.SsdConfig(**{"d_model": 16, "state_dim": 4, "head_dim": 4, "chunk_size": 4,
                            "dropout": 0.0, **kw})


def test_decay_in_unit_interval(f64):
    mixer = ssd.SsdMixer(small_cfg())
    _, _, log_a, _, _ = mixer.emit(torch.randn(3, 9, 16) * 10)
    a = torch.exp(log_a)
    assert bool((a > 0).all()) and bool((a <= 1).all())


def test_block_identity_with_zero_output_projection(f64):
    block = ssd.SsdBlock(small_cfg()).eval()
    torch.nn.init.zeros_(block.mixer.out_proj.weight)
    x = torch.randn(2, 11, 16)
    assert torch.equal(block(x)[0], x)


def test_block_head_permutation_invariance(f64):
    """Relabelling heads (with their x channels, decays and gate/output columns) changes nothing."""
    cfg = small_cfg()
    block = ssd.SsdBlock(cfg).eval()
    x = torch.randn(2, 9, 16)
    ref, _ = block(x)
    perm = torch.tensor([2, 0, 3, 1])
    chan = (perm[:, None] * cfg.head_dim + torch.arange(cfg.head_dim)).reshape(-1)
    m = block.mixer
    d, n = cfg.d_model, cfg.state_dim
    w = m.in_proj.weight.data
    gate, xs, Bw, Cw, dt = torch.split(w, m.split, 0)
    with torch.no_grad():
        m.in_proj.weight.copy_(torch.cat([gate[chan], xs[chan], Bw, Cw, dt[perm]], 0))
        m.A_log.copy_(m.A_log[perm])
        m.dt_bias.copy_(m.dt_bias[perm])
        m.out_proj.weight.copy_(m.out_proj.weight[:, chan])
    out, _ = block(x)
    assert float((out - ref).abs().max()) <= 1e-12


def test_block_finite_difference(f64):
    block = ssd.SsdBlock(small_cfg())
    block.eval()
    x = torch.randn(1, 6, 16)
    w = torch.randn(1, 6, 16)
    res = tg.gradient_check(lambda: tg.sum(block(x)[0] * w), list(block.parameters()), 20, 1e-6)
    assert max(r["rel_error"] for r in res) <= 1e-4


@pytest.mark.parametrize("kind", ["ssd", "gru"])
def test_backbone_step_matches_scan(kind, f64):
    net = ssd.SequenceBackbone(small_cfg(), 2, kind).eval()
    x = torch.randn(3, 12, 16)
    ref, final = net(x, "chunked")
    state = net.initial_state(3)
    outs = []
    for t in range(12):
        o, state = net.step(x[:, t], state)
        outs.append(o)
    assert float((torch.stack(outs, 1) - ref).abs().max()) <= 1e-10
    for a, b in zip(state.layers, final.layers):
        assert float((a - b).abs().max()) <= 1e-10


def test_backbone_modes_agree_and_state_is_length_independent(f64):
    net = ssd.SequenceBackbone(small_cfg(), 2).eval()
    shapes = set()
    for l in (5, 40):
        x = torch.randn(1, l, 16)
        outs = {m: net(x, m) for m in ssd.MODES}
        for m in ("recurrent", "quadratic"):
            assert float((outs[m][0] - outs["chunked"][0]).abs().max()) <= 1e-10
        shapes.add(tuple(s.shape for s in outs["chunked"][1].layers))
        assert outs["quadratic"][1] is None
    assert len(shapes) == 1


def test_dropout_only_in_training():
    net = ssd.SequenceBackbone(small_cfg(dropout=0.5), 1)
    x = torch.randn(1, 8, 16)
    net.eval()
    assert torch.equal(net(x)[0], net(x)[0])
    net.train()
    assert not torch.equal(net(x)[0], net(x)[0])
