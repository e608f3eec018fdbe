import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from p3lm import numerics as nx
from p3lm.attention import AttentionConfig, ProjectionSet, attend, cross_attention, osa
from p3lm.order import DecodeOrder, build_masks


def _setup(dim=8, heads=2, seed=0, double=True):
    gen = torch.Generator().manual_seed(seed)
    proj = ProjectionSet(dim)
    proj.reset_parameters(gen)
    if double:
        proj = proj.double()
    return proj, AttentionConfig(dim, heads, dropout=0.0), gen


def _reference(q, k, v, proj, cfg):
    """Plain multi-head attention without masking."""
    outs = []
    Q, K, V = q @ proj.wq, k @ proj.wk, v @ proj.wv
    hd = cfg.head_dim
    for h in range(cfg.heads):
        sl = slice(h * hd, (h + 1) * hd)
        w = torch.softmax(Q[:, sl] @ K[:, sl].T / math.sqrt(hd), dim=-1)
        outs.append(w @ V[:, sl])
    return torch.cat(outs, dim=-1) @ proj.wo


def test_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        AttentionConfig(10, 3)
    cfg = AttentionConfig(16, 4)
    assert cfg.head_dim == 4 and cfg.scale == 0.5


def test_all_ones_mask_equals_standard_attention():
    proj, cfg, gen = _setup()
    q = torch.randn(4, 8, dtype=torch.float64, generator=gen)
    k = torch.randn(6, 8, dtype=torch.float64, generator=gen)
    out = osa(q, k, k, torch.ones(4, 6, dtype=torch.bool), proj, cfg)
    assert torch.allclose(out, _reference(q, k, k, proj, cfg), atol=1e-12)


def test_single_allowed_column_returns_projected_value():
    proj, cfg, gen = _setup()
    q = torch.randn(3, 8, dtype=torch.float64, generator=gen)
    k = torch.randn(5, 8, dtype=torch.float64, generator=gen)
    mask = torch.zeros(3, 5, dtype=torch.bool)
    mask[1, 3] = True
    mask[[0, 2], :] = True
    out = osa(q, k, k, mask, proj, cfg)
    assert torch.allclose(out[1], (k[3] @ proj.wv) @ proj.wo, atol=1e-12)


def test_fully_masked_row_rejected():
    proj, cfg, gen = _setup()
    x = torch.randn(2, 8, dtype=torch.float64, generator=gen)
    with pytest.raises(nx.InvalidMaskError):
        osa(x, x, x, torch.tensor([[1, 0], [0, 0]], dtype=torch.bool), proj, cfg)


def test_mask_shape_mismatch_rejected():
    proj, cfg, gen = _setup()
    x = torch.randn(2, 8, dtype=torch.float64, generator=gen)
    with pytest.raises(nx.DimensionError):
        osa(x, x, x, torch.ones(2, 3, dtype=torch.bool), proj, cfg)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 5), N=st.integers(1, 3), seed=st.integers(0, 10_000), data=st.data())
def test_leakage_exact_for_order_masks(T, N, seed, data):
    z = tuple(data.draw(st.permutations(list(range(1, T + 1)))))
    m = build_masks(DecodeOrder(z), N)
    proj, cfg, gen = _setup(seed=seed, double=False)
    n = data.draw(st.integers(0, N - 1))
    mask = torch.from_numpy(m.query[n]).bool()
    q = torch.randn(T, 8, generator=gen)
    kv = torch.randn(2 * T + 1, 8, generator=gen)
    base = osa(q, kv, kv, mask, proj, cfg)
    poked = kv.clone()
    blocked = ~mask.any(0)
    poked[blocked] += 100 * torch.randn(int(blocked.sum()), 8, generator=gen)
    assert torch.equal(base, osa(q, poked, poked, mask, proj, cfg))
    # per row: keys that row cannot see
    for t in range(T):
        hidden = ~mask[t]
        if hidden.any():
            p2 = kv.clone()
            p2[hidden] = torch.randn(int(hidden.sum()), 8, generator=gen) * 50
            assert torch.equal(base[t], osa(q, p2, p2, mask, proj, cfg)[t])


@settings(max_examples=30, deadline=None)
@given(lq=st.integers(1, 6), lk=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_weights_properties(lq, lk, seed):
    proj, cfg, gen = _setup(seed=seed)
    q = torch.randn(lq, 8, dtype=torch.float64, generator=gen)
    k = torch.randn(lk, 8, dtype=torch.float64, generator=gen)
    mask = torch.rand(lq, lk, generator=gen) < 0.5
    mask[:, -1] = True
    _, w = attend(q, k, k, mask, proj, cfg, return_weights=True)
    assert w.shape == (cfg.heads, lq, lk)
    assert torch.all(w >= 0)
    assert torch.all(w[:, ~mask] == 0)
    assert torch.allclose(w.sum(-1), torch.ones(cfg.heads, lq, dtype=torch.float64), atol=1e-6)


def test_cross_attention_single_source_token():
    proj, cfg, gen = _setup()
    q = torch.randn(3, 8, dtype=torch.float64, generator=gen)
    mem = torch.randn(1, 8, dtype=torch.float64, generator=gen)
    out = cross_attention(q, mem, torch.ones(1, dtype=torch.bool), proj, cfg)
    expected = (mem[0] @ proj.wv) @ proj.wo
    assert torch.allclose(out, expected.expand(3, 8), atol=1e-12)


def test_cross_attention_shape_contract():
    proj, cfg, gen = _setup()
    out = cross_attention(
        torch.randn(1, 8, dtype=torch.float64, generator=gen),
        torch.randn(4, 8, dtype=torch.float64, generator=gen),
        torch.ones(4, dtype=torch.bool),
        proj,
        cfg,
    )
    assert out.shape == (1, 8)


def test_cross_attention_padding_invariance():
    proj, cfg, gen = _setup()
    q = torch.randn(3, 8, dtype=torch.float64, generator=gen)
    mem = torch.randn(3, 8, dtype=torch.float64, generator=gen)
    short = cross_attention(q, mem, torch.ones(3, dtype=torch.bool), proj, cfg)
    padded_mem = torch.cat([mem, torch.zeros(2, 8, dtype=torch.float64)])
    pad = torch.tensor([1, 1, 1, 0, 0], dtype=torch.bool)
    assert torch.equal(short, cross_attention(q, padded_mem, pad, proj, cfg))


def test_cross_attention_all_padded_rejected():
    proj, cfg, gen = _setup()
    x = torch.randn(2, 8, dtype=torch.float64, generator=gen)
    with pytest.raises(nx.InvalidMaskError):
        cross_attention(x, x, torch.zeros(2, dtype=torch.bool), proj, cfg)


def test_osa_gradients_match_finite_differences():
    proj, cfg, gen = _setup(seed=3)
    m = build_masks(DecodeOrder((3, 1, 4, 2)), 2)
    mask = torch.from_numpy(m.query[1]).bool()
    q = torch.randn(4, 8, dtype=torch.float64, generator=gen, requires_grad=True)
    kv = torch.randn(9, 8, dtype=torch.float64, generator=gen, requires_grad=True)
    w = torch.randn(4, 8, dtype=torch.float64, generator=gen)

    def f():
        return (osa(q, kv, kv, mask, proj, cfg) * w).sum()

    params = {"q": q, "kv": kv, "wq": proj.wq, "wk": proj.wk, "wv": proj.wv, "wo": proj.wo}
    rep = nx.grad_check(f, params, step=1e-6, tolerance=1e-4, floor=1e-6)
    assert rep.passed, rep.worst


def test_dropout_only_in_training_and_seeded():
    proj, _, gen = _setup()
    cfg = AttentionConfig(8, 2, dropout=0.5)
    x = torch.randn(5, 8, dtype=torch.float64, generator=gen)
    mask = torch.ones(5, 5, dtype=torch.bool)
    assert torch.equal(osa(x, x, x, mask, proj, cfg), osa(x, x, x, mask, proj, cfg))
    a = osa(x, x, x, mask, proj, cfg, training=True, generator=torch.Generator().manual_seed(1))
    b = osa(x, x, x, mask, proj, cfg, training=True, generator=torch.Generator().manual_seed(1))
    assert torch.equal(a, b) and not torch.equal(a, osa(x, x, x, mask, proj, cfg))
