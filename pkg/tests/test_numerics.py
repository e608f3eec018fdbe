import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from p3lm import numerics as nx


def test_matmul_identity_and_hand_case():
    a = torch.randn(3, 3)
    assert torch.equal(nx.matmul(torch.eye(3), a), a)
    out = nx.matmul(torch.tensor([[1.0, 2.0], [3.0, 4.0]]), torch.tensor([[0.0], [1.0]]))
    assert out.tolist() == [[2.0], [4.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_matmul_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    A = torch.randn(3, 4, dtype=torch.float64, generator=gen, requires_grad=True)
    B = torch.randn(4, 2, dtype=torch.float64, generator=gen)
    nx.matmul(A, B).sum().backward()
    # d sum(AB) / dA[i, k] = sum_j B[k, j]
    assert torch.allclose(A.grad, B.sum(1).expand(3, 4))
    rep = nx.grad_check(lambda: nx.matmul(A, B).sum(), {"A": A}, step=1e-3)
    assert rep.passed and rep.checked == 12


def test_masked_softmax_cases():
    p = nx.masked_softmax(torch.tensor([0.0, 0.0]), torch.tensor([1, 1]))
    assert p.tolist() == [0.5, 0.5]
    p = nx.masked_softmax(torch.tensor([5.0, 100.0]), torch.tensor([1, 0]))
    assert p[1].item() == 0.0 and p[0].item() == 1.0
    s = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    expected = [v / sum(e) for v in e]
    assert np.allclose(nx.masked_softmax(s, torch.ones(3)).numpy(), expected, atol=1e-12)


def test_masked_softmax_rejects_empty_row():
    with pytest.raises(nx.InvalidMaskError):
        nx.masked_softmax(torch.zeros(2, 3), torch.tensor([[1, 0, 0], [0, 0, 0]]))


@settings(max_examples=50, deadline=None)
@given(rows=st.integers(1, 8), cols=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_masked_softmax_properties(rows, cols, seed):
    gen = torch.Generator().manual_seed(seed)
    scores = torch.randn(rows, cols, generator=gen) * 10
    mask = torch.rand(rows, cols, generator=gen) < 0.5
    mask[torch.arange(rows), torch.randint(0, cols, (rows,), generator=gen)] = True
    p = nx.masked_softmax(scores, mask)
    assert torch.all(p[~mask] == 0.0)
    assert torch.allclose(p.sum(-1), torch.ones(rows), atol=1e-6)


def test_layer_norm_constant_vector_is_zero():
    out = nx.layer_norm(torch.full((5,), 3.0), torch.ones(5), torch.zeros(5))
    assert torch.equal(out, torch.zeros(5))


def test_cross_entropy_confident_row():
    logits = torch.tensor([[50.0, 0.0, 0.0]])
    assert nx.cross_entropy_from_logits(logits, torch.tensor([0])).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_non_finite_raises():
    with pytest.raises(nx.NumericError, match="cross_entropy"):
        nx.cross_entropy_from_logits(torch.tensor([[float("nan"), 0.0]]), torch.tensor([0]))


def test_embedding_lookup_range():
    table = torch.arange(6.0).reshape(3, 2)
    assert nx.embedding_lookup(table, torch.tensor([2, 0])).tolist() == [[4.0, 5.0], [0.0, 1.0]]
    with pytest.raises(nx.DimensionError):
        nx.embedding_lookup(table, torch.tensor([3]))


def _toy_net(seed):
    gen = torch.Generator().manual_seed(seed)
    p = {
        "w1": torch.randn(4, 6, dtype=torch.float64, generator=gen, requires_grad=True),
        "g": (1 + 0.1 * torch.randn(6, dtype=torch.float64, generator=gen)).requires_grad_(),
        "b": (0.1 * torch.randn(6, dtype=torch.float64, generator=gen)).requires_grad_(),
        "w2": torch.randn(6, 3, dtype=torch.float64, generator=gen, requires_grad=True),
    }
    x = torch.randn(5, 4, dtype=torch.float64, generator=gen)
    y = torch.tensor([0, 2, 1, 1, 0])

    def f():
        h = nx.gelu(nx.layer_norm(nx.matmul(x, p["w1"]), p["g"], p["b"]))
        return nx.cross_entropy_from_logits(nx.matmul(h, p["w2"]), y).mean()

    return f, p


def test_grad_check_two_layer_network():
    f, params = _toy_net(0)
    rep = nx.grad_check(f, params, step=1e-5, tolerance=1e-4)
    assert rep.passed, rep.worst
    assert rep.checked == sum(v.numel() for v in params.values())


@settings(max_examples=15, deadline=None)
@given(m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_masked_attention_gradients_random_shapes(m, k, n, seed):
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(m, k, dtype=torch.float64, generator=gen, requires_grad=True)
    kk = torch.randn(n, k, dtype=torch.float64, generator=gen, requires_grad=True)
    mask = torch.rand(m, n, generator=gen) < 0.6
    mask[:, 0] = True
    w = torch.randn(m, n, dtype=torch.float64, generator=gen)

    def f():
        return (nx.masked_softmax(nx.matmul(q, kk.t()), mask) * w).sum()

    rep = nx.grad_check(f, {"q": q, "k": kk}, step=1e-5, tolerance=1e-4, floor=1e-6)
    assert rep.passed, rep.worst


def test_rng_stream_reproducible_and_split_independent():
    a, b = nx.RngStream(7), nx.RngStream(7)
    assert [a.integers(0, 1000) for _ in range(20)] == [b.integers(0, 1000) for _ in range(20)]
    parent = nx.RngStream(7)
    child1 = parent.split("orders")
    draws = [child1.random() for _ in range(5)]
    parent2 = nx.RngStream(7)
    parent2.split("masking").random()  # another consumer draws
    assert [parent2.split("orders").random() for _ in range(1)][0] == draws[0]
    assert nx.RngStream(7).split("x").random() != nx.RngStream(8).split("x").random()


def test_rng_counter_resume():
    r = nx.RngStream(3)
    first = [r.generator.random() for _ in range(4)]
    resumed = nx.RngStream(3, counter=r.counter)
    more = r.generator.random()
    assert resumed.generator.random() == more
    assert first[0] == nx.RngStream(3).generator.random()


def test_checkpoint_round_trip_and_layout(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "bias": np.array([1.5], dtype=np.float32)}
    path = tmp_path / "c.bin"
    nx.save_arrays(str(path), arrays)
    blob = path.read_bytes()
    assert blob[:8] == b"P3LMCKPT" and len(blob) == 16 + (8 + 1 + 8 + 16 + 24) + (8 + 4 + 8 + 8 + 4)
    # first entry: name length, name, rank, dims
    assert int.from_bytes(blob[16:24], "little") == 1 and blob[24:25] == b"a"
    assert int.from_bytes(blob[25:33], "little") == 2
    back = nx.load_arrays(str(path))
    assert list(back) == ["a", "bias"]
    assert np.array_equal(back["a"], arrays["a"])


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(nx.CheckpointError):
        nx.decode_arrays(b"not a checkpoint at all")
    blob = nx.encode_arrays({"w": np.ones((4, 4), dtype=np.float32)})
    with pytest.raises(nx.CheckpointError):
        nx.decode_arrays(blob[:-10])
