from collections import Counter

import pytest
import torch
from hypothesis import given, settings, strategies as st

from p3lm.data import (
    EOS_ID,
    MASK_ID,
    NUM_SPECIALS,
    PAD_ID,
    SPECIALS,
    SpanMaskSpec,
    SpecError,
    Vocabulary,
    apply_span_mask,
    dataset_manifest,
    gen_synthetic,
    make_batches,
    restore_spans,
)
from p3lm.numerics import RngStream
from p3lm.order import OrderDistribution, OrderKind


def test_vocabulary_layout_and_round_trip(tmp_path):
    vocab = Vocabulary.from_corpus(["b a b", "c b a"])
    assert vocab.tokens[:NUM_SPECIALS] == list(SPECIALS)
    assert vocab.tokens[NUM_SPECIALS:] == ["b", "a", "c"]
    assert vocab.encode("a zz c") == [vocab.index["a"], SPECIALS.index("<unk>"), vocab.index["c"]]
    assert vocab.decode([vocab.index["c"], vocab.index["a"], EOS_ID, vocab.index["b"]]) == "c a"
    path = tmp_path / "vocab.txt"
    vocab.save(str(path))
    assert path.read_text() == "b\na\nc\n"
    assert Vocabulary.load(str(path)).tokens == vocab.tokens


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocabulary(["x", "x"])


def test_default_span_is_nine():
    assert SpanMaskSpec().span_len == 9


def test_degenerate_specs_rejected():
    with pytest.raises(SpecError):
        SpanMaskSpec(mask_frac=0.0)
    with pytest.raises(SpecError):
        SpanMaskSpec(replace_mask=0.5)
    with pytest.raises(SpecError):
        SpanMaskSpec(window=4, mask_frac=2.0)


def test_one_window_masks_nine_tokens():
    tokens = list(range(NUM_SPECIALS, NUM_SPECIALS + 64))
    ex = apply_span_mask(tokens, SpanMaskSpec(), RngStream(0), 100)
    assert len(ex.target) == 9 and len(ex.source) == 64
    u = ex.offsets[0]
    assert ex.target == tokens[u : u + 9]


@settings(max_examples=40, deadline=None)
@given(windows=st.integers(1, 4), tail=st.integers(0, 63), seed=st.integers(0, 10_000))
def test_span_mask_invariants(windows, tail, seed):
    spec = SpanMaskSpec()
    gen = RngStream(seed)
    tokens = [gen.integers(NUM_SPECIALS, 40) for _ in range(64 * windows + tail)]
    ex = apply_span_mask(tokens, spec, gen.split("mask"), 40)
    assert len(ex.source) == len(tokens)
    assert len(ex.target) == 9 * windows and len(ex.offsets) == windows
    for w, off in enumerate(ex.offsets):
        assert 64 * w <= off and off + 9 <= 64 * (w + 1)
    changed = [i for i, (a, b) in enumerate(zip(tokens, ex.source)) if a != b]
    covered = {i for off in ex.offsets for i in range(off, off + 9)}
    assert set(changed) <= covered
    assert restore_spans(ex, 9) == tokens


def test_replacement_proportions():
    spec = SpanMaskSpec()
    rng = RngStream(42)
    tokens = [NUM_SPECIALS] * (64 * 100)
    counts = Counter()
    while sum(counts.values()) < 100_000:
        counts.update(apply_span_mask(tokens, spec, rng, 1000).kinds)
    total = sum(counts.values())
    assert abs(counts["mask"] / total - 0.8) < 0.02
    assert abs(counts["random"] / total - 0.1) < 0.02
    assert abs(counts["keep"] / total - 0.1) < 0.02


def test_replacement_tokens():
    ex = apply_span_mask(list(range(NUM_SPECIALS, NUM_SPECIALS + 64)), SpanMaskSpec(), RngStream(3), 30)
    for kind, pos in zip(ex.kinds, range(ex.offsets[0], ex.offsets[0] + 9)):
        if kind == "mask":
            assert ex.source[pos] == MASK_ID
        elif kind == "random":
            assert NUM_SPECIALS <= ex.source[pos] < 30
        else:
            assert ex.source[pos] == ex.target[pos - ex.offsets[0]]


def test_partial_window_is_untouched():
    tokens = list(range(NUM_SPECIALS, NUM_SPECIALS + 50))
    ex = apply_span_mask(tokens, SpanMaskSpec(), RngStream(0), 100)
    assert ex.source == tokens and ex.target == []


@pytest.mark.parametrize("task", ["copy", "reverse", "infill"])
def test_synthetic_tasks(task):
    data = gen_synthetic(task, 32, (4, 16), 50, RngStream(1))
    assert len(data) == 50
    for ex in data:
        if task == "copy":
            assert ex.target == ex.source and 4 <= len(ex.source) <= 16
        elif task == "reverse":
            assert ex.target == ex.source[::-1]
        else:
            gap = ex.source.count(MASK_ID)
            assert gap == len(ex.target) >= 1
            at = ex.source.index(MASK_ID)
            assert ex.source[at : at + gap] == [MASK_ID] * gap
        assert all(NUM_SPECIALS <= t < 32 for t in ex.target)


def test_synthetic_rejects_small_vocab():
    with pytest.raises(ValueError):
        gen_synthetic("copy", 7, (1, 3), 1, RngStream(0))


def test_manifest_is_json():
    text = dataset_manifest("copy", 3, {"train": 10})
    assert '"task": "copy"' in text and text.endswith("\n")


def _stream(seed, dist, R=1, data=None):
    data = data or gen_synthetic("copy", 32, (2, 6), 10, RngStream(9))
    return list(make_batches(data, 4, dist, R, RngStream(seed)))


def test_batches_pad_at_tails():
    for b in _stream(0, OrderDistribution(OrderKind.URP)):
        for i in range(b.size):
            n_src = int(b.src_mask[i].sum())
            assert b.src_mask[i, :n_src].all() and not b.src_mask[i, n_src:].any()
            assert (b.src[i, n_src:] == PAD_ID).all()
            L = int(b.tgt_lengths[i])
            assert b.tgt[i, L - 1] == EOS_ID and (b.tgt[i, L:] == PAD_ID).all()
            assert b.orders[i][0].T == L


def test_batches_l2r_orders_are_identity():
    for b in _stream(0, OrderDistribution(OrderKind.L2R)):
        assert all(o[0].is_identity for o in b.orders)


def test_batches_deterministic_and_r2():
    dist = OrderDistribution(OrderKind.URP)
    a, b = _stream(5, dist), _stream(5, dist)
    assert all(torch.equal(x.tgt, y.tgt) and x.orders == y.orders for x, y in zip(a, b))
    two = _stream(5, dist, R=2)
    assert all(len(o) == 2 for batch in two for o in batch.orders)
    assert sum(batch.size for batch in two) == 10


def test_empty_dataset_yields_nothing():
    assert list(make_batches([], 4, OrderDistribution(), 1, RngStream(0))) == []
