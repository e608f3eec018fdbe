import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from p3lm.numerics import RngStream
from p3lm.oracles import brute_force_masks
from p3lm.order import (
    Branch,
    DecodeOrder,
    EmptySequenceError,
    OrderDistribution,
    OrderError,
    OrderKind,
    build_masks,
    dump_masks,
    log_prior,
    parse_masks,
    parse_order,
    sample_order,
    step_index,
)


def order(*z):
    return parse_order(" ".join(map(str, z)))


def test_decode_order_validation():
    with pytest.raises(OrderError):
        DecodeOrder((1, 1, 2))
    with pytest.raises(OrderError):
        DecodeOrder((2, 1), Branch.L2R)
    assert DecodeOrder((1, 2, 3), Branch.URP).is_identity


def test_sample_l2r_is_identity():
    o = sample_order(OrderDistribution(OrderKind.L2R), 4, RngStream(0))
    assert o.z == (1, 2, 3, 4) and o.branch is Branch.L2R


def test_sample_rejects_empty():
    with pytest.raises(EmptySequenceError):
        sample_order(OrderDistribution(OrderKind.URP), 0, RngStream(0))


def test_urp_uniform_chi_square():
    rng = RngStream(11)
    dist = OrderDistribution(OrderKind.URP)
    counts = Counter(sample_order(dist, 3, rng).z for _ in range(60_000))
    assert len(counts) == 6
    stat = sum((c - 10_000) ** 2 / 10_000 for c in counts.values())
    assert stat < chi2.ppf(0.999, df=5)


def test_alpha_identity_frequency():
    rng = RngStream(5)
    dist = OrderDistribution(OrderKind.ALPHA, 0.5)
    draws = [sample_order(dist, 3, rng) for _ in range(60_000)]
    freq = sum(o.is_identity for o in draws) / len(draws)
    assert abs(freq - (0.5 + 0.5 / 6)) < 0.01
    # branch records the mixture component, not the permutation
    urp_identity = sum(o.is_identity and o.branch is Branch.URP for o in draws)
    assert urp_identity > 0
    assert abs(sum(o.branch is Branch.L2R for o in draws) / len(draws) - 0.5) < 0.01


def test_step_index_examples():
    assert step_index(order(2, 1, 3)) == {1: 2, 2: 1, 3: 3}
    assert step_index(order(1, 2, 3)) == {1: 1, 2: 2, 3: 3}
    assert step_index(order(3, 1, 2)) == {1: 2, 2: 3, 3: 1}


@given(st.permutations(list(range(1, 7))))
def test_step_index_is_inverse(z):
    inv = step_index(DecodeOrder(tuple(z)))
    assert all(z[inv[p] - 1] == p for p in z)


def allowed(row):
    return {i for i, v in enumerate(row) if v}


def test_masks_identity_is_causal():
    T = 4
    m = build_masks(DecodeOrder.identity(T), 1)
    assert np.array_equal(m.main, np.tril(np.ones((T + 1, T + 1), dtype=np.uint8)))
    for t in range(1, T + 1):
        assert allowed(m.query[0, t - 1]) == set(range(t)) | {T + t}
    strict = np.tril(np.ones((T, T), dtype=np.uint8), k=-1)
    assert np.array_equal(m.query[0][:, 1 : T + 1], strict)


def test_masks_figure_configuration():
    T = 3
    m = build_masks(order(2, 1, 3), 2)
    s = lambda *cols: set(cols)  # noqa: E731
    # query stream 1, steps 1..3
    assert [allowed(r) for r in m.query[0]] == [s(0, T + 1), s(0, 2, T + 2), s(0, 2, 1, T + 3)]
    # query stream 2
    assert [allowed(r) for r in m.query[1]] == [s(0, T + 1), s(0, T + 2), s(0, 2, T + 3)]
    # main rows for <s>, y1, y2, y3
    assert [allowed(r) for r in m.main] == [s(0), s(0, 2, 1), s(0, 2), s(0, 2, 1, 3)]


def test_empty_context_rows():
    for z in itertools.permutations(range(1, 5)):
        m = build_masks(DecodeOrder(z), 3)
        for n in range(1, 4):
            for t in range(1, n + 1):
                assert allowed(m.query[n - 1, t - 1]) == {0, 4 + t}


def test_masks_match_brute_force_all_small_orders():
    for T in range(1, 7):
        for z in itertools.permutations(range(1, T + 1)):
            m = build_masks(DecodeOrder(z), 2)
            main, query = brute_force_masks(z, 2)
            assert np.array_equal(m.main, main) and np.array_equal(m.query, query), z


@settings(max_examples=100)
@given(st.integers(1, 6).flatmap(lambda T: st.permutations(list(range(1, T + 1)))), st.integers(1, 4))
def test_mask_invariants(z, N):
    T = len(z)
    m = build_masks(DecodeOrder(tuple(z)), N)
    assert allowed(m.main[0]) == {0}
    assert m.main[:, 0].all() and m.query[:, :, 0].all()
    assert m.main.any(1).all() and m.query.any(2).all()
    for n in range(N):
        for t in range(1, T + 1):
            ph = m.query[n, t - 1, T + 1 :]
            assert ph[t - 1] == 1 and ph.sum() == 1
            if n + 1 < N:
                # monotone: stream n+1 sees a subset of stream n's main columns
                assert np.all(m.query[n + 1, t - 1, : T + 1] <= m.query[n, t - 1, : T + 1])


def test_log_prior_values():
    urp = OrderDistribution(OrderKind.URP)
    assert log_prior(urp, order(2, 3, 1)) == pytest.approx(math.log(1 / 6))
    assert log_prior(OrderDistribution(OrderKind.L2R), order(1, 2, 3)) == 0.0
    assert log_prior(OrderDistribution(OrderKind.L2R), order(2, 1, 3)) == -math.inf
    alpha = OrderDistribution(OrderKind.ALPHA, 0.5)
    assert log_prior(alpha, order(3, 2, 1)) == pytest.approx(math.log(0.5 / 6))
    assert log_prior(alpha, order(1, 2, 3)) == pytest.approx(math.log(0.5 + 0.5 / 6))


def test_order_distribution_parse():
    assert OrderDistribution.parse("urp").kind is OrderKind.URP
    d = OrderDistribution.parse("alpha:0.25")
    assert d.kind is OrderKind.ALPHA and d.alpha == 0.25
    with pytest.raises(ValueError):
        OrderDistribution(OrderKind.ALPHA, 1.5)


@pytest.mark.parametrize("T", [1, 3, 5])
def test_dump_parse_round_trip(T):
    rng = RngStream(T)
    o = sample_order(OrderDistribution(OrderKind.URP), T, rng)
    m = build_masks(o, 2)
    text = dump_masks(m)
    back = parse_masks(text)
    assert back == m and back.order.z == o.z
    assert dump_masks(back) == text


def test_dump_format_minimal():
    text = dump_masks(build_masks(order(1), 1))
    assert text == "1 1\n1\n1 0\n1 1\n\n1 0 1\n"


def test_parse_rejects_malformed():
    good = dump_masks(build_masks(order(2, 1), 1))
    with pytest.raises(OrderError):
        parse_masks(good.rstrip("\n"))
    with pytest.raises(OrderError):
        parse_masks(good.replace("\n\n", "\n"))
    with pytest.raises(OrderError):
        parse_order("1 x 2")
