import pytest
from hypothesis import given, strategies as st

from p3lm.metrics import UndefinedMetricError, exact_match, lcs_length, rouge_l, token_accuracy


def test_rouge_identical():
    assert rouge_l("a b c".split(), "a b c".split()).f == 1.0


def test_rouge_disjoint():
    r = rouge_l(["x", "y"], ["a", "b"])
    assert (r.precision, r.recall, r.f) == (0.0, 0.0, 0.0)


def test_rouge_hand_case():
    r = rouge_l(["a", "c"], ["a", "b", "c"])
    assert lcs_length(["a", "c"], ["a", "b", "c"]) == 2
    assert r.precision == 1.0 and r.recall == pytest.approx(2 / 3)
    assert r.f == pytest.approx(2 * (2 / 3) / (1 + 2 / 3))


def test_rouge_empty_reference():
    with pytest.raises(UndefinedMetricError):
        rouge_l(["a"], [])


@given(st.lists(st.integers(0, 4), max_size=8), st.lists(st.integers(0, 4), min_size=1, max_size=8))
def test_lcs_bounds(a, b):
    n = lcs_length(a, b)
    assert n <= min(len(a), len(b)) and n == lcs_length(b, a)
    assert 0.0 <= rouge_l(a, b).f <= 1.0


def test_accuracy_and_exact_match():
    cands = [[1, 2, 3], [4, 5]]
    refs = [[1, 2, 3], [4, 6, 7]]
    assert token_accuracy(cands, refs) == pytest.approx(4 / 6)
    assert exact_match(cands, refs) == 0.5
    with pytest.raises(UndefinedMetricError):
        exact_match([], [])
