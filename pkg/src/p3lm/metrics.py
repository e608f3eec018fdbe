"""Token-level ROUGE-L, token accuracy and exact match."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class RougeL:
    precision: float
    recall: float
    f: float


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = 1.0) -> RougeL:
    if not reference:
        raise UndefinedMetricError("ROUGE-L is undefined for an empty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return RougeL(0.0, 0.0, 0.0)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    f = (1 + beta**2) * p * r / (r + beta**2 * p)
    return RougeL(p, r, f)


def token_accuracy(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Fraction of reference positions whose token the candidate reproduces in place."""
    total = sum(len(r) for r in references)
    if total == 0:
        raise UndefinedMetricError("token accuracy is undefined without reference tokens")
    hits = sum(
        sum(1 for i, tok in enumerate(ref) if i < len(cand) and cand[i] == tok)
        for cand, ref in zip(candidates, references)
    )
    return hits / total


def exact_match(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    if not references:
        raise UndefinedMetricError("exact match is undefined for an empty set")
    return sum(list(c) == list(r) for c, r in zip(candidates, references)) / len(references)
