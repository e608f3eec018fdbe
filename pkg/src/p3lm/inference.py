"""Left-to-right beam search on query stream 1, plus teacher-forced scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Protocol, Sequence, Tuple

import numpy as np
import torch

from .data import EOS_ID
from .model import P3LM, DecoderCache, pad_masks
from .order import DecodeOrder, build_masks


@dataclass(frozen=True)
class BeamConfig:
    beam: int = 5
    length_penalty: float = 1.2
    min_len: int = 1
    max_len: int = 32

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.min_len > self.max_len:
            raise ValueError("min_len must not exceed max_len")


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float
    finished: bool
    truncated: bool = False  # hit max_len without emitting </s>

    def score(self, gamma: float) -> float:
        return length_normalized(self.log_prob, len(self.tokens), gamma)


def length_normalized(log_prob: float, length: int, gamma: float) -> float:
    """``log_prob / length ** gamma``."""
    return log_prob / (max(length, 1) ** gamma)


def rank_key(h: Hypothesis, gamma: float):
    return (-h.score(gamma), h.tokens)


class StepScorer(Protocol):
    vocab_size: int

    def next_log_probs(self, prefix: Tuple[int, ...]) -> np.ndarray:
        """Log-probabilities (V,) of the next token after ``prefix``."""


class ModelScorer:
    """Adapts a model + source to :class:`StepScorer`, memoising prefix caches."""

    def __init__(self, model: P3LM, source: Sequence[int]):
        self.model = model
        self.vocab_size = model.cfg.vocab
        with torch.no_grad():
            self.enc = model.encode(torch.as_tensor(list(source), dtype=torch.long).unsqueeze(0))
        self._caches: Dict[Tuple[int, ...], DecoderCache] = {}

    def next_log_probs(self, prefix: Tuple[int, ...]) -> np.ndarray:
        parent = self._caches.get(prefix[:-1]) if prefix else None
        with torch.no_grad():
            logits, cache = self.model.incremental_step(
                torch.as_tensor(list(prefix), dtype=torch.long).reshape(1, -1), parent, self.enc
            )
        self._caches[prefix] = cache
        return torch.log_softmax(logits[0].double(), dim=-1).numpy()


def beam_search(scorer: StepScorer, cfg: BeamConfig, eos: int = EOS_ID) -> List[Hypothesis]:
    """Ranked finished hypotheses, best first.

    Each step expands every live hypothesis over the full vocabulary and keeps
    the top ``width`` candidates in (log-prob, token ids) order. Kept
    candidates ending in ``</s>`` (or reaching ``max_len``, flagged
    ``truncated``) are finished and give up their slot, so the beam narrows
    as hypotheses complete and ``beam=1`` is exactly greedy decoding.
    ``</s>`` is suppressed below ``min_len``.

    Search also stops once no live hypothesis can overtake the best finished
    one: log-probs never increase, so a live score is bounded by
    ``log_prob / max_len ** gamma``.
    """
    if cfg.beam > scorer.vocab_size:
        raise ValueError(f"beam {cfg.beam} exceeds vocabulary size {scorer.vocab_size}")
    gamma = cfg.length_penalty
    width = cfg.beam
    live: List[Hypothesis] = [Hypothesis((), 0.0, False)]
    finished: List[Hypothesis] = []
    for length in range(1, cfg.max_len + 1):
        candidates = []
        for hyp in live:
            logp = scorer.next_log_probs(hyp.tokens)
            for tok in range(scorer.vocab_size):
                if tok == eos and length < cfg.min_len:
                    continue
                candidates.append((hyp.log_prob + float(logp[tok]), hyp.tokens + (tok,)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for lp, toks in candidates[:width]:
            if toks[-1] == eos:
                finished.append(Hypothesis(toks, lp, True))
            elif length == cfg.max_len:
                finished.append(Hypothesis(toks, lp, True, truncated=True))
            else:
                live.append(Hypothesis(toks, lp, False))
        width = len(live)
        if not live:
            break
        if finished:
            best = max(h.score(gamma) for h in finished)
            if all(length_normalized(h.log_prob, cfg.max_len, gamma) < best for h in live):
                break
    return sorted(finished, key=lambda h: rank_key(h, gamma))


def greedy_decode(scorer: StepScorer, max_len: int, min_len: int = 1, eos: int = EOS_ID) -> Tuple[int, ...]:
    out: Tuple[int, ...] = ()
    while len(out) < max_len:
        logp = np.array(scorer.next_log_probs(out), dtype=float)
        if len(out) + 1 < min_len:
            logp[eos] = -np.inf
        tok = int(np.argmax(logp))
        out += (tok,)
        if tok == eos:
            break
    return out


def generate(model: P3LM, source: Sequence[int], cfg: BeamConfig) -> Hypothesis:
    return beam_search(ModelScorer(model, source), cfg)[0]


def score_sequence(
    model: P3LM, source: Sequence[int], target: Sequence[int], order: DecodeOrder, n: int = 1
) -> float:
    """Sum over steps of log p(y_{z_t} | y_{z<=t-n}, X) from one teacher-forced pass."""
    if not target:
        raise ValueError("target must contain at least one token")
    if not 1 <= n <= model.cfg.streams:
        raise ValueError(f"stream {n} outside 1..{model.cfg.streams}")
    T = len(target)
    if order.T != T:
        raise ValueError(f"order length {order.T} != target length {T}")
    with torch.no_grad():
        enc = model.encode(torch.as_tensor(list(source), dtype=torch.long).unsqueeze(0))
        y = torch.as_tensor(list(target), dtype=torch.long).unsqueeze(0)
        masks = pad_masks([build_masks(order, model.cfg.streams)], T, model.cfg.streams)
        logits = model.decode(y, masks, enc)[0, n - 1].double()  # (T, V)
        gold = y[0, masks.positions[0] - 1]
        logp = torch.log_softmax(logits, dim=-1).gather(-1, gold.unsqueeze(-1))
    return float(logp.sum())
