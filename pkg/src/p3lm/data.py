"""Vocabulary, span-masking corruption, synthetic tasks and batching."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import torch

from .numerics import RngStream
from .order import DecodeOrder, OrderDistribution, sample_order

SPECIALS = ("<s>", "</s>", "[M]", "<pad>", "<unk>")
BOS_ID, EOS_ID, MASK_ID, PAD_ID, UNK_ID = range(len(SPECIALS))
NUM_SPECIALS = len(SPECIALS)


class SpecError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: List[str] = list(SPECIALS)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        for tok in tokens:
            if tok in self.index:
                if tok in SPECIALS:
                    continue
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> List[int]:
        return [self.index.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids: Sequence[int], strip: bool = True) -> str:
        out = []
        for i in ids:
            if strip and i == EOS_ID:
                break
            if strip and i in (BOS_ID, PAD_ID):
                continue
            out.append(self.tokens[i])
        return " ".join(out)

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        return cls(f"t{i}" for i in range(size - NUM_SPECIALS))

    @classmethod
    def from_corpus(cls, lines: Iterable[str], max_size: Optional[int] = None) -> "Vocabulary":
        counts = Counter(tok for line in lines for tok in line.split() if tok not in SPECIALS)
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - NUM_SPECIALS)]
        return cls(ranked)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens[NUM_SPECIALS:]) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path) as fh:
            return cls(line.strip() for line in fh if line.strip())


# ---------------------------------------------------------------------------
# span masking
# ---------------------------------------------------------------------------

KEEP, MASKED, RANDOM = "keep", "mask", "random"


@dataclass(frozen=True)
class SpanMaskSpec:
    window: int = 64
    mask_frac: float = 0.15
    replace_mask: float = 0.8
    replace_random: float = 0.1
    keep: float = 0.1

    def __post_init__(self):
        if abs(self.replace_mask + self.replace_random + self.keep - 1.0) > 1e-9:
            raise SpecError("replacement fractions must sum to 1")
        if self.span_len < 1:
            raise SpecError(f"span length {self.span_len} < 1: nothing would be masked")
        if self.window < self.span_len:
            raise SpecError(f"window {self.window} shorter than span {self.span_len}")

    @property
    def span_len(self) -> int:
        # 15% of a 64-token window is 9.6 tokens; the masked run is 9.
        return int(math.floor(self.mask_frac * self.window + 1e-9))


@dataclass
class MaskedExample:
    source: List[int]
    target: List[int]
    offsets: List[int]  # 0-based start of each masked span in the source
    kinds: List[str] = field(default_factory=list)  # replacement category per target token


def apply_span_mask(
    tokens: Sequence[int], spec: SpanMaskSpec, rng: RngStream, vocab_size: int
) -> MaskedExample:
    """Mask one contiguous run of ``spec.span_len`` tokens inside every full window.

    A trailing partial window is left untouched. Random replacements draw from
    the non-special part of the vocabulary.
    """
    if vocab_size <= NUM_SPECIALS:
        raise SpecError("vocabulary has no regular tokens for random replacement")
    source = list(tokens)
    target: List[int] = []
    offsets: List[int] = []
    kinds: List[str] = []
    span = spec.span_len
    for start in range(0, len(source) - spec.window + 1, spec.window):
        u = start + rng.integers(0, spec.window - span + 1)
        offsets.append(u)
        for i in range(u, u + span):
            target.append(source[i])
            r = rng.random()
            if r < spec.replace_mask:
                source[i] = MASK_ID
                kinds.append(MASKED)
            elif r < spec.replace_mask + spec.replace_random:
                source[i] = rng.integers(NUM_SPECIALS, vocab_size)
                kinds.append(RANDOM)
            else:
                kinds.append(KEEP)
    return MaskedExample(source, target, offsets, kinds)


def restore_spans(example: MaskedExample, span_len: int) -> List[int]:
    out = list(example.source)
    for k, off in enumerate(example.offsets):
        out[off : off + span_len] = example.target[k * span_len : (k + 1) * span_len]
    return out


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

TASKS = ("copy", "reverse", "infill")


@dataclass
class Example:
    source: List[int]
    target: List[int]


def gen_synthetic(
    task: str, vocab_size: int, len_range: Tuple[int, int], count: int, rng: RngStream
) -> List[Example]:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if vocab_size < 8:
        raise ValueError("synthetic tasks need vocab_size >= 8")
    lo, hi = len_range
    data = []
    for _ in range(count):
        n = rng.integers(lo, hi + 1)
        seq = [rng.integers(NUM_SPECIALS, vocab_size) for _ in range(n)]
        if task == "copy":
            data.append(Example(seq, list(seq)))
        elif task == "reverse":
            data.append(Example(seq, seq[::-1]))
        else:
            gap = rng.integers(1, max(1, n // 3) + 1)
            at = rng.integers(0, n - gap + 1)
            data.append(Example(seq[:at] + [MASK_ID] * gap + seq[at + gap :], seq[at : at + gap]))
    return data


def dataset_manifest(task: str, seed: int, counts: dict, **extra) -> str:
    return json.dumps({"task": task, "seed": seed, "counts": counts, **extra}, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    src: torch.Tensor  # (B, S)
    src_mask: torch.Tensor  # (B, S) bool
    tgt: torch.Tensor  # (B, T)
    tgt_lengths: torch.Tensor  # (B,)
    orders: List[List[DecodeOrder]]  # B x R

    @property
    def size(self) -> int:
        return self.src.shape[0]


def collate(
    examples: Sequence[Example], orders: Sequence[Sequence[DecodeOrder]], append_eos: bool = False
) -> Batch:
    targets = [list(ex.target) + ([EOS_ID] if append_eos else []) for ex in examples]
    S = max(len(ex.source) for ex in examples)
    T = max(1, max(len(t) for t in targets))
    src = torch.full((len(examples), S), PAD_ID, dtype=torch.long)
    tgt = torch.full((len(examples), T), PAD_ID, dtype=torch.long)
    for i, (ex, t) in enumerate(zip(examples, targets)):
        src[i, : len(ex.source)] = torch.tensor(ex.source, dtype=torch.long)
        if t:
            tgt[i, : len(t)] = torch.tensor(t, dtype=torch.long)
    src_mask = torch.zeros_like(src, dtype=torch.bool)
    for i, ex in enumerate(examples):
        src_mask[i, : len(ex.source)] = True
    lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    return Batch(src, src_mask, tgt, lengths, [list(o) for o in orders])


def make_batches(
    dataset: Sequence[Example],
    batch_size: int,
    dist: OrderDistribution,
    R: int,
    rng: RngStream,
    shuffle: bool = True,
    append_eos: bool = True,
) -> Iterator[Batch]:
    """One pass over ``dataset``; every instance gets ``R`` fresh orders."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if R < 1:
        raise ValueError("need at least one order per instance")
    order_rng = rng.split("orders")
    idx = list(range(len(dataset)))
    if shuffle:
        perm = rng.generator.permutation(len(idx))
        idx = [int(i) for i in perm]
    for start in range(0, len(idx), batch_size):
        chunk = [dataset[i] for i in idx[start : start + batch_size]]
        orders = [
            [sample_order(dist, len(ex.target) + int(append_eos), order_rng) for _ in range(R)]
            for ex in chunk
        ]
        yield collate(chunk, orders, append_eos)
