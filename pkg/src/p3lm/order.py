"""Decode orders, order priors and the relative-order attention masks.

Slot conventions used throughout the package:

* main-stream slots ``0..T`` -- slot 0 is ``<s>``, slot ``p`` holds target token ``y_p``;
* query-stream keys ``0..2T`` -- columns ``0..T`` are the main-stream slots and
  column ``T + t`` is the placeholder of decode step ``t`` in the same stream.

Positions and decode steps are 1-based, matching the way orders are written.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .numerics import RngStream


class Branch(str, enum.Enum):
    L2R = "L2R"
    URP = "URP"


class OrderKind(str, enum.Enum):
    L2R = "L2R"
    URP = "URP"
    ALPHA = "Alpha"


class EmptySequenceError(ValueError):
    pass


class OrderError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeOrder:
    """``z[t-1]`` is the absolute position decoded at step ``t``."""

    z: Tuple[int, ...]
    branch: Branch = Branch.URP

    def __post_init__(self):
        z = tuple(int(v) for v in self.z)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "branch", Branch(self.branch))
        if sorted(z) != list(range(1, len(z) + 1)):
            raise OrderError(f"not a permutation of 1..{len(z)}: {list(z)}")
        if self.branch is Branch.L2R and not self.is_identity:
            raise OrderError("an L2R-branch order must be the identity")

    @property
    def T(self) -> int:
        return len(self.z)

    @property
    def is_identity(self) -> bool:
        return all(p == t for t, p in enumerate(self.z, start=1))

    @classmethod
    def identity(cls, T: int) -> "DecodeOrder":
        return cls(tuple(range(1, T + 1)), Branch.L2R)


@dataclass(frozen=True)
class OrderDistribution:
    kind: OrderKind = OrderKind.ALPHA
    alpha: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", OrderKind(self.kind))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def parse(cls, text: str, alpha: float = 0.5) -> "OrderDistribution":
        """Accepts ``l2r``, ``urp``, ``alpha`` or ``alpha:0.3``."""
        name, _, value = text.strip().partition(":")
        lookup = {k.value.lower(): k for k in OrderKind}
        if name.lower() not in lookup:
            raise ValueError(f"unknown order distribution {text!r}")
        return cls(lookup[name.lower()], float(value) if value else alpha)


def _fisher_yates(T: int, rng: RngStream) -> List[int]:
    z = list(range(1, T + 1))
    for i in range(T - 1, 0, -1):
        j = rng.integers(0, i + 1)
        z[i], z[j] = z[j], z[i]
    return z


def sample_order(dist: OrderDistribution, T: int, rng: RngStream) -> DecodeOrder:
    if T < 1:
        raise EmptySequenceError("cannot sample an order for an empty sequence")
    if dist.kind is OrderKind.L2R:
        return DecodeOrder.identity(T)
    if dist.kind is OrderKind.ALPHA and rng.random() < dist.alpha:
        return DecodeOrder.identity(T)
    return DecodeOrder(tuple(_fisher_yates(T, rng)), Branch.URP)


def step_index(order: DecodeOrder) -> Dict[int, int]:
    """Inverse permutation: position ``p`` -> step ``t`` with ``z_t = p``."""
    return {p: t for t, p in enumerate(order.z, start=1)}


def log_prior(dist: OrderDistribution, order: DecodeOrder) -> float:
    log_uniform = -math.lgamma(order.T + 1)
    if dist.kind is OrderKind.L2R:
        return 0.0 if order.is_identity else -math.inf
    if dist.kind is OrderKind.URP:
        return log_uniform
    p = (1.0 - dist.alpha) * math.exp(log_uniform)
    if order.is_identity:
        p += dist.alpha
    return math.log(p) if p > 0 else -math.inf


@dataclass
class RelativeOrderMasks:
    """``main``: (T+1)x(T+1); ``query``: N x T x (2T+1); uint8 0/1 entries."""

    T: int
    N: int
    main: np.ndarray
    query: np.ndarray
    order: Optional[DecodeOrder] = None

    def __eq__(self, other):
        if not isinstance(other, RelativeOrderMasks):
            return NotImplemented
        return (
            self.T == other.T
            and self.N == other.N
            and np.array_equal(self.main, other.main)
            and np.array_equal(self.query, other.query)
        )


def build_masks(order: DecodeOrder, N: int) -> RelativeOrderMasks:
    if N < 1:
        raise ValueError("need at least one query stream")
    T = order.T
    step = np.zeros(T + 1, dtype=np.int64)
    step[1:] = np.argsort(np.asarray(order.z)) + 1  # step[p] = t(p)

    main = np.zeros((T + 1, T + 1), dtype=np.uint8)
    main[:, 0] = 1
    main[1:, 1:] = step[None, 1:] <= step[1:, None]

    query = np.zeros((N, T, 2 * T + 1), dtype=np.uint8)
    query[:, :, 0] = 1
    rows = np.arange(1, T + 1)
    for n in range(1, N + 1):
        query[n - 1, :, 1 : T + 1] = step[None, 1:] <= (rows[:, None] - n)
        query[n - 1, rows - 1, T + rows] = 1
    return RelativeOrderMasks(T, N, main, query, order)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def dump_masks(masks: RelativeOrderMasks) -> str:
    if masks.order is None:
        raise OrderError("masks carry no order to dump")
    lines = [f"{masks.T} {masks.N}", " ".join(str(p) for p in masks.order.z)]
    blocks = [masks.main] + [masks.query[n] for n in range(masks.N)]
    for i, block in enumerate(blocks):
        if i:
            lines.append("")
        lines.extend(" ".join(str(int(v)) for v in row) for row in block)
    return "\n".join(lines) + "\n"


def parse_masks(text: str) -> RelativeOrderMasks:
    if not text.endswith("\n"):
        raise OrderError("mask dump must end with a newline")
    lines = text[:-1].split("\n")
    try:
        T, N = (int(v) for v in lines[0].split(" "))
        z = tuple(int(v) for v in lines[1].split(" "))
    except (ValueError, IndexError) as exc:
        raise OrderError("malformed mask dump header") from exc
    order = DecodeOrder(z, Branch.L2R if list(z) == list(range(1, T + 1)) else Branch.URP)
    if order.T != T:
        raise OrderError(f"order length {order.T} != T={T}")

    def block(start: int, nrows: int, ncols: int) -> np.ndarray:
        rows = lines[start : start + nrows]
        if len(rows) != nrows:
            raise OrderError("mask dump truncated")
        out = np.zeros((nrows, ncols), dtype=np.uint8)
        for r, row in enumerate(rows):
            cells = row.split(" ")
            if len(cells) != ncols or any(c not in ("0", "1") for c in cells):
                raise OrderError(f"bad mask row {row!r}")
            out[r] = [int(c) for c in cells]
        return out

    pos = 2
    main = block(pos, T + 1, T + 1)
    pos += T + 1
    query = np.zeros((N, T, 2 * T + 1), dtype=np.uint8)
    for n in range(N):
        if lines[pos] != "":
            raise OrderError("blocks must be separated by one blank line")
        query[n] = block(pos + 1, T, 2 * T + 1)
        pos += T + 1
    if pos != len(lines):
        raise OrderError("trailing content after mask blocks")
    return RelativeOrderMasks(T, N, main, query, order)


def parse_order(text: str) -> DecodeOrder:
    """Parse ``"2,1,3"`` or ``"2 1 3"``."""
    try:
        z = tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise OrderError(f"cannot parse order {text!r}") from exc
    if not z:
        raise OrderError("empty order")
    order_branch = Branch.L2R if list(z) == list(range(1, len(z) + 1)) else Branch.URP
    return DecodeOrder(z, order_branch)
