"""Order-aware self-attention and encoder cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .numerics import DimensionError, masked_softmax, matmul


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    dropout: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide hidden size {self.dim}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


class ProjectionSet(nn.Module):
    """Query/key/value/output projections, each D x D (no biases)."""

    def __init__(self, dim: int):
        super().__init__()
        self.wq = nn.Parameter(torch.empty(dim, dim))
        self.wk = nn.Parameter(torch.empty(dim, dim))
        self.wv = nn.Parameter(torch.empty(dim, dim))
        self.wo = nn.Parameter(torch.empty(dim, dim))

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        bound = 1.0 / math.sqrt(self.wq.shape[0])
        with torch.no_grad():
            for w in (self.wq, self.wk, self.wv, self.wo):
                w.uniform_(-bound, bound, generator=generator)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, length, dim = x.shape
    return x.reshape(*lead, length, heads, dim // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, heads, length, hd = x.shape
    return x.transpose(-3, -2).reshape(*lead, length, heads * hd)


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor,
    proj: ProjectionSet,
    cfg: AttentionConfig,
    training: bool = False,
    generator: Optional[torch.Generator] = None,
    return_weights: bool = False,
):
    """Multi-head masked attention.

    ``q``: (..., Lq, D); ``k``/``v``: (..., Lk, D); ``mask`` broadcasts to
    (..., Lq, Lk) with 1 = allowed. Returns (..., Lq, D), plus the
    (..., H, Lq, Lk) weights when ``return_weights``.
    """
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise DimensionError(
            f"mask shape {tuple(mask.shape)} does not match queries {q.shape[-2]} x keys {k.shape[-2]}"
        )
    qh = _split_heads(matmul(q, proj.wq), cfg.heads)
    kh = _split_heads(matmul(k, proj.wk), cfg.heads)
    vh = _split_heads(matmul(v, proj.wv), cfg.heads)
    scores = matmul(qh, kh.transpose(-1, -2)) * cfg.scale
    weights = masked_softmax(scores, mask.unsqueeze(-3))
    probs = weights
    if training and cfg.dropout > 0:
        keep = torch.rand(weights.shape, generator=generator, dtype=weights.dtype) >= cfg.dropout
        probs = weights * keep / (1.0 - cfg.dropout)
    out = matmul(_merge_heads(matmul(probs, vh)), proj.wo)
    if return_weights:
        return out, weights
    return out


def osa(q, k, v, mask, proj: ProjectionSet, cfg: AttentionConfig, **kwargs):
    """Order-aware self-attention: ``attend`` restricted by a relative-order mask."""
    return attend(q, k, v, mask, proj, cfg, **kwargs)


def cross_attention(q, memory, pad_mask, proj: ProjectionSet, cfg: AttentionConfig, **kwargs):
    """Attention from ``q`` (..., Lq, D) onto encoder states (..., S, D).

    ``pad_mask`` is (..., S) with 1 at valid source positions.
    """
    mask = pad_mask.to(torch.bool).unsqueeze(-2).expand(*pad_mask.shape[:-1], q.shape[-2], pad_mask.shape[-1])
    return attend(q, memory, memory, mask, proj, cfg, **kwargs)
