"""Transformer encoder and the order-aware multi-stream decoder."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .attention import AttentionConfig, ProjectionSet, cross_attention, osa
from .data import BOS_ID, NUM_SPECIALS, PAD_ID
from .numerics import (
    CheckpointError,
    RngStream,
    embedding_lookup,
    gelu,
    layer_norm,
    load_arrays,
    load_state_arrays,
    matmul,
    save_arrays,
    state_arrays,
)
from .order import DecodeOrder, RelativeOrderMasks, build_masks

MANIFEST_NAME = "model.json"


class ConsistencyError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    dim: int = 64
    ffn: int = 128
    heads: int = 4
    vocab: int = 32
    streams: int = 2
    max_positions: int = 64
    share_stream_params: bool = True
    stream_embeddings: bool = True  # False: one placeholder embedding for every stream
    tie_output: bool = True
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.streams < 1:
            raise ValueError("streams must be >= 1")
        if self.streams > 4:
            raise ValueError("more than 4 query streams is not supported")
        if self.vocab <= NUM_SPECIALS:
            raise ValueError(f"vocab must exceed the {NUM_SPECIALS} special tokens")
        if self.layers < 1 or self.max_positions < 2:
            raise ValueError("need at least one layer and two positions")
        AttentionConfig(self.dim, self.heads)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.dim, self.heads, self.dropout)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CheckpointError(f"unknown model config keys: {unknown}")
        return cls(**data)


@dataclass
class EncoderState:
    hE: torch.Tensor  # (B, S, D)
    pad_mask: torch.Tensor  # (B, S) bool, True = real token


@dataclass
class DecoderMasks:
    """Batched, padded masks for one decoder pass."""

    main: torch.Tensor  # (B, T+1, T+1) bool
    query: torch.Tensor  # (B, N, T, 2T+1) bool
    positions: torch.Tensor  # (B, T) absolute position predicted by each step


@dataclass(frozen=True)
class DecoderCache:
    """Main-stream states of an L2R prefix.

    ``states[k]`` is the (B, L, D) output of decoder layer ``k`` (``states[0]``
    holds the embeddings) for slots ``0..L-1``; ``tokens`` are the slot inputs
    starting with ``<s>``.
    """

    tokens: Tuple[Tuple[int, ...], ...]
    states: Tuple[torch.Tensor, ...]

    @property
    def length(self) -> int:
        return len(self.tokens[0])


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(dim, hidden))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(torch.empty(hidden, dim))
        self.b2 = nn.Parameter(torch.zeros(dim))

    def reset_parameters(self, generator):
        with torch.no_grad():
            for w in (self.w1, self.w2):
                bound = 1.0 / np.sqrt(w.shape[0])
                w.uniform_(-bound, bound, generator=generator)

    def forward(self, x):
        return matmul(gelu(matmul(x, self.w1) + self.b1), self.w2) + self.b2


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_self = LayerNorm(cfg.dim, cfg.ln_eps)
        self.self_attn = ProjectionSet(cfg.dim)
        self.ln_ffn = LayerNorm(cfg.dim, cfg.ln_eps)
        self.ffn = FeedForward(cfg.dim, cfg.ffn)


class StreamBlock(nn.Module):
    """Self-attention, encoder attention and feed-forward sub-layers of one stream."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_self = LayerNorm(cfg.dim, cfg.ln_eps)
        self.self_attn = ProjectionSet(cfg.dim)
        self.ln_cross = LayerNorm(cfg.dim, cfg.ln_eps)
        self.cross_attn = ProjectionSet(cfg.dim)
        self.ln_ffn = LayerNorm(cfg.dim, cfg.ln_eps)
        self.ffn = FeedForward(cfg.dim, cfg.ffn)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        count = 1 if cfg.share_stream_params else cfg.streams + 1
        self.blocks = nn.ModuleList(StreamBlock(cfg) for _ in range(count))

    def block(self, stream: int) -> StreamBlock:
        """Stream 0 is the main stream, 1..N the query streams."""
        return self.blocks[0 if len(self.blocks) == 1 else stream]


class P3LM(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.att = cfg.attention
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab, cfg.dim))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_positions, cfg.dim))
        self.stream_emb = nn.Parameter(torch.empty(cfg.streams if cfg.stream_embeddings else 1, cfg.dim))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.enc_ln = LayerNorm(cfg.dim, cfg.ln_eps)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.dec_ln = LayerNorm(cfg.dim, cfg.ln_eps)
        self.out_proj = None if cfg.tie_output else nn.Parameter(torch.empty(cfg.dim, cfg.vocab))
        self.dropout_generator: Optional[torch.Generator] = None
        self.reset_parameters(RngStream(seed).split("init"))

    def reset_parameters(self, rng: RngStream) -> None:
        gen = rng.torch_generator()
        with torch.no_grad():
            for emb in (self.tok_emb, self.pos_emb, self.stream_emb):
                emb.normal_(0.0, 0.02, generator=gen)
            for mod in self.modules():
                if isinstance(mod, (ProjectionSet, FeedForward)):
                    mod.reset_parameters(gen)
            if self.out_proj is not None:
                bound = 1.0 / np.sqrt(self.cfg.dim)
                self.out_proj.uniform_(-bound, bound, generator=gen)

    # -- shared pieces -----------------------------------------------------

    def _attend_kwargs(self):
        return {"training": self.training, "generator": self.dropout_generator}

    def output_logits(self, g: torch.Tensor) -> torch.Tensor:
        x = self.dec_ln(g)
        w = self.tok_emb.t() if self.out_proj is None else self.out_proj
        return matmul(x, w)

    def placeholder_embed(self, positions: torch.Tensor, stream: int) -> torch.Tensor:
        """Stream-``stream`` placeholder (1-based) for the given absolute positions."""
        row = stream - 1 if self.cfg.stream_embeddings else 0
        return self.stream_emb[row] + embedding_lookup(self.pos_emb, positions)

    def _main_sublayers(self, block: StreamBlock, h, mask, enc: EncoderState, keys=None):
        x = block.ln_self(h)
        kv = x if keys is None else block.ln_self(keys)
        h = h + osa(x, kv, kv, mask, block.self_attn, self.att, **self._attend_kwargs())
        h = h + cross_attention(
            block.ln_cross(h), enc.hE, enc.pad_mask, block.cross_attn, self.att, **self._attend_kwargs()
        )
        return h + block.ffn(block.ln_ffn(h))

    def _query_sublayers(self, block: StreamBlock, g, h, mask, enc: EncoderState):
        # g: (..., T, D) attends to [h; g] with h: (..., T+1, D)
        xg = block.ln_self(g)
        kv = torch.cat([block.ln_self(h), xg], dim=-2)
        g = g + osa(xg, kv, kv, mask, block.self_attn, self.att, **self._attend_kwargs())
        hE, pad = enc.hE, enc.pad_mask
        if g.dim() == 4:
            hE, pad = hE.unsqueeze(1), pad.unsqueeze(1)
        g = g + cross_attention(
            block.ln_cross(g), hE, pad, block.cross_attn, self.att, **self._attend_kwargs()
        )
        return g + block.ffn(block.ln_ffn(g))

    # -- encoder -------------------------------------------------------------

    def encode(self, src: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> EncoderState:
        """``src``: (B, S) token ids."""
        if src.dim() == 1:
            src = src.unsqueeze(0)
        S = src.shape[1]
        if S < 1 or S > self.cfg.max_positions:
            raise SequenceLengthError(f"source length {S} outside 1..{self.cfg.max_positions}")
        if pad_mask is None:
            pad_mask = src != PAD_ID
        pad_mask = pad_mask.to(torch.bool)
        x = embedding_lookup(self.tok_emb, src) + self.pos_emb[:S]
        key_mask = pad_mask.unsqueeze(1).expand(-1, S, S)
        for layer in self.encoder:
            y = layer.ln_self(x)
            x = x + osa(y, y, y, key_mask, layer.self_attn, self.att, **self._attend_kwargs())
            x = x + layer.ffn(layer.ln_ffn(x))
        return EncoderState(self.enc_ln(x), pad_mask)

    # -- multi-stream decoder ----------------------------------------------

    def decode(self, y: torch.Tensor, masks: DecoderMasks, enc: EncoderState) -> torch.Tensor:
        """Teacher-forced pass over all streams.

        ``y``: (B, T) targets. Returns logits (B, N, T, V) where ``[:, n-1, t-1]``
        predicts ``y[z_t]`` from the stream-``n`` context.
        """
        B, T = y.shape
        N = self.cfg.streams
        if T + 1 > self.cfg.max_positions:
            raise SequenceLengthError(f"target length {T} needs {T + 1} positions")
        if masks.main.shape != (B, T + 1, T + 1) or masks.query.shape != (B, N, T, 2 * T + 1):
            raise ConsistencyError(
                f"masks {tuple(masks.main.shape)}/{tuple(masks.query.shape)} do not fit targets {(B, T)} with N={N}"
            )
        slots = torch.cat([torch.full((B, 1), BOS_ID, dtype=y.dtype), y], dim=1)
        h = embedding_lookup(self.tok_emb, slots) + self.pos_emb[: T + 1]
        g = torch.stack([self.placeholder_embed(masks.positions, n) for n in range(1, N + 1)], dim=1)

        for layer in self.decoder:
            h = self._main_sublayers(layer.block(0), h, masks.main, enc)
            if len(layer.blocks) == 1:
                hs = h.unsqueeze(1).expand(B, N, T + 1, h.shape[-1])
                g = self._query_sublayers(layer.block(1), g, hs, masks.query, enc)
            else:
                g = torch.stack(
                    [
                        self._query_sublayers(layer.block(n + 1), g[:, n], h, masks.query[:, n], enc)
                        for n in range(N)
                    ],
                    dim=1,
                )
        return self.output_logits(g)

    # -- incremental L2R decoding -------------------------------------------

    def extend_cache(self, prefix: torch.Tensor, cache: Optional[DecoderCache], enc: EncoderState) -> DecoderCache:
        """Return a new cache covering slots ``<s>, prefix``; ``cache`` is left untouched."""
        B = prefix.shape[0]
        slots = torch.cat([torch.full((B, 1), BOS_ID, dtype=prefix.dtype), prefix], dim=1)
        total = slots.shape[1]
        if total > self.cfg.max_positions:
            raise SequenceLengthError(f"prefix needs {total} positions")
        slot_tokens = tuple(tuple(int(v) for v in row) for row in slots)
        start = 0
        if cache is not None:
            start = cache.length
            if len(cache.tokens) != B or start > total or any(
                row[:start] != cached for row, cached in zip(slot_tokens, cache.tokens)
            ):
                raise ConsistencyError("cache does not hold a prefix of the given tokens")
        if cache is not None and start == total:
            return cache

        new = slots[:, start:]
        x = embedding_lookup(self.tok_emb, new) + self.pos_emb[start:total]
        states = [x if cache is None else torch.cat([cache.states[0], x], dim=1)]
        L = new.shape[1]
        causal = torch.ones(L, total, dtype=torch.bool).tril(diagonal=start)
        for k, layer in enumerate(self.decoder):
            keys = states[k]  # full (B, total, D) inputs to layer k
            x = self._main_sublayers(layer.block(0), x, causal.expand(B, L, total), enc, keys=keys)
            states.append(x if cache is None else torch.cat([cache.states[k + 1], x], dim=1))
        return DecoderCache(slot_tokens, tuple(states))

    def incremental_step(
        self, prefix: torch.Tensor, cache: Optional[DecoderCache], enc: EncoderState
    ) -> Tuple[torch.Tensor, DecoderCache]:
        """Stream-1 logits (B, V) for position ``prefix_len + 1`` under L2R order."""
        if prefix.dim() == 1:
            prefix = prefix.unsqueeze(0)
        prefix = prefix.long()
        cache = self.extend_cache(prefix, cache, enc)
        B, t = prefix.shape[0], prefix.shape[1] + 1
        if t >= self.cfg.max_positions:
            raise SequenceLengthError(f"step {t} exceeds max positions")
        g = self.placeholder_embed(torch.full((B, 1), t, dtype=torch.long), 1)
        mask = torch.ones(B, 1, t + 1, dtype=torch.bool)
        for k, layer in enumerate(self.decoder):
            g = self._query_sublayers(layer.block(1), g, cache.states[k + 1], mask, enc)
        return self.output_logits(g)[:, 0], cache


# ---------------------------------------------------------------------------
# masks for batches
# ---------------------------------------------------------------------------


def pad_masks(masks: Sequence[RelativeOrderMasks], T: int, N: int) -> DecoderMasks:
    """Embed per-instance masks into a common (T+1)-slot layout.

    Padding rows see ``<s>`` plus themselves so no row is empty; real rows
    never see padding slots.
    """
    B = len(masks)
    main = np.zeros((B, T + 1, T + 1), dtype=bool)
    query = np.zeros((B, N, T, 2 * T + 1), dtype=bool)
    positions = np.tile(np.arange(1, T + 1), (B, 1))
    for b, m in enumerate(masks):
        Ti = m.T
        if Ti > T or m.N != N:
            raise ConsistencyError(f"instance masks (T={Ti}, N={m.N}) do not fit T={T}, N={N}")
        main[b, : Ti + 1, : Ti + 1] = m.main
        for p in range(Ti + 1, T + 1):
            main[b, p, 0] = main[b, p, p] = True
        query[b, :, :Ti, : Ti + 1] = m.query[:, :, : Ti + 1]
        for t in range(1, T + 1):
            query[b, :, t - 1, 0] = True
            query[b, :, t - 1, T + t] = True
        if m.order is not None and Ti:
            positions[b, :Ti] = m.order.z
    return DecoderMasks(torch.from_numpy(main), torch.from_numpy(query), torch.from_numpy(positions))


def decoder_forward(
    model: P3LM,
    y_tokens: Sequence[int],
    order: DecodeOrder,
    masks: RelativeOrderMasks,
    enc: EncoderState,
) -> torch.Tensor:
    """Single-instance decoder pass; returns logits (N, T, V)."""
    N = model.cfg.streams
    if masks.order is not None and masks.order.z != order.z:
        raise ConsistencyError("masks were built for a different order")
    if masks.T != order.T or len(y_tokens) != order.T or masks != build_masks(order, masks.N) or masks.N != N:
        raise ConsistencyError("masks, order and targets disagree")
    if masks.order is None:
        masks = RelativeOrderMasks(masks.T, masks.N, masks.main, masks.query, order)
    y = torch.as_tensor(list(y_tokens), dtype=torch.long).unsqueeze(0)
    return model.decode(y, pad_masks([masks], order.T, N), enc)[0]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_checkpoint(model: P3LM, path: str) -> None:
    save_arrays(path, state_arrays(model))
    manifest = os.path.join(os.path.dirname(os.path.abspath(path)), MANIFEST_NAME)
    with open(manifest, "w") as fh:
        fh.write(model.cfg.to_json())


def read_manifest(directory: str) -> ModelConfig:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise CheckpointError(f"missing model manifest {path}")
    with open(path) as fh:
        try:
            return ModelConfig.from_dict(json.load(fh))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid model manifest {path}: {exc}") from exc


def load_checkpoint(path: str) -> P3LM:
    cfg = read_manifest(os.path.dirname(os.path.abspath(path)))
    model = P3LM(cfg)
    load_state_arrays(model, load_arrays(path))
    model.eval()
    return model
