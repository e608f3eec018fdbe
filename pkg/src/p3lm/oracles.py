"""Independent reference computations used by the self-check and the test suite.

Nothing here calls the code paths it checks: masks are rebuilt from the
conditional sets directly, the vanilla decoder slices prefixes instead of
masking, and beam search is compared against full enumeration.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import BOS_ID, EOS_ID


def brute_force_masks(z: Sequence[int], N: int) -> Tuple[np.ndarray, np.ndarray]:
    """Masks from the visibility sets ``{z_1..z_{t-n}}`` (query) and ``{z_1..z_t}`` (main)."""
    T = len(z)
    main = np.zeros((T + 1, T + 1), dtype=np.uint8)
    main[0, 0] = 1
    for t in range(1, T + 1):
        p = z[t - 1]
        main[p, 0] = 1
        for q in z[:t]:
            main[p, q] = 1
    query = np.zeros((N, T, 2 * T + 1), dtype=np.uint8)
    for n in range(1, N + 1):
        for t in range(1, T + 1):
            query[n - 1, t - 1, 0] = 1
            query[n - 1, t - 1, T + t] = 1
            for q in z[: max(0, t - n)]:
                query[n - 1, t - 1, q] = 1
    return main, query


# ---------------------------------------------------------------------------
# vanilla causal decoder
# ---------------------------------------------------------------------------


def _ln(x, gain, bias, eps):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(float(var) + eps) * gain + bias


def _gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def _attn(query_vec, keys, proj, heads):
    """Single query vector against an explicit list of key vectors (all visible)."""
    d = query_vec.shape[0]
    hd = d // heads
    q = query_vec @ proj.wq.double()
    ks = torch.stack([k @ proj.wk.double() for k in keys])
    vs = torch.stack([k @ proj.wv.double() for k in keys])
    outs = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = ks[:, sl] @ q[sl] / math.sqrt(hd)
        w = torch.exp(scores - scores.max())
        w = w / w.sum()
        outs.append(w @ vs[:, sl])
    return torch.cat(outs) @ proj.wo.double()


def _ffn(x, ffn):
    return _gelu(x @ ffn.w1.double() + ffn.b1.double()) @ ffn.w2.double() + ffn.b2.double()


def _norm(mod, x):
    return _ln(x, mod.gain.double(), mod.bias.double(), mod.eps)


def vanilla_encoder(model, src: Sequence[int]) -> List[torch.Tensor]:
    cfg = model.cfg
    x = [model.tok_emb[s].double() + model.pos_emb[i].double() for i, s in enumerate(src)]
    for layer in model.encoder:
        normed = [_norm(layer.ln_self, v) for v in x]
        x = [v + _attn(normed[i], normed, layer.self_attn, cfg.heads) for i, v in enumerate(x)]
        x = [v + _ffn(_norm(layer.ln_ffn, v), layer.ffn) for v in x]
    return [_norm(model.enc_ln, v) for v in x]


def vanilla_decoder_logits(model, src: Sequence[int], y: Sequence[int]) -> torch.Tensor:
    """Left-to-right logits (T, V) for stream 1, computed prefix by prefix in float64.

    Main states are a causal decoder over ``[<s>, y]``; the prediction for step
    ``t`` comes from a position-``t`` query vector that sees main slots
    ``0..t-1`` and itself. No mask matrices are involved.
    """
    cfg = model.cfg
    heads = cfg.heads
    with torch.no_grad():
        mem = vanilla_encoder(model, src)
        slots = [BOS_ID] + list(y)
        T = len(y)
        h = [model.tok_emb[s].double() + model.pos_emb[i].double() for i, s in enumerate(slots)]
        g = [model.stream_emb[0].double() + model.pos_emb[t].double() for t in range(1, T + 1)]
        for layer in model.decoder:
            main = layer.block(0)
            normed = [_norm(main.ln_self, v) for v in h]
            h = [v + _attn(normed[p], normed[: p + 1], main.self_attn, heads) for p, v in enumerate(h)]
            h = [v + _attn(_norm(main.ln_cross, v), mem, main.cross_attn, heads) for v in h]
            h = [v + _ffn(_norm(main.ln_ffn, v), main.ffn) for v in h]

            qb = layer.block(1)
            h_keys = [_norm(qb.ln_self, v) for v in h]
            new_g = []
            for t, v in enumerate(g, start=1):
                x = _norm(qb.ln_self, v)
                v = v + _attn(x, h_keys[:t] + [x], qb.self_attn, heads)
                v = v + _attn(_norm(qb.ln_cross, v), mem, qb.cross_attn, heads)
                v = v + _ffn(_norm(qb.ln_ffn, v), qb.ffn)
                new_g.append(v)
            g = new_g
        w = model.tok_emb.double().t() if model.out_proj is None else model.out_proj.double()
        return torch.stack([_norm(model.dec_ln, v) @ w for v in g])


def vanilla_nll(model, src: Sequence[int], y: Sequence[int]) -> float:
    logits = vanilla_decoder_logits(model, src, y)
    logp = torch.log_softmax(logits, dim=-1)
    return -float(sum(logp[t, tok] for t, tok in enumerate(y)))


# ---------------------------------------------------------------------------
# sequence enumeration
# ---------------------------------------------------------------------------


def enumerate_sequences(
    next_log_probs: Callable[[Tuple[int, ...]], np.ndarray],
    vocab_size: int,
    max_len: int,
    min_len: int = 1,
    eos: int = EOS_ID,
) -> List[Tuple[Tuple[int, ...], float, bool]]:
    """Every complete output up to ``max_len``: (tokens, log-prob, ended_with_eos)."""
    out = []
    stack: List[Tuple[Tuple[int, ...], float]] = [((), 0.0)]
    while stack:
        prefix, lp = stack.pop()
        logp = next_log_probs(prefix)
        length = len(prefix) + 1
        for tok in range(vocab_size):
            if tok == eos and length < min_len:
                continue
            seq, score = prefix + (tok,), lp + float(logp[tok])
            if tok == eos:
                out.append((seq, score, True))
            elif length == max_len:
                out.append((seq, score, False))
            else:
                stack.append((seq, score))
    return out


def best_sequence(candidates, gamma: float) -> Tuple[Tuple[int, ...], float]:
    """Highest ``logp / len**gamma`` over all complete outputs (ties: smaller ids)."""
    best = min(candidates, key=lambda c: (-(c[1] / len(c[0]) ** gamma), c[0]))
    return best[0], best[1] / len(best[0]) ** gamma


def chi_square_uniform(counts: Sequence[int]) -> float:
    total = sum(counts)
    expected = total / len(counts)
    return sum((c - expected) ** 2 / expected for c in counts)


def all_orders(T: int):
    return itertools.permutations(range(1, T + 1))


class TableScorer:
    """Next-token distributions looked up per prefix; unlisted prefixes are uniform.

    With ``seed`` set, unlisted prefixes instead get a random distribution that
    is fixed on first use.
    """

    def __init__(self, vocab_size: int, table: Optional[dict] = None, seed: Optional[int] = None, spread: float = 2.0):
        self.vocab_size = vocab_size
        self._table = {tuple(k): np.log(np.asarray(v, dtype=float) / np.sum(v)) for k, v in (table or {}).items()}
        self._rng = None if seed is None else np.random.default_rng(seed)
        self._spread = spread

    def next_log_probs(self, prefix: Tuple[int, ...]) -> np.ndarray:
        prefix = tuple(prefix)
        if prefix not in self._table:
            if self._rng is None:
                return np.full(self.vocab_size, -math.log(self.vocab_size))
            x = self._rng.normal(size=self.vocab_size) * self._spread
            self._table[prefix] = x - np.log(np.exp(x - x.max()).sum()) - x.max()
        return self._table[prefix]
