"""Oracle suites: each compares an implementation path with an independent reference.

Every suite returns a :class:`SuiteResult` whose ``line`` is free of timings,
so two runs with the same seed print byte-identical reports.
"""

from __future__ import annotations

import itertools
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from scipy.stats import chi2

from . import numerics as nx
from .data import EOS_ID, NUM_SPECIALS, Example, SpanMaskSpec, apply_span_mask, collate, gen_synthetic
from .inference import BeamConfig, ModelScorer, beam_search, greedy_decode
from .metrics import exact_match, token_accuracy
from .model import ModelConfig, P3LM, pad_masks
from .oracles import TableScorer, best_sequence, brute_force_masks, enumerate_sequences, vanilla_decoder_logits
from .order import DecodeOrder, OrderDistribution, OrderKind, build_masks, sample_order
from .training import TrainingConfig, log_header, log_line, loss_split, p3lm_loss, train


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def line(self) -> str:
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - start
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def tiny_config(**overrides) -> ModelConfig:
    base = dict(layers=2, dim=16, ffn=32, heads=2, vocab=20, streams=2, max_positions=16, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------


@_timed
def mask_oracle(max_T: int = 5, N: int = 2) -> SuiteResult:
    """build_masks against the conditional-set construction for every order."""
    checked = mismatched = 0
    for T in range(1, max_T + 1):
        for z in itertools.permutations(range(1, T + 1)):
            m = build_masks(DecodeOrder(z), N)
            main, query = brute_force_masks(z, N)
            checked += 1
            mismatched += not (np.array_equal(m.main, main) and np.array_equal(m.query, query))
    return SuiteResult("mask_oracle", mismatched == 0, f"{checked} orders, {mismatched} mismatches")


@_timed
def leakage(cases: int = 200, seed: int = 0) -> SuiteResult:
    """Perturb every token a prediction must not see; its logits must not move at all."""
    rng = nx.RngStream(seed).split("leakage")
    models = [P3LM(tiny_config(share_stream_params=s), seed=seed + i).eval() for i, s in enumerate((True, False))]
    V = models[0].cfg.vocab
    worst = 0.0
    perturbations = 0
    for case in range(cases):
        model = models[case % 2]
        T = rng.integers(1, 6)
        order = sample_order(OrderDistribution(OrderKind.URP), T, rng)
        n, t = rng.integers(1, 3), rng.integers(1, T + 1)
        y = [rng.integers(NUM_SPECIALS, V) for _ in range(T)]
        src = torch.tensor([[rng.integers(NUM_SPECIALS, V) for _ in range(rng.integers(1, 6))]])
        hidden = [p for p in range(1, T + 1) if p not in set(order.z[: max(0, t - n)])]
        rows = [list(y)]
        for p in hidden:  # one position at a time, then all together
            row = list(y)
            row[p - 1] = NUM_SPECIALS + (row[p - 1] - NUM_SPECIALS + 1 + rng.integers(0, V - NUM_SPECIALS - 1)) % (V - NUM_SPECIALS)
            rows.append(row)
        if len(hidden) > 1:
            row = list(y)
            for p in hidden:
                row[p - 1] = rng.integers(NUM_SPECIALS, V)
            rows.append(row)
        masks = pad_masks([build_masks(order, 2)] * len(rows), T, 2)
        with torch.no_grad():
            enc = model.encode(src.expand(len(rows), -1))
            logits = model.decode(torch.tensor(rows), masks, enc)[:, n - 1, t - 1]
        perturbations += len(rows) - 1
        worst = max(worst, float((logits[1:] - logits[0]).abs().max()) if len(rows) > 1 else 0.0)
    return SuiteResult(
        "leakage", worst == 0.0, f"{cases} cases, {perturbations} perturbations, max change {worst:.3e}", metrics={"max_change": worst}
    )


@_timed
def vanilla_equivalence(configs: int = 20, seed: int = 0, tolerance: float = 1e-5) -> SuiteResult:
    """Identity order, one stream: logits against a prefix-by-prefix causal decoder."""
    rng = nx.RngStream(seed).split("vanilla")
    worst = 0.0
    for i in range(configs):
        heads = [1, 2, 4][rng.integers(0, 3)]
        dim = heads * [2, 4, 8][rng.integers(0, 3)]
        cfg = tiny_config(
            layers=rng.integers(1, 3),
            dim=dim,
            ffn=2 * dim,
            heads=heads,
            vocab=rng.integers(8, 25),
            streams=1,
            share_stream_params=bool(rng.integers(0, 2)),
            tie_output=bool(rng.integers(0, 2)),
        )
        model = P3LM(cfg, seed=seed * 1000 + i).eval()
        T = rng.integers(1, 7)
        src = [rng.integers(NUM_SPECIALS, cfg.vocab) for _ in range(rng.integers(1, 7))]
        y = [rng.integers(NUM_SPECIALS, cfg.vocab) for _ in range(T)]
        order = DecodeOrder.identity(T)
        with torch.no_grad():
            enc = model.encode(torch.tensor([src]))
            logits = model.decode(torch.tensor([y]), pad_masks([build_masks(order, 1)], T, 1), enc)[0, 0]
        ref = vanilla_decoder_logits(model, src, y)
        worst = max(worst, float((logits.double() - ref).abs().max()))
    return SuiteResult(
        "vanilla_equivalence", worst <= tolerance, f"{configs} configs, max |diff| {worst:.3e} (tol {tolerance:g})",
        metrics={"max_abs_diff": worst},
    )


@_timed
def gradient_check(coords: int = 200, seed: int = 0, tolerance: float = 1e-4) -> SuiteResult:
    """Central differences on the full objective, tiny config, float64."""
    model = P3LM(tiny_config(), seed=seed).double()
    rng = nx.RngStream(seed).split("gradcheck")
    T = 5
    order = sample_order(OrderDistribution(OrderKind.URP), T, rng)
    ex = Example([rng.integers(NUM_SPECIALS, 20) for _ in range(4)], [rng.integers(NUM_SPECIALS, 20) for _ in range(T)])
    batch = collate([ex], [[order]])
    params = dict(model.named_parameters())
    names = sorted(params)
    picks = []
    for _ in range(coords):
        name = names[rng.integers(0, len(names))]
        picks.append((name, rng.integers(0, params[name].numel())))
    rep = nx.grad_check(lambda: p3lm_loss(batch, model).loss, params, step=1e-4, tolerance=tolerance, coords=picks)
    return SuiteResult(
        "gradient_check", rep.passed, f"{rep.checked} coordinates, max rel error {rep.max_rel_error:.3e} (tol {tolerance:g})",
        metrics={"max_rel_error": rep.max_rel_error},
    )


@_timed
def sampler_statistics(draws: int = 60_000, seed: int = 0) -> SuiteResult:
    """URP chi-square over T=3 and the alpha-mixture identity frequency."""
    rng = nx.RngStream(seed).split("sampler")
    counts = Counter(sample_order(OrderDistribution(OrderKind.URP), 3, rng).z for _ in range(draws))
    stat = sum((counts.get(z, 0) - draws / 6) ** 2 / (draws / 6) for z in itertools.permutations((1, 2, 3)))
    critical = float(chi2.ppf(0.999, df=5))
    alpha = OrderDistribution(OrderKind.ALPHA, 0.5)
    freq = sum(sample_order(alpha, 3, rng).is_identity for _ in range(draws)) / draws
    ok = stat < critical and abs(freq - (0.5 + 0.5 / 6)) <= 0.01
    return SuiteResult(
        "sampler_statistics", ok, f"chi2 {stat:.3f} < {critical:.3f}; alpha identity freq {freq:.4f}",
        metrics={"chi2": stat, "identity_freq": freq},
    )


@_timed
def span_mask_statistics(masked_tokens: int = 100_000, seed: int = 0) -> SuiteResult:
    """9 per 64-token window, replacement categories near 80/10/10."""
    rng = nx.RngStream(seed).split("spanmask")
    spec = SpanMaskSpec()
    kinds: Counter = Counter()
    wrong_windows = 0
    while sum(kinds.values()) < masked_tokens:
        windows = 50
        tokens = [rng.integers(NUM_SPECIALS, 200) for _ in range(64 * windows + 17)]
        ex = apply_span_mask(tokens, spec, rng, 200)
        per_window = Counter(off // 64 for off in ex.offsets)
        wrong_windows += sum(1 for w in range(windows) if per_window.get(w) != 1)
        wrong_windows += len(ex.target) != 9 * windows
        kinds.update(ex.kinds)
    total = sum(kinds.values())
    fr = {k: kinds[k] / total for k in ("mask", "random", "keep")}
    ok = wrong_windows == 0 and abs(fr["mask"] - 0.8) <= 0.02 and abs(fr["random"] - 0.1) <= 0.02 and abs(fr["keep"] - 0.1) <= 0.02
    return SuiteResult(
        "span_mask_statistics", ok,
        f"{total} masked tokens, bad windows {wrong_windows}, mask/random/keep {fr['mask']:.4f}/{fr['random']:.4f}/{fr['keep']:.4f}",
        metrics=fr,
    )


HAND_TABLE = {
    # symbols 0, 1 = </s>, 2, 3
    (): [0.45, 0.05, 0.3, 0.2],
    (0,): [0.1, 0.2, 0.6, 0.1],
    (0, 2): [0.05, 0.85, 0.05, 0.05],
    (2,): [0.3, 0.4, 0.2, 0.1],
    (3,): [0.1, 0.1, 0.1, 0.7],
    (3, 3): [0.04, 0.9, 0.04, 0.02],
}

# the locally best first symbol leads nowhere; width 2 is needed
TRAP_TABLE = {
    (): [0.5, 0.05, 0.45],
    (0,): [0.35, 0.3, 0.35],
    (2,): [0.05, 0.9, 0.05],
}


@_timed
def beam_oracle(seed: int = 0, random_tables: int = 50) -> SuiteResult:
    """Beam search against full enumeration on a hand-scored table; beam 1 against greedy."""
    scorer = TableScorer(4, HAND_TABLE)
    gamma = 1.2
    cands = enumerate_sequences(scorer.next_log_probs, 4, max_len=4)
    best, best_score = best_sequence(cands, gamma)
    found = {b: beam_search(scorer, BeamConfig(beam=b, max_len=4, length_penalty=gamma))[0] for b in (1, 2, 3)}
    matches = all(h.tokens == best and abs(h.score(gamma) - best_score) < 1e-12 for h in found.values())
    trap = TableScorer(3, TRAP_TABLE)
    trap_best, trap_score = best_sequence(enumerate_sequences(trap.next_log_probs, 3, max_len=4), gamma)
    for b in (2, 3):
        h = beam_search(trap, BeamConfig(beam=b, max_len=4, length_penalty=gamma))[0]
        matches = matches and h.tokens == trap_best and abs(h.score(gamma) - trap_score) < 1e-12
    rng = nx.RngStream(seed).split("beam")
    greedy_mismatch = 0
    for _ in range(random_tables):
        V = rng.integers(2, 6)
        table = TableScorer(V, seed=rng.integers(0, 2**31))
        for max_len in range(1, 5):
            top = beam_search(table, BeamConfig(beam=1, max_len=max_len))[0]
            greedy_mismatch += top.tokens != greedy_decode(table, max_len)
    ok = matches and greedy_mismatch == 0
    return SuiteResult(
        "beam_oracle", ok,
        f"best {best} score {best_score:.6f}; beams 1-3 {'match' if matches else 'differ'}; "
        f"beam-1 vs greedy mismatches {greedy_mismatch}/{random_tables * 4}",
    )


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "mask_oracle": mask_oracle,
    "leakage": leakage,
    "vanilla_equivalence": vanilla_equivalence,
    "gradient_check": gradient_check,
    "sampler_statistics": sampler_statistics,
    "span_mask_statistics": span_mask_statistics,
    "beam_oracle": beam_oracle,
}


def run_selfcheck(seed: int = 0, suites: Optional[List[str]] = None, emit: Callable[[str], None] = print) -> List[SuiteResult]:
    results = []
    for name in suites or list(SUITES):
        fn = SUITES[name]
        res = fn() if name == "mask_oracle" else fn(seed=seed)
        emit(res.line)
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# end-to-end runs
# ---------------------------------------------------------------------------

COPY_MODEL = dict(layers=2, dim=64, ffn=128, heads=4, vocab=32, streams=2, max_positions=24, dropout=0.0)


@dataclass
class CopyRun:
    token_accuracy: float
    exact_match: float
    steps: int
    log_text: str
    predictions: List[List[int]]
    seconds: float


def copy_task_run(
    steps: int = 1200,
    seed: int = 0,
    train_size: int = 20_000,
    heldout: int = 200,
    out_dir: Optional[str] = None,
) -> CopyRun:
    """Train on the copy task with the alpha-mixture prior and decode held-out sources greedily (L2R)."""
    start = time.perf_counter()
    rng = nx.RngStream(seed).split("copy")
    data = gen_synthetic("copy", 32, (4, 16), train_size, rng.split("train"))
    test = gen_synthetic("copy", 32, (4, 16), heldout, rng.split("heldout"))
    model = P3LM(ModelConfig(**COPY_MODEL), seed=seed)
    cfg = TrainingConfig(lr=1e-3, warmup=200, batch_size=64, max_steps=steps, order="alpha", alpha=0.5, seed=seed)
    lines = [log_header(2)]
    train(model, data, cfg, out_dir=out_dir, on_step=lambda rep: lines.append(log_line(rep)))
    model.eval()
    preds = []
    for ex in test:
        out = greedy_decode(ModelScorer(model, ex.source), max_len=len(ex.source) + 4)
        preds.append([t for t in out if t != EOS_ID])
    refs = [ex.target for ex in test]
    return CopyRun(
        token_accuracy(preds, refs), exact_match(preds, refs), steps, "\n".join(lines) + "\n", preds,
        time.perf_counter() - start,
    )


def infill_loss_split(epochs: int = 12, seed: int = 0, size: int = 2000):
    """Per-epoch branch losses on the infill task; returns the two curves."""
    rng = nx.RngStream(seed).split("infill")
    data = gen_synthetic("infill", 32, (6, 16), size, rng)
    model = P3LM(ModelConfig(**COPY_MODEL), seed=seed)
    cfg = TrainingConfig(lr=1e-3, warmup=100, batch_size=32, max_steps=10**9, epochs=epochs, alpha=0.5, seed=seed)
    res = train(model, data, cfg)
    return loss_split(res.reports)
