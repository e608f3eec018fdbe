"""Permuted prophet training objective, optimiser loop and loss-split telemetry."""

from __future__ import annotations

import glob
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from .data import Batch, Example, make_batches
from .model import P3LM, EncoderState, pad_masks, save_checkpoint
from .numerics import NumericError, RngStream, check_finite
from .order import Branch, OrderDistribution, build_masks, log_prior

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    warmup: int = 0
    batch_size: int = 32
    max_steps: int = 1000
    epochs: Optional[int] = None
    order: str = "alpha"
    alpha: float = 0.5
    orders_per_instance: int = 1
    clip_norm: float = 1.0
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    divergence: float = 1e4

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.orders_per_instance < 1:
            raise ValueError("need at least one order per instance")

    @property
    def distribution(self) -> OrderDistribution:
        return OrderDistribution.parse(self.order, self.alpha)

    def lr_at(self, step: int) -> float:
        """Learning rate for update number ``step`` (1-based)."""
        if self.warmup and step < self.warmup:
            return self.lr * step / self.warmup
        return self.lr


@dataclass
class LossReport:
    total: float
    per_stream: List[float]
    loss_l2r: Optional[float]
    loss_urp: Optional[float]
    count_l2r: int
    count_urp: int
    tokens_l2r: int
    tokens_urp: int
    tokens: int
    log_prior: float
    step: int = 0
    epoch: int = 0
    loss: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)


def target_by_step(tgt: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Gold token for each decode step: ``tgt[b, z_t - 1]``."""
    return tgt.gather(1, positions - 1)


def p3lm_loss(
    batch: Batch,
    model: P3LM,
    dist: Optional[OrderDistribution] = None,
    enc: Optional[EncoderState] = None,
) -> LossReport:
    """Negative sampled lower bound, token-normalised.

    For each instance and each of its R orders: -(1/N) sum_n sum_t log p(y_{z_t} | y_{z<=t-n}, X),
    summed over instances, averaged over orders and divided by the target token
    count. The constant log p(Z) term is reported but not optimised.
    """
    dist = dist or OrderDistribution()
    N = model.cfg.streams
    B, T = batch.tgt.shape
    R = len(batch.orders[0])
    lengths = batch.tgt_lengths
    ntokens = int(lengths.sum())
    if enc is None:
        enc = model.encode(batch.src, batch.src_mask)
    valid = torch.arange(1, T + 1).unsqueeze(0) <= lengths.unsqueeze(1)  # (B, T)

    total = torch.zeros((), dtype=enc.hE.dtype)
    per_stream = torch.zeros(N, dtype=enc.hE.dtype)
    branch_nll = {Branch.L2R: 0.0, Branch.URP: 0.0}
    branch_tokens = {Branch.L2R: 0, Branch.URP: 0}
    branch_count = {Branch.L2R: 0, Branch.URP: 0}
    prior = 0.0
    for r in range(R):
        orders = [batch.orders[b][r] for b in range(B)]
        masks = pad_masks([build_masks(o, N) for o in orders], T, N)
        logits = model.decode(batch.tgt, masks, enc)  # (B, N, T, V)
        gold = target_by_step(batch.tgt, masks.positions).unsqueeze(1).expand(B, N, T)
        nll = -torch.log_softmax(logits, dim=-1).gather(-1, gold.unsqueeze(-1)).squeeze(-1)
        nll = nll * valid.unsqueeze(1)
        inst = nll.sum(dim=2).mean(dim=1)  # (B,)
        bad = ~torch.isfinite(inst)
        if bad.any():
            raise NumericError("p3lm_loss", f"non-finite loss for instance {int(bad.nonzero()[0])}")
        inst_vals = inst.detach().tolist()
        total = total + inst.sum()
        per_stream = per_stream + nll.sum(dim=(0, 2))
        for b, o in enumerate(orders):
            if o.T == 0:
                continue
            branch_nll[o.branch] += float(inst_vals[b])
            branch_tokens[o.branch] += o.T
            branch_count[o.branch] += 1
            prior += log_prior(dist, o)

    denom = max(ntokens, 1) * R
    loss = total / denom
    counted = sum(branch_count.values())

    def mean(br):
        return branch_nll[br] / branch_tokens[br] if branch_tokens[br] else None

    return LossReport(
        total=float(loss.detach()),
        per_stream=[float(v) / denom for v in per_stream.detach()],
        loss_l2r=mean(Branch.L2R),
        loss_urp=mean(Branch.URP),
        count_l2r=branch_count[Branch.L2R],
        count_urp=branch_count[Branch.URP],
        tokens_l2r=branch_tokens[Branch.L2R],
        tokens_urp=branch_tokens[Branch.URP],
        tokens=ntokens,
        log_prior=prior / counted if counted else 0.0,
        loss=loss,
    )


# ---------------------------------------------------------------------------
# loss log
# ---------------------------------------------------------------------------


def log_header(N: int) -> str:
    streams = ",".join(f"stream_{n}" for n in range(1, N + 1))
    return f"step,epoch,total,{streams},loss_l2r,loss_urp,count_l2r,count_urp,tokens_l2r,tokens_urp"


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def log_line(rep: LossReport) -> str:
    cells = [str(rep.step), str(rep.epoch), _fmt(rep.total)]
    cells += [_fmt(v) for v in rep.per_stream]
    cells += [_fmt(rep.loss_l2r), _fmt(rep.loss_urp)]
    cells += [str(rep.count_l2r), str(rep.count_urp), str(rep.tokens_l2r), str(rep.tokens_urp)]
    return ",".join(cells)


def parse_log(text: str) -> List[LossReport]:
    lines = text.strip("\n").split("\n")
    header = lines[0].split(",")
    N = sum(1 for h in header if h.startswith("stream_"))
    out = []
    for line in lines[1:]:
        c = line.split(",")
        opt = lambda s: float(s) if s else None  # noqa: E731
        out.append(
            LossReport(
                total=float(c[2]),
                per_stream=[float(v) for v in c[3 : 3 + N]],
                loss_l2r=opt(c[3 + N]),
                loss_urp=opt(c[4 + N]),
                count_l2r=int(c[5 + N]),
                count_urp=int(c[6 + N]),
                tokens_l2r=int(c[7 + N]),
                tokens_urp=int(c[8 + N]),
                tokens=int(c[7 + N]) + int(c[8 + N]),
                log_prior=0.0,
                step=int(c[0]),
                epoch=int(c[1]),
            )
        )
    return out


def loss_split(reports: Sequence[LossReport]) -> Dict[str, List[Tuple[int, float]]]:
    """Per-epoch token-weighted loss of each sampler branch.

    Epochs in which a branch had no instances contribute no point to its curve.
    """
    acc: Dict[int, List[float]] = {}
    for rep in reports:
        a = acc.setdefault(rep.epoch, [0.0, 0, 0.0, 0])
        if rep.tokens_l2r:
            a[0] += rep.loss_l2r * rep.tokens_l2r
            a[1] += rep.tokens_l2r
        if rep.tokens_urp:
            a[2] += rep.loss_urp * rep.tokens_urp
            a[3] += rep.tokens_urp
    curves: Dict[str, List[Tuple[int, float]]] = {"l2r": [], "urp": []}
    for epoch in sorted(acc):
        s_l, n_l, s_u, n_u = acc[epoch]
        if n_l:
            curves["l2r"].append((epoch, s_l / n_l))
        if n_u:
            curves["urp"].append((epoch, s_u / n_u))
    return curves


def split_data_file(curves: Dict[str, List[Tuple[int, float]]]) -> str:
    """Gnuplot-readable columns: epoch, loss_l2r, loss_urp (``NaN`` marks a missing point)."""
    l2r, urp = dict(curves["l2r"]), dict(curves["urp"])
    lines = ["# epoch loss_l2r loss_urp"]
    for e in sorted(set(l2r) | set(urp)):
        a = f"{l2r[e]:.6f}" if e in l2r else "NaN"
        b = f"{urp[e]:.6f}" if e in urp else "NaN"
        lines.append(f"{e} {a} {b}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    reports: List[LossReport]
    checkpoints: List[str]


def checkpoint_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.bin")


def latest_checkpoint(out_dir: str) -> str:
    found = sorted(glob.glob(os.path.join(out_dir, "checkpoint_epoch*.bin")))
    if not found:
        raise FileNotFoundError(f"no checkpoint in {out_dir}")
    return found[-1]


def train(
    model: P3LM,
    dataset: Sequence[Example],
    cfg: TrainingConfig,
    out_dir: Optional[str] = None,
    on_step: Optional[Callable[[LossReport], None]] = None,
) -> TrainResult:
    """Adam with linear warmup then constant lr, global-norm clipping.

    Writes ``checkpoint_epoch000.bin`` before the first update, one checkpoint
    per finished epoch (or at the final partial epoch) and ``loss_log.csv``.
    """
    torch.set_num_threads(1)
    rng = RngStream(cfg.seed).split("train")
    dist = cfg.distribution
    model.dropout_generator = rng.split("dropout").torch_generator()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)

    reports: List[LossReport] = []
    checkpoints: List[str] = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = checkpoint_path(out_dir, 0)
        save_checkpoint(model, path)
        checkpoints.append(path)
        log_fh = open(os.path.join(out_dir, "loss_log.csv"), "w")
        log_fh.write(log_header(model.cfg.streams) + "\n")

    step = 0
    epoch = 0
    try:
        while step < cfg.max_steps and (cfg.epochs is None or epoch < cfg.epochs):
            epoch += 1
            if not dataset:
                break
            model.train()
            for batch in make_batches(
                dataset, cfg.batch_size, dist, cfg.orders_per_instance, rng.split(f"epoch{epoch}")
            ):
                if step >= cfg.max_steps:
                    break
                step += 1
                for group in opt.param_groups:
                    group["lr"] = cfg.lr_at(step)
                opt.zero_grad(set_to_none=True)
                rep = p3lm_loss(batch, model, dist)
                if not math.isfinite(rep.total) or rep.total > cfg.divergence:
                    raise DivergenceError(
                        f"training diverged at step {step} (epoch {epoch}): loss={rep.total}"
                    )
                rep.loss.backward()
                for p in params:
                    if p.grad is not None:
                        check_finite(p.grad, "backward")
                torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                opt.step()
                rep.step, rep.epoch, rep.loss = step, epoch, None
                reports.append(rep)
                if log_fh is not None:
                    log_fh.write(log_line(rep) + "\n")
                if on_step is not None:
                    on_step(rep)
            if out_dir is not None and step > 0:
                path = checkpoint_path(out_dir, epoch)
                save_checkpoint(model, path)
                checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
        model.eval()
    return TrainResult(reports, checkpoints)
