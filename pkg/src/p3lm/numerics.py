"""Dense-array primitives, RNG streams, gradient checking and the checkpoint container.

Tensors and reverse-mode differentiation come from torch; this module adds the
checked entry points the rest of the package relies on (shape errors that name
both operands, masks that refuse to normalise an empty row, finiteness guards).
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch

MASK_NEG = -1e9
CHECKPOINT_MAGIC = b"P3LMCKPT"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, op: str, detail: str = "non-finite value"):
        super().__init__(f"{op}: {detail}")
        self.op = op


class CheckpointError(ValueError):
    pass


def check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(op)
    return x


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


def _derive_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based random stream (Philox) keyed by ``(seed, name)``.

    ``split`` derives an independent child stream, so each consumer (order
    sampling, masking, init, dropout) draws from its own sequence and adding
    draws in one never shifts another.
    """

    def __init__(self, seed: int, name: str = "root", counter: int = 0):
        self.seed = int(seed)
        self.name = name
        self._bitgen = np.random.Philox(key=_derive_key(self.seed, name))
        if counter:
            self._bitgen.advance(counter)
        self._start = counter
        self.generator = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        state = self._bitgen.state["state"]
        # Philox4x64 counter is a 256-bit integer stored as four words.
        words = state["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(words)))

    def split(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    def random(self) -> float:
        return float(self.generator.random())

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in ``[low, high)``."""
        return int(self.generator.integers(low, high))

    def torch_generator(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(int(self.generator.integers(0, 2**63 - 1)))
        return gen

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, name={self.name!r})"


# ---------------------------------------------------------------------------
# checked ops
# ---------------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over ``dim`` where ``mask == 0`` entries receive probability exactly 0.

    The mask is applied additively (``MASK_NEG``) before normalising; ``exp``
    underflows to an exact zero for excluded slots, so their score values never
    reach the output.
    """
    mask = mask.to(torch.bool)
    try:
        mask = mask.expand_as(scores)
    except RuntimeError as exc:
        raise DimensionError(
            f"masked_softmax: mask shape {tuple(mask.shape)} does not fit scores {tuple(scores.shape)}"
        ) from exc
    if not mask.any(dim=dim).all():
        raise InvalidMaskError("masked_softmax: a row has no allowed entry")
    additive = (~mask).to(scores.dtype) * MASK_NEG
    return torch.softmax(scores + additive, dim=dim)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    mean = x.mean(-1, keepdim=True)
    var = (x - mean).pow(2).mean(-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def embedding_lookup(table: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: index out of range for table of shape {tuple(table.shape)}"
        )
    return table[indices]


def cross_entropy_from_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row negative log-likelihood of ``target`` under ``softmax(logits)``."""
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return check_finite(nll, "cross_entropy_from_logits")


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into every parameter's ``.grad``."""
    check_finite(loss.detach(), "backward")
    loss.backward()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tolerance: float
    worst: Optional[str] = None
    entries: List[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    coords: Optional[Iterable[tuple]] = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``f()`` with central differences.

    Parameters are perturbed in place (and restored). ``coords`` selects
    ``(name, flat_index)`` pairs; by default every element is checked. Run in
    float64 for meaningful tolerances.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in params.items()}
    if coords is None:
        coords = [(n, i) for n, p in params.items() for i in range(p.numel())]

    report = GradCheckReport(0.0, 0.0, 0, tolerance)
    with torch.no_grad():
        for name, idx in coords:
            flat = params[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = f().item()
            flat[idx] = orig - step
            down = f().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[name].view(-1)[idx].item()
            rel = relative_error(a, numeric, floor)
            report.checked += 1
            report.entries.append((name, idx, a, numeric, rel))
            report.max_abs_error = max(report.max_abs_error, abs(a - numeric))
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = f"{name}[{idx}] analytic={a:.6e} numeric={numeric:.6e}"
    return report


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _header() -> bytes:
    return CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + b"\0" * 4


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialise named arrays: 16-byte header then, per entry, u64 name length,
    name bytes, u64 rank, u64 dims, float32 values (all little-endian)."""
    out = [_header()]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = name.encode("utf-8")
        out.append(struct.pack("<Q", len(raw)))
        out.append(raw)
        out.append(struct.pack("<Q", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_arrays(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    arrays: Dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            arrays[name] = values.reshape(shape).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint at byte {pos}") from exc
    return arrays


def atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_arrays(path: str, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_arrays(arrays))


def load_arrays(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_arrays(fh.read())


def state_arrays(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(arrays))
    extra = sorted(set(arrays) - set(own))
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
    for k, v in arrays.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{k}: shape {tuple(v.shape)} != {tuple(own[k].shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v)).to(own[k].dtype) for k, v in arrays.items()})


def param_count(params: Sequence[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)
