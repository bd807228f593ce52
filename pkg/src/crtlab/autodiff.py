"""Differentiable op set, optimizer, schedules and checkpoints.

Gradients come from torch autograd; this module pins down the op contracts
(shape validation, causal masking, stop-gradient), the optimizer wrapper
that carries parameter names, learning-rate/weight schedules, and the
binary checkpoint format shared by every trained model.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

ADAM_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class ScheduleClampWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> torch.Tensor:
    """2-D convolution over NCHW input.

    ``padding=None`` means "same" padding for odd kernels at stride 1 and
    ``(k - stride) // 2`` otherwise, so a stride-2 layer with k=4 halves the side.
    """
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    k = weight.shape[-1]
    if padding is None:
        padding = (k - 1) // 2 if stride == 1 else (k - stride) // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = 1e-5) -> torch.Tensor:
    if weight is not None and weight.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if weight.shape != x.shape[-1:]:
        raise ShapeError("rms_norm", x.shape, weight.shape)
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def qk_norm(q: torch.Tensor, k: torch.Tensor, q_weight: torch.Tensor, k_weight: torch.Tensor,
            eps: float = 1e-5) -> tuple[torch.Tensor, torch.Tensor]:
    """Layer-normalize queries and keys over the head dimension."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("qk_norm", q.shape, k.shape)
    return layer_norm(q, q_weight, None, eps), layer_norm(k, k_weight, None, eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Token cross-entropy in nats; ``logits`` is (..., K), ``targets`` (...)."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    flat = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    flat = flat.view(targets.shape)
    if reduction == "none":
        return flat
    if reduction == "mean":
        return flat.mean()
    if reduction == "sum":
        return flat.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def causal_self_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention with a lower-triangular mask.

    q, k, v: (B, H, T, Dh). Masked scores are -inf so the softmax weight of a
    future position is exactly zero, which keeps position i bitwise
    independent of inputs at positions > i.
    """
    if q.shape != k.shape or k.shape != v.shape or q.dim() != 4:
        raise ShapeError("causal_self_attention", q.shape, k.shape, v.shape)
    t = q.shape[-2]
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    mask = torch.ones(t, t, dtype=torch.bool, device=q.device).triu(1)
    scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def embedding(indices: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError("embedding", indices.shape, table.shape)
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise ShapeError("embedding", indices.shape, table.shape, detail="index out of range")
    return F.embedding(indices, table)


def forward_backward(fn: Callable[..., torch.Tensor | tuple], inputs: Sequence[torch.Tensor]):
    """Evaluate ``fn(*inputs)`` and differentiate its scalar loss.

    ``fn`` returns either the loss or ``(loss, *extra_outputs)``. Returns
    ``(outputs, grads)`` where ``outputs`` is the tuple returned by ``fn`` and
    ``grads`` has one entry per input (``None`` for inputs that do not
    require grad; zeros for those the loss does not reach).
    """
    out = fn(*inputs)
    outputs = out if isinstance(out, tuple) else (out,)
    loss = outputs[0]
    if loss.numel() != 1:
        raise ShapeError("forward_backward", loss.shape, detail="loss must be a scalar")
    wrt = [x for x in inputs if x.requires_grad]
    grads_wrt = torch.autograd.grad(loss, wrt, allow_unused=True) if wrt else ()
    it = iter(grads_wrt)
    grads = []
    for x in inputs:
        if not x.requires_grad:
            grads.append(None)
            continue
        g = next(it)
        grads.append(torch.zeros_like(x) if g is None else g)
    return outputs, grads


def finite_difference_grad(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], index: int,
                           h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn`` w.r.t. ``inputs[index]``."""
    xs = [x.detach().clone() for x in inputs]
    target = xs[index]
    grad = torch.zeros_like(target)
    flat, gflat = target.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(*xs))
            flat[i] = orig - h
            down = float(fn(*xs))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class AdamW:
    """Named-parameter AdamW (decoupled weight decay, eps=1e-8).

    Wraps ``torch.optim.AdamW`` so every step first checks gradients for
    non-finite values and reports the offending parameter by name.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.nn.Parameter]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.95), weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValueError("betas must lie in [0, 1)")
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.names = {id(p): n for n, p in self.named}
        self.opt = torch.optim.AdamW([p for _, p in self.named], lr=lr, betas=betas,
                                     weight_decay=weight_decay, eps=ADAM_EPS, foreach=False)

    @property
    def params(self) -> list[torch.nn.Parameter]:
        return [p for _, p in self.named]

    def set_lr(self, lr: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = lr

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.set_lr(lr)
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(name)
        self.opt.step()

    def step_count(self, name: str) -> int:
        p = dict(self.named)[name]
        state = self.opt.state.get(p, {})
        return int(state["step"]) if "step" in state else 0

    def state_tensors(self) -> dict[str, torch.Tensor]:
        """Flatten optimizer moments into ``{"<param>/<slot>": tensor}``."""
        out = {}
        for name, p in self.named:
            for slot, value in self.opt.state.get(p, {}).items():
                out[f"{name}/{slot}"] = value.detach().clone() if torch.is_tensor(value) else torch.tensor(value)
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor]) -> None:
        for name, p in self.named:
            slots = {k.rsplit("/", 1)[1]: v for k, v in tensors.items() if k.rsplit("/", 1)[0] == name}
            if slots:
                self.opt.state[p] = {k: v.clone() for k, v in slots.items()}


def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float,
               betas: tuple[float, float] = (0.9, 0.95), weight_decay: float = 0.0,
               optimizer: AdamW | None = None) -> AdamW:
    """Apply one AdamW step to ``params`` given explicit ``grads``.

    Pass the returned optimizer back in to continue from its moments.
    """
    if optimizer is None:
        optimizer = AdamW([(f"p{i}", p) for i, p in enumerate(params)], lr, betas, weight_decay)
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    optimizer.step(lr)
    return optimizer


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------

SCHEDULE_KINDS = ("constant", "linear-warmup-then-constant", "linear-warmup-then-cosine", "cosine-ramp-window")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    base: float
    total_steps: int
    warmup_start: float = 0.0
    warmup_steps: int = 0
    window_start: int = 0
    window_length: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")
        if self.base < 0 or self.warmup_start < 0:
            raise ValueError("schedule values must be non-negative")


def schedule_at(spec: ScheduleSpec, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if step > spec.total_steps:
        warnings.warn(f"step {step} beyond total {spec.total_steps}; clamped", ScheduleClampWarning)
        step = spec.total_steps
    if spec.kind == "constant":
        return spec.base
    if spec.kind == "cosine-ramp-window":
        if step < spec.window_start:
            return 0.0
        if spec.window_length <= 0 or step >= spec.window_start + spec.window_length:
            return spec.base
        t = (step - spec.window_start) / spec.window_length
        return 0.5 * spec.base * (1.0 - math.cos(math.pi * t))
    if step < spec.warmup_steps:
        frac = step / spec.warmup_steps
        return spec.warmup_start + (spec.base - spec.warmup_start) * frac
    if spec.kind == "linear-warmup-then-constant":
        return spec.base
    decay = spec.total_steps - spec.warmup_steps
    if decay <= 0:
        return spec.base
    t = (step - spec.warmup_steps) / decay
    return max(0.0, 0.5 * spec.base * (1.0 + math.cos(math.pi * t)))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"CRTCKPT\x00"
CKPT_VERSION = 1
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.int32: 3}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<i4"}


def _write_records(buf: io.BufferedIOBase, tensors: Mapping[str, torch.Tensor]) -> None:
    import numpy as np

    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            t = t.float()
        code = _DTYPES[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(_NP_DTYPES[code], copy=False).tobytes())


def _read_records(buf: io.BufferedIOBase) -> dict[str, torch.Tensor]:
    import numpy as np

    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, n).decode()
        code, ndim = struct.unpack("<BB", _read_exact(buf, 2))
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        dt = np.dtype(_NP_DTYPES[code])
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_read_exact(buf, size * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = torch.from_numpy(arr.copy()).to(_DTYPES_INV[code])
    return out


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: Mapping[str, torch.Tensor], optimizers: Mapping[str, AdamW] | None = None,
                    meta: dict | None = None) -> None:
    """Write parameters, then an optimizer manifest and its state records.

    Layout: magic, u32 version, u32 meta-length + JSON meta, parameter
    records, u32 manifest-length + JSON manifest, optimizer records. Each
    record is (u16 name length, name, u8 dtype, u8 ndim, u32 dims, raw LE data).
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta_raw = json.dumps(dict(meta or {}, torch_threads=torch.get_num_threads()), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_raw)) + meta_raw)
    _write_records(buf, params)
    opt_tensors: dict[str, torch.Tensor] = {}
    manifest = {}
    for opt_name, opt in (optimizers or {}).items():
        state = opt.state_tensors()
        manifest[opt_name] = sorted(state)
        opt_tensors.update({f"{opt_name}::{k}": v for k, v in state.items()})
    man_raw = json.dumps(manifest, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(man_raw)) + man_raw)
    _write_records(buf, opt_tensors)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, dict[str, torch.Tensor]], dict]:
    """Return ``(params, optimizer_states, meta)`` from a checkpoint file."""
    with open(path, "rb") as f:
        if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, n))
        params = _read_records(f)
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        manifest = json.loads(_read_exact(f, n))
        flat = _read_records(f)
    states = {name: {k: flat[f"{name}::{k}"] for k in keys} for name, keys in manifest.items()}
    return params, states, meta
