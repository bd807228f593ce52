"""Vector quantization (cosine lookup on a projected latent) and FSQ."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import ShapeError, atomic_write_bytes


@dataclass
class QuantizerConfig:
    mode: str = "vq"
    codebook_size: int = 256
    code_dim: int = 8
    beta: float = 0.25
    input_dim: int = 64
    fsq_levels: tuple[int, ...] = (8, 8, 4)
    # every this many training steps, codes unused since the last check are
    # re-seeded from current batch latents (0 disables)
    restart_interval: int = 25

    def __post_init__(self):
        if self.mode not in ("vq", "fsq"):
            raise ValueError(f"unknown quantizer mode {self.mode!r}")
        if self.mode == "vq" and (self.codebook_size < 2 or self.code_dim < 1):
            raise ValueError("VQ needs codebook_size >= 2 and code_dim >= 1")
        if self.mode == "fsq" and any(level < 2 for level in self.fsq_levels):
            raise ValueError("FSQ levels must be >= 2")

    @property
    def effective_size(self) -> int:
        return math.prod(self.fsq_levels) if self.mode == "fsq" else self.codebook_size

    @property
    def out_dim(self) -> int:
        return len(self.fsq_levels) if self.mode == "fsq" else self.code_dim


@dataclass
class QuantizationResult:
    indices: torch.Tensor          # (B, H, W) int64
    quantized: torch.Tensor        # (B, d, H, W), straight-through w.r.t. the latent
    codes: torch.Tensor            # (B, d, H, W), exact codebook rows / grid points
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor
    latent: torch.Tensor | None = None   # (B, d, H, W) the vectors actually quantized (normalized / bounded)


class StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, e):
        return e.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Forward ``e`` exactly; route the incoming gradient unchanged to ``z``."""
    if z.shape != e.shape:
        raise ShapeError("straight_through", z.shape, e.shape)
    return StraightThrough.apply(z, e)


def vq_lookup(z: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine-similarity argmax of each row of ``z`` (..., d) over codebook rows.

    Returns ``(indices, degenerate)`` where ``degenerate`` marks zero input
    vectors, which map to index 0. Ties go to the lowest index.
    """
    if z.shape[-1] != codebook.shape[-1]:
        raise ShapeError("vq_lookup", z.shape, codebook.shape)
    flat = z.reshape(-1, z.shape[-1])
    norms = flat.norm(dim=-1)
    degenerate = norms == 0
    zn = flat / torch.where(degenerate, torch.ones_like(norms), norms).unsqueeze(-1)
    cn = F.normalize(codebook, dim=-1)
    sims = zn @ cn.t()
    idx = sims.argmax(dim=-1)
    idx = torch.where(degenerate, torch.zeros_like(idx), idx)
    return idx.view(z.shape[:-1]), degenerate.view(z.shape[:-1])


def vq_losses(z: torch.Tensor, e: torch.Tensor, beta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """(codebook, commitment) losses; squared norms over the last axis, meaned over the rest."""
    if z.shape != e.shape:
        raise ShapeError("vq_losses", z.shape, e.shape)
    codebook = (z.detach() - e).pow(2).sum(-1).mean()
    commitment = beta * (z - e.detach()).pow(2).sum(-1).mean()
    return codebook, commitment


def utilization(histogram) -> float:
    hist = torch.as_tensor(histogram)
    if hist.numel() == 0 or int(hist.sum()) == 0:
        raise ValueError("utilization of an empty histogram")
    return float((hist > 0).sum()) / hist.numel()


def _linear_projection(in_dim: int, out_dim: int, identity_init: bool) -> nn.Linear:
    proj = nn.Linear(in_dim, out_dim, bias=False)
    if identity_init:
        if in_dim != out_dim:
            raise ValueError("identity projection needs equal widths")
        with torch.no_grad():
            proj.weight.copy_(torch.eye(in_dim))
    return proj


class VectorQuantizer(nn.Module):
    """Linear projection to ``code_dim`` followed by cosine codebook lookup.

    Both the projected latents and the stored rows are l2-normalized before
    the lookup, the codebook/commitment losses and the straight-through
    estimator, so the decoder always receives unit-norm code vectors.
    """

    def __init__(self, cfg: QuantizerConfig, identity_projection: bool = False):
        super().__init__()
        self.cfg = cfg
        self.proj = _linear_projection(cfg.input_dim, cfg.code_dim, identity_projection)
        table = F.normalize(torch.randn(cfg.codebook_size, cfg.code_dim), dim=-1)
        self.codebook = nn.Parameter(table)
        self.register_buffer("usage", torch.zeros(cfg.codebook_size, dtype=torch.int64), persistent=False)
        self.register_buffer("window_usage", torch.zeros(cfg.codebook_size, dtype=torch.int64), persistent=False)
        self.window_steps = 0
        self.restarted = 0
        self.degenerate_inputs = 0

    @property
    def size(self) -> int:
        return self.cfg.codebook_size

    @torch.no_grad()
    def _restart_dead(self, zl: torch.Tensor) -> None:
        """Re-seed codes that went unused over the last window with random batch latents."""
        dead = (self.window_usage == 0).nonzero().flatten()
        if len(dead):
            pool = F.normalize(zl.reshape(-1, zl.shape[-1]), dim=-1)
            pick = torch.randint(len(pool), (len(dead),), device=pool.device)
            self.codebook[dead] = pool[pick]
            self.restarted += len(dead)
        self.window_usage.zero_()
        self.window_steps = 0

    def project(self, z: torch.Tensor) -> torch.Tensor:
        """(B, C_in, H, W) -> (B, d, H, W)."""
        if z.dim() != 4 or z.shape[1] != self.cfg.input_dim:
            raise ShapeError("project_latent", z.shape, (self.cfg.input_dim,))
        return self.proj(z.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def reset_usage(self) -> None:
        self.usage.zero_()
        self.degenerate_inputs = 0

    def _record(self, idx: torch.Tensor) -> None:
        self.usage += torch.bincount(idx.reshape(-1), minlength=self.size)

    def normalized_codebook(self) -> torch.Tensor:
        return F.normalize(self.codebook, dim=-1)

    def codes_from_indices(self, indices: torch.Tensor) -> torch.Tensor:
        """(B, H, W) -> (B, d, H, W) unit-norm code vectors."""
        return self.normalized_codebook()[indices].permute(0, 3, 1, 2)

    def forward(self, z: torch.Tensor) -> QuantizationResult:
        zl = z.permute(0, 2, 3, 1)
        interval = self.cfg.restart_interval
        if self.training and interval and self.window_steps >= interval:
            self._restart_dead(zl.detach())
        idx, degenerate = vq_lookup(zl.detach(), self.codebook.detach())
        self.degenerate_inputs += int(degenerate.sum())
        self._record(idx)
        if self.training and interval:
            self.window_usage += torch.bincount(idx.reshape(-1), minlength=self.size)
            self.window_steps += 1
        zn = F.normalize(z, dim=1)
        e = self.normalized_codebook()[idx].permute(0, 3, 1, 2)
        cb, commit = vq_losses(zn.permute(0, 2, 3, 1), e.permute(0, 2, 3, 1), self.cfg.beta)
        return QuantizationResult(idx, straight_through(zn, e), e.detach(), cb, commit, zn)


def fsq_round(v: torch.Tensor, levels) -> tuple[torch.Tensor, torch.Tensor]:
    """Round normalized values (..., D) onto the FSQ grid.

    Dimension j with L levels has grid ``{(i - L//2) / (L//2)}`` for
    ``i in 0..L-1``. Returns ``(per-dim indices, grid values)``; no gradient.
    """
    lv = torch.as_tensor(levels, dtype=v.dtype, device=v.device)
    half = torch.floor(lv / 2)
    r = torch.round(v * half)
    r = torch.minimum(torch.maximum(r, -half), lv - 1 - half)
    return (r + half).long(), r / half


def fsq_bound(z: torch.Tensor, levels, eps: float = 1e-3) -> torch.Tensor:
    """tanh squashing so rounding reaches exactly L values per dimension; output normalized."""
    lv = torch.as_tensor(levels, dtype=z.dtype, device=z.device)
    half_l = (lv - 1) * (1 + eps) / 2
    offset = torch.where(lv % 2 == 0, torch.full_like(lv, 0.5), torch.zeros_like(lv))
    shift = torch.atanh(offset / half_l)
    return (torch.tanh(z + shift) * half_l - offset) / torch.floor(lv / 2)


def fsq_composite_index(per_dim: torch.Tensor, levels) -> torch.Tensor:
    """Mixed-radix combination; the first dimension is most significant."""
    idx = torch.zeros(per_dim.shape[:-1], dtype=torch.int64, device=per_dim.device)
    for j, level in enumerate(levels):
        idx = idx * int(level) + per_dim[..., j]
    return idx


def fsq_split_index(index: torch.Tensor, levels) -> torch.Tensor:
    parts = []
    rest = index.clone()
    for level in reversed(list(levels)):
        parts.append(rest % int(level))
        rest = rest // int(level)
    return torch.stack(parts[::-1], dim=-1)


def fsq_grid_from_index(index: torch.Tensor, levels, dtype=torch.float32) -> torch.Tensor:
    per_dim = fsq_split_index(index, levels).to(dtype)
    half = torch.floor(torch.as_tensor(levels, dtype=dtype) / 2)
    return (per_dim - half) / half


def fsq_quantize(z: torch.Tensor, levels) -> tuple[torch.Tensor, torch.Tensor]:
    """Bound, round with straight-through, and index. Returns (indices, quantized)."""
    b = fsq_bound(z, levels)
    per_dim, grid = fsq_round(b.detach(), levels)
    return fsq_composite_index(per_dim, levels), straight_through(b, grid)


class FSQuantizer(nn.Module):
    def __init__(self, cfg: QuantizerConfig, identity_projection: bool = False):
        super().__init__()
        self.cfg = cfg
        self.levels = tuple(int(x) for x in cfg.fsq_levels)
        self.proj = _linear_projection(cfg.input_dim, len(self.levels), identity_projection)
        self.register_buffer("usage", torch.zeros(self.size, dtype=torch.int64), persistent=False)
        self.degenerate_inputs = 0

    @property
    def size(self) -> int:
        return math.prod(self.levels)

    def project(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.input_dim:
            raise ShapeError("project_latent", z.shape, (self.cfg.input_dim,))
        return self.proj(z.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def reset_usage(self) -> None:
        self.usage.zero_()

    def codes_from_indices(self, indices: torch.Tensor) -> torch.Tensor:
        return fsq_grid_from_index(indices, self.levels).permute(0, 3, 1, 2)

    def forward(self, z: torch.Tensor) -> QuantizationResult:
        zl = z.permute(0, 2, 3, 1)
        bounded = fsq_bound(zl, self.levels)
        per_dim, grid = fsq_round(bounded.detach(), self.levels)
        idx = fsq_composite_index(per_dim, self.levels)
        q = straight_through(bounded, grid)
        self.usage += torch.bincount(idx.reshape(-1), minlength=self.size)
        zero = zl.new_zeros(())
        return QuantizationResult(idx, q.permute(0, 3, 1, 2), q.detach().permute(0, 3, 1, 2), zero, zero,
                                  bounded.permute(0, 3, 1, 2))


def build_quantizer(cfg: QuantizerConfig, identity_projection: bool = False) -> nn.Module:
    cls = VectorQuantizer if cfg.mode == "vq" else FSQuantizer
    return cls(cfg, identity_projection)


# --------------------------------------------------------------------------
# token dumps
# --------------------------------------------------------------------------

TOKEN_MAGIC = b"CRTTOKS\x00"
TOKEN_VERSION = 1
_TOKEN_HEADER = struct.Struct("<8sIIIII")


class TokenDumpError(ValueError):
    pass


def write_token_dump(path, tokens, codebook_size: int) -> None:
    """tokens: (n_images, grid_h, grid_w) integer array."""
    arr = np.asarray(tokens)
    if arr.ndim != 3:
        raise TokenDumpError(f"token array must be 3-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= codebook_size):
        raise TokenDumpError("token index outside codebook")
    n, h, w = arr.shape
    header = _TOKEN_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, codebook_size, h, w, n)
    atomic_write_bytes(path, header + arr.astype("<i4").tobytes())


def read_token_dump(path) -> tuple[np.ndarray, int]:
    """Returns ``(tokens (n, h, w) int64, codebook_size)``."""
    data = Path(path).read_bytes()
    if len(data) < _TOKEN_HEADER.size:
        raise TokenDumpError(f"{path}: truncated header")
    magic, version, k, h, w, n = _TOKEN_HEADER.unpack_from(data)
    if magic != TOKEN_MAGIC:
        raise TokenDumpError(f"{path}: bad magic")
    if version != TOKEN_VERSION:
        raise TokenDumpError(f"{path}: unsupported version {version}")
    payload = data[_TOKEN_HEADER.size:]
    if len(payload) != 4 * n * h * w:
        raise TokenDumpError(f"{path}: payload size {len(payload)} != {4 * n * h * w}")
    arr = np.frombuffer(payload, dtype="<i4").reshape(n, h, w).astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= k):
        raise TokenDumpError(f"{path}: index outside codebook of size {k}")
    return arr, k
