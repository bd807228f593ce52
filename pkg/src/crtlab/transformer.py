"""Llama-style causal transformer trunk shared by the CRT regularizer and the generator.

Pre-norm RMSNorm blocks, rotary position embeddings, layer-normalized
queries/keys, and a SwiGLU feed-forward. Width is always 64 per head.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from . import autodiff as ad

HEAD_DIM = 64


def swiglu_hidden(dim: int, multiple: int = 32) -> int:
    hidden = int(8 * dim / 3)
    return multiple * ((hidden + multiple - 1) // multiple)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return ad.rms_norm(x, self.weight, self.eps)


def rotary_tables(length: int, head_dim: int, base: float = 10000.0, dtype=torch.float32):
    inv = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = torch.outer(torch.arange(length, dtype=torch.float64), inv)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """x: (B, H, T, Dh); rotates interleaved pairs."""
    t = x.shape[-2]
    cos, sin = cos[:t].to(x.dtype), sin[:t].to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    def __init__(self, heads: int):
        super().__init__()
        dim = heads * HEAD_DIM
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)
        self.q_norm = nn.Parameter(torch.ones(HEAD_DIM))
        self.k_norm = nn.Parameter(torch.ones(HEAD_DIM))

    def forward(self, x, cos, sin):
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, HEAD_DIM).permute(2, 0, 3, 1, 4)
        q, k = ad.qk_norm(q, k, self.q_norm, self.k_norm)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        y = ad.causal_self_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(b, t, d))


class FeedForward(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        hidden = swiglu_hidden(dim)
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.down(ad.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, heads: int):
        super().__init__()
        dim = heads * HEAD_DIM
        self.attn_norm = RMSNorm(dim)
        self.attn = Attention(heads)
        self.ff_norm = RMSNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, cos, sin):
        x = x + self.attn(self.attn_norm(x), cos, sin)
        return x + self.ff(self.ff_norm(x))


class CausalTransformer(nn.Module):
    """Stack of causal blocks over (B, T, heads*64) inputs, with a final norm."""

    def __init__(self, layers: int, heads: int, max_len: int):
        super().__init__()
        self.dim = heads * HEAD_DIM
        self.max_len = max_len
        self.blocks = nn.ModuleList(Block(heads) for _ in range(layers))
        self.norm = RMSNorm(self.dim)
        cos, sin = rotary_tables(max_len, HEAD_DIM)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] > self.max_len:
            raise ad.ShapeError("causal_transformer", x.shape, detail=f"sequence longer than {self.max_len}")
        for block in self.blocks:
            x = block(x, self.rope_cos, self.rope_sin)
        return self.norm(x)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
