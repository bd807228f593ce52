"""Image metrics and token-entropy analytics.

Fréchet distances here use a small frozen convolutional extractor whose
weights are drawn from a fixed seed, so values are comparable only within
this package (call it Fréchet Feature Distance, FFD).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import atomic_write_bytes
from .quantizers import utilization

EXTRACTOR_SEED = 1234567
FEATURE_WIDTH = 64
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class FeatureExtractor(nn.Module):
    """Frozen three-stage conv net; weights are a pure function of ``seed``."""

    widths = (16, 32, FEATURE_WIDTH)

    def __init__(self, seed: int = EXTRACTOR_SEED):
        super().__init__()
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c_in = 3
        for i, c_out in enumerate(self.widths):
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.1)
            self.convs.append(conv)
            c_in = c_out
        self.requires_grad_(False)
        self.eval()

    def stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.gelu(conv(x))
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)[-1].mean(dim=(2, 3))


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("GaussianStats needs n >= 2")
        if self.sigma.shape != (self.mu.shape[0],) * 2:
            raise ValueError("sigma shape does not match mu")


def stats_from_features(features: np.ndarray) -> GaussianStats:
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples for covariance")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2, n)


@torch.no_grad()
def extract_features(images: torch.Tensor, extractor: FeatureExtractor, batch_size: int = 256) -> np.ndarray:
    chunks = [extractor(images[i:i + batch_size].float()).double().numpy()
              for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def collect_stats(images: torch.Tensor, extractor: FeatureExtractor, batch_size: int = 256) -> GaussianStats:
    if images.shape[0] < 2:
        raise ValueError("collect_stats needs at least 2 images")
    return stats_from_features(extract_features(images, extractor, batch_size))


def _sym_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -tol:
        raise ValueError(f"matrix not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats, shrinkage: float = 1e-6, tol: float = 1e-6) -> float:
    """‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½).

    The trace of the square root is taken from the eigenvalues of the
    symmetric product Σa^½ Σb Σa^½. When either covariance has an eigenvalue
    below ``shrinkage``, ``shrinkage·I`` is added to both before anything
    else, so identical inputs still give zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    sa, sb = a.sigma, b.sigma
    if min(np.linalg.eigvalsh(sa).min(), np.linalg.eigvalsh(sb).min()) < shrinkage:
        eye = np.eye(sa.shape[0]) * shrinkage
        sa, sb = sa + eye, sb + eye
    root_a = _sym_sqrt(sa, tol)
    inner = root_a @ sb @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -tol:
        raise ValueError(f"indefinite covariance product (min eigenvalue {w.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mu - b.mu
    return float(max(diff @ diff + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt, 0.0))


def frechet_feature_distance(x: torch.Tensor, y: torch.Tensor, extractor: FeatureExtractor | None = None) -> float:
    extractor = extractor or FeatureExtractor()
    return frechet_distance(collect_stats(x, extractor), collect_stats(y, extractor))


class PsnrResult(NamedTuple):
    db: float
    exact: bool


PSNR_CAP = 99.0


def psnr(x: torch.Tensor, y: torch.Tensor, max_value: float = 2.0) -> PsnrResult:
    """Peak signal-to-noise ratio. Exact matches report 99 dB with ``exact=True``."""
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float((x.double() - y.double()).pow(2).mean())
    if mse == 0.0:
        return PsnrResult(PSNR_CAP, True)
    return PsnrResult(min(10.0 * math.log10(max_value ** 2 / mse), PSNR_CAP), False)


def to_gray01(images: torch.Tensor) -> torch.Tensor:
    """[-1, 1] RGB (B, 3, H, W) -> [0, 1] luma (B, 1, H, W)."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    x = (images.double() + 1.0) / 2.0
    if x.shape[1] == 3:
        x = 0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]
    return x


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    x = F.conv2d(x, win.view(1, 1, 1, -1))
    return F.conv2d(x, win.view(1, 1, -1, 1))


def _ssim_terms(x, y, win, c1, c2):
    mx, my = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mx * mx
    syy = _filter(y * y, win) - my * my
    sxy = _filter(x * y, win) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum.mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim_scales(side: int, window: int = 11, max_scales: int = 5) -> int:
    scales = 0
    while scales < max_scales and side >= window:
        scales += 1
        side //= 2
    return scales


def ms_ssim(x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5,
            reduce: bool = True) -> float | torch.Tensor:
    """Multi-scale SSIM of [-1, 1] images after luma conversion (MAX = 1).

    Uses as many of the five standard scales as the image side allows
    (valid filtering at each scale), renormalizing the weights. Negative
    contrast-structure terms are clamped to 0 so the result lies in [0, 1].
    """
    gx, gy = to_gray01(x), to_gray01(y)
    if gx.shape != gy.shape:
        raise ValueError(f"ms_ssim: shape mismatch {tuple(gx.shape)} vs {tuple(gy.shape)}")
    scales = ms_ssim_scales(min(gx.shape[-2:]), window)
    if scales == 0:
        raise ValueError(f"image side {min(gx.shape[-2:])} too small for an {window}-tap window")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=torch.float64)
    weights = weights / weights.sum()
    win = gaussian_window(window, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    result = torch.ones(gx.shape[0], dtype=torch.float64)
    for j in range(scales):
        lum, cs = _ssim_terms(gx, gy, win, c1, c2)
        term = lum * cs if j == scales - 1 else cs
        result = result * term.clamp(min=0) ** weights[j]
        if j < scales - 1:
            gx, gy = F.avg_pool2d(gx, 2), F.avg_pool2d(gy, 2)
    return float(result.mean()) if reduce else result


# --------------------------------------------------------------------------
# entropy analytics
# --------------------------------------------------------------------------


def entropy_bits(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(max(-(p * np.log2(p)).sum(), 0.0))


@dataclass
class EntropyReport:
    per_position: list[float]
    total: float
    expected_per_position: float
    skew: float
    utilization: float
    degenerate: bool
    codebook_size: int
    sequence_length: int
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def entropy_report(tokens, codebook_size: int, sequence_length: int | None = None) -> EntropyReport:
    """Per-position and pooled token entropies (bits) of a token set.

    ``tokens``: (n, N) or (n, h, w) indices. skew = 1 - 2^{mean H(X_i)} / 2^{H(X)}.
    """
    arr = np.asarray(tokens, dtype=np.int64)
    arr = arr.reshape(arr.shape[0], -1)
    n, length = arr.shape
    if sequence_length is not None and length != sequence_length:
        raise ValueError(f"sequence length {length} != expected {sequence_length}")
    if n == 0:
        raise ValueError("entropy_report of an empty token set")
    if arr.min() < 0 or arr.max() >= codebook_size:
        raise ValueError("token index outside codebook")
    per_pos = [entropy_bits(np.bincount(arr[:, i], minlength=codebook_size)) for i in range(length)]
    pooled_counts = np.bincount(arr.ravel(), minlength=codebook_size)
    total = entropy_bits(pooled_counts)
    expected = float(np.mean(per_pos))
    if expected > total + 1e-9:
        raise AssertionError(f"mean per-position entropy {expected} exceeds pooled entropy {total}")
    degenerate = total == 0.0
    skew = 0.0 if degenerate else float(1.0 - 2.0 ** (min(expected, total) - total))
    return EntropyReport(per_pos, total, expected, skew, utilization(pooled_counts), degenerate,
                         codebook_size, length, n)


def conditional_entropy_bound(report_or_entropies) -> np.ndarray:
    """Per-position entropies converted to nats: upper bounds on H(X_i | X_<i)."""
    bits = report_or_entropies.per_position if isinstance(report_or_entropies, EntropyReport) else report_or_entropies
    return np.asarray(bits, dtype=np.float64) * math.log(2)


def write_metric_report(path, metrics: dict[str, float], n: int, config_hash: str,
                        extractor_seed: int = EXTRACTOR_SEED) -> dict:
    doc = {
        "metrics": [{"name": k, "value": float(v)} for k, v in sorted(metrics.items())],
        "n": int(n),
        "config_hash": config_hash,
        "extractor_seed": extractor_seed,
    }
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return doc
