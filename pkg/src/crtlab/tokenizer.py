"""Stage 1: convolutional VQ auto-encoder with causal (CRT) regularization.

The CRT regularizer is a small causal transformer that predicts each
pre-quantization latent from the ones before it in raster order. Its L2
prediction error is added to the auto-encoder objective with an annealed
weight and backpropagated into the encoder; the regularizer itself is
trained by a separate optimizer on the un-weighted loss.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, ClassVar

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autodiff as ad
from .autodiff import AdamW, ScheduleSpec, schedule_at
from .config import apply_overrides, config_hash, dump_config_text, parse_config_text
from .metrics import FeatureExtractor
from .quantizers import QuantizationResult, QuantizerConfig, build_quantizer, utilization
from .synthdata import bicubic_resize
from .transformer import HEAD_DIM, CausalTransformer

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4
PARITY_COST_PER_TWO_LAYERS = 0.05


@dataclass
class LossWeights:
    vq: float = 1.0
    gan: float = 0.5
    perceptual: float = 1.0
    l2: float = 1.0


@dataclass
class GanConfig:
    enabled: bool = False
    window_start: int = 400
    window_length: int = 40
    clip: float = 0.01
    width: int = 32


@dataclass
class CrtConfig:
    ALIASES: ClassVar[dict[str, str]] = {"lambda": "lam"}

    enabled: bool = False
    layers: int = 2
    heads: int = 2
    lam: float = 4.0
    ramp_steps: int = 40
    pre_projection: bool = False
    weight_decay: float = 0.1


@dataclass
class TokenizerConfig:
    image_size: int = 32
    widths: tuple[int, ...] = (32, 64, 128)
    res_blocks: int = 2
    latent_dim: int = 64
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    gan: GanConfig = field(default_factory=GanConfig)
    crt: CrtConfig = field(default_factory=CrtConfig)
    lr: float = 1e-3
    warmup_start: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    betas: tuple[float, ...] = (0.9, 0.95)
    iterations: int = 2000
    batch_size: int = 32
    compute_parity: bool = True
    seed: int = 0
    log_interval: int = 50

    def __post_init__(self):
        if self.image_size % self.downsample:
            raise ValueError(f"image_size {self.image_size} not divisible by downsample factor {self.downsample}")
        if min(asdict(self.loss).values()) < 0 or self.crt.lam < 0:
            raise ValueError("loss weights must be non-negative")
        if self.quantizer.input_dim != self.latent_dim:
            self.quantizer = QuantizerConfig(**dict(asdict(self.quantizer), input_dim=self.latent_dim))

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    @property
    def grid_side(self) -> int:
        return self.image_size // self.downsample

    @property
    def tokens_per_image(self) -> int:
        return self.grid_side ** 2

    @property
    def crt_active(self) -> bool:
        return self.crt.enabled and self.crt.layers > 0

    @property
    def effective_iterations(self) -> int:
        if not self.compute_parity:
            return self.iterations
        return int(round(self.iterations * parity_multiplier(self)))

    def with_overrides(self, values: dict) -> "TokenizerConfig":
        return apply_overrides(self, values)


def parity_multiplier(cfg: TokenizerConfig) -> float:
    """Iteration budget multiplier: 5% less training per two regularizer layers."""
    if not cfg.crt_active:
        return 1.0
    return 1.0 - PARITY_COST_PER_TWO_LAYERS * cfg.crt.layers / 2


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.norm1, self.conv1 = _norm(c), nn.Conv2d(c, c, 3, padding=1)
        self.norm2, self.conv2 = _norm(c), nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        return x + self.conv2(F.silu(self.norm2(h)))


class Encoder(nn.Module):
    """Fully convolutional; one stride-2 conv per entry of ``widths``."""

    def __init__(self, widths, res_blocks: int, latent_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(3, widths[0], 3, padding=1)
        layers = []
        for i, c in enumerate(widths):
            layers += [ResBlock(c) for _ in range(res_blocks)]
            nxt = widths[min(i + 1, len(widths) - 1)]
            layers.append(nn.Conv2d(c, nxt, 4, stride=2, padding=1))
        self.body = nn.Sequential(*layers)
        self.norm_out = _norm(widths[-1])
        self.conv_out = nn.Conv2d(widths[-1], latent_dim, 1)

    def forward(self, x):
        return self.conv_out(F.silu(self.norm_out(self.body(self.conv_in(x)))))


class Decoder(nn.Module):
    def __init__(self, widths, res_blocks: int, code_dim: int):
        super().__init__()
        rev = list(widths)[::-1]
        self.conv_in = nn.Conv2d(code_dim, rev[0], 3, padding=1)
        layers = []
        for i, c in enumerate(rev):
            layers += [ResBlock(c) for _ in range(res_blocks)]
            nxt = rev[min(i + 1, len(rev) - 1)]
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, nxt, 3, padding=1)]
        self.body = nn.Sequential(*layers)
        self.norm_out = _norm(rev[-1])
        self.conv_out = nn.Conv2d(rev[-1], 3, 3, padding=1)

    def forward(self, z):
        return self.conv_out(F.silu(self.norm_out(self.body(self.conv_in(z)))))


@dataclass
class TokenizerOutput:
    latent: torch.Tensor          # pre-projection encoder output
    projected: torch.Tensor       # post-projection, pre-quantization (B, d, h, w); quant.latent is its normalized/bounded form
    quant: QuantizationResult
    recon: torch.Tensor           # unclamped decoder output


class Tokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig, identity_projection: bool = False):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.widths, cfg.res_blocks, cfg.latent_dim)
        self.quantizer = build_quantizer(cfg.quantizer, identity_projection)
        self.decoder = Decoder(cfg.widths, cfg.res_blocks, cfg.quantizer.out_dim)

    @property
    def codebook_size(self) -> int:
        return self.quantizer.size

    def _check_image(self, x: torch.Tensor, side: int | None) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ad.ShapeError("encode", x.shape, detail="expected (B, 3, H, W)")
        h, w = x.shape[-2:]
        if side is not None and (h, w) != (side, side):
            raise ad.ShapeError("encode", x.shape, detail=f"expected side {side}")
        if h != w or h % self.cfg.downsample:
            raise ad.ShapeError("encode", x.shape, detail=f"side must be divisible by {self.cfg.downsample}")

    def encode_latent(self, x: torch.Tensor, side: int | None = -1) -> torch.Tensor:
        self._check_image(x, self.cfg.image_size if side == -1 else side)
        return self.encoder(x)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Image (B, 3, R, R) -> projected pre-quantization grid (B, d, R/f, R/f)."""
        return self.quantizer.project(self.encode_latent(x))

    def decode(self, codes: torch.Tensor, any_size: bool = False) -> torch.Tensor:
        """Quantized grid (B, d, h, w) -> image clamped to [-1, 1]."""
        side = self.cfg.grid_side
        if codes.dim() != 4 or codes.shape[1] != self.cfg.quantizer.out_dim or (
                not any_size and tuple(codes.shape[-2:]) != (side, side)):
            raise ad.ShapeError("decode", codes.shape, (self.cfg.quantizer.out_dim, side, side))
        return self.decoder(codes).clamp(-1.0, 1.0)

    def forward(self, x: torch.Tensor, side: int | None = -1) -> TokenizerOutput:
        latent = self.encode_latent(x, side)
        projected = self.quantizer.project(latent)
        quant = self.quantizer(projected)
        return TokenizerOutput(latent, projected, quant, self.decoder(quant.quantized))

    @torch.no_grad()
    def tokens(self, x: torch.Tensor, batch_size: int = 256, side: int | None = -1) -> torch.Tensor:
        """Images -> (B, h, w) indices; does not touch the usage histogram."""
        was = self.training
        self.eval()
        usage = self.quantizer.usage.clone()
        out = torch.cat([self(x[i:i + batch_size], side).quant.indices for i in range(0, x.shape[0], batch_size)])
        self.quantizer.usage.copy_(usage)
        self.train(was)
        return out

    @torch.no_grad()
    def decode_indices(self, indices: torch.Tensor, any_size: bool = False) -> torch.Tensor:
        return self.decode(self.quantizer.codes_from_indices(indices), any_size=any_size)

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor, batch_size: int = 256, side: int | None = -1) -> torch.Tensor:
        return torch.cat([self.decode_indices(self.tokens(x[i:i + batch_size], side=side), any_size=True)
                          for i in range(0, x.shape[0], batch_size)])


def grid_to_sequence(grid: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w) -> (B, h*w, C), row-major raster order."""
    return grid.flatten(2).transpose(1, 2)


def sequence_to_grid(seq: torch.Tensor, side: int) -> torch.Tensor:
    b, n, c = seq.shape
    if n != side * side:
        raise ad.ShapeError("sequence_to_grid", seq.shape, detail=f"side {side}")
    return seq.transpose(1, 2).reshape(b, c, side, side)


class CrtRegularizer(nn.Module):
    """Causal transformer predicting latent i from a learned begin-of-image slot and latents < i.

    Same block architecture as the generator, with a linear input layer
    instead of a token embedding and a linear output instead of a vocabulary head.
    """

    def __init__(self, latent_dim: int, layers: int, heads: int, seq_len: int):
        super().__init__()
        dim = heads * HEAD_DIM
        self.seq_len = seq_len
        self.inp = nn.Linear(latent_dim, dim)
        self.boi = nn.Parameter(torch.randn(dim) * 0.02)
        self.trunk = CausalTransformer(layers, heads, max_len=seq_len)
        self.out = nn.Linear(dim, latent_dim)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        b = seq.shape[0]
        h = torch.cat([self.boi.expand(b, 1, -1), self.inp(seq[:, :-1])], dim=1)
        return self.out(self.trunk(h))


def crt_loss(seq: torch.Tensor, regularizer: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Mean over positions of ‖prediction − latent‖² for a (B, N, d) raster sequence."""
    if seq.dim() != 3 or seq.shape[1] == 0:
        raise ad.ShapeError("crt_loss", seq.shape, detail="need a non-empty (B, N, d) sequence")
    pred = regularizer(seq)
    if pred.shape != seq.shape:
        raise ad.ShapeError("crt_loss", pred.shape, seq.shape)
    return (pred - seq).pow(2).sum(-1).mean()


class PatchCritic(nn.Module):
    """Strided conv critic producing one score per patch."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def gan_losses(critic: Callable, real: torch.Tensor, fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Wasserstein objectives: (critic loss, generator loss)."""
    fake_score = critic(fake).mean()
    return fake_score - critic(real).mean(), -fake_score


def perceptual_proxy(x: torch.Tensor, y: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Mean over extractor stages of the feature-space MSE."""
    fx, fy = extractor.stages(x), extractor.stages(y)
    return torch.stack([(a - b).pow(2).mean() for a, b in zip(fx, fy)]).mean()


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class Stage1LossReport:
    step: int
    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    regularizer_loss: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(cfg: TokenizerConfig, total: int) -> ScheduleSpec:
    return ScheduleSpec("linear-warmup-then-constant", cfg.lr, max(total, cfg.warmup_steps),
                        cfg.warmup_start, cfg.warmup_steps)


def gan_schedule(cfg: TokenizerConfig, total: int) -> ScheduleSpec:
    return ScheduleSpec("cosine-ramp-window", cfg.loss.gan if cfg.gan.enabled else 0.0, total,
                        window_start=cfg.gan.window_start, window_length=cfg.gan.window_length)


def crt_schedule(cfg: TokenizerConfig, total: int) -> ScheduleSpec:
    ramp = min(cfg.crt.ramp_steps, total)
    return ScheduleSpec("linear-warmup-then-constant", cfg.crt.lam if cfg.crt_active else 0.0, total, 0.0, ramp)


class Stage1Trainer:
    """Owns the tokenizer, regularizer, critic, their optimizers and schedules."""

    def __init__(self, cfg: TokenizerConfig, extractor: FeatureExtractor | None = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.tokenizer = Tokenizer(cfg)
        self.extractor = extractor or FeatureExtractor()
        self.total_steps = max(cfg.effective_iterations, 1)
        self.regularizer = None
        self.reg_opt = None
        if cfg.crt_active:
            width = cfg.latent_dim if cfg.crt.pre_projection else cfg.quantizer.out_dim
            self.regularizer = CrtRegularizer(width, cfg.crt.layers, cfg.crt.heads, cfg.tokens_per_image)
            self.reg_opt = AdamW(self.regularizer.named_parameters(prefix="regularizer"), cfg.lr,
                                 tuple(cfg.betas), cfg.crt.weight_decay)
        self.critic = None
        self.critic_opt = None
        if cfg.gan.enabled:
            self.critic = PatchCritic(cfg.gan.width)
            self.critic_opt = AdamW(self.critic.named_parameters(prefix="critic"), cfg.lr, tuple(cfg.betas))
        self.main_opt = AdamW(self.tokenizer.named_parameters(prefix="tokenizer"), cfg.lr,
                              tuple(cfg.betas), cfg.weight_decay)
        self.lr_spec = lr_schedule(cfg, self.total_steps)
        self.gan_spec = gan_schedule(cfg, self.total_steps)
        self.crt_spec = crt_schedule(cfg, self.total_steps)

    def weights_at(self, step: int) -> dict[str, float]:
        step = min(step, self.total_steps)
        w = self.cfg.loss
        return {
            "vq": w.vq, "perceptual": w.perceptual, "l2": w.l2,
            "gan": schedule_at(self.gan_spec, step),
            "crt": schedule_at(self.crt_spec, step),
        }

    def losses(self, x: torch.Tensor, step: int):
        """Forward pass; returns (total, crt term, terms dict, weights, output)."""
        out = self.tokenizer(x)
        weights = self.weights_at(step)
        terms = {
            "codebook": out.quant.codebook_loss,
            "commitment": out.quant.commitment_loss,
            "l2": (x - out.recon).pow(2).mean(),
        }
        terms["vq"] = terms["codebook"] + terms["commitment"]
        zero = x.new_zeros(())
        terms["perceptual"] = perceptual_proxy(x, out.recon, self.extractor) if weights["perceptual"] > 0 else zero
        terms["gan"] = gan_losses(self.critic, x, out.recon)[1] if self.critic is not None and weights["gan"] > 0 else zero
        if self.regularizer is not None:
            grid = out.latent if self.cfg.crt.pre_projection else out.quant.latent
            terms["crt"] = crt_loss(grid_to_sequence(grid), self.regularizer)
        else:
            terms["crt"] = zero
        total = sum(weights[k] * terms[k] for k in ("vq", "gan", "perceptual", "l2", "crt"))
        return total, terms, weights, out

    def step(self, x: torch.Tensor, step: int) -> Stage1LossReport:
        self.tokenizer.train()
        total, terms, weights, out = self.losses(x, step)
        report = Stage1LossReport(step, {k: float(v.detach()) for k, v in terms.items()}, weights,
                                  float(total.detach()), float(terms["crt"].detach()))
        if not all(math.isfinite(v) for v in report.terms.values()) or not math.isfinite(report.total):
            raise TrainingDiverged(f"non-finite stage-1 loss at step {step}", report)
        main_params = self.main_opt.params
        reg_params = self.reg_opt.params if self.reg_opt else []
        grads = torch.autograd.grad(total, main_params, retain_graph=bool(reg_params), allow_unused=True)
        # the regularizer trains on the un-weighted loss, whatever the current annealed weight
        reg_grads = torch.autograd.grad(terms["crt"], reg_params) if reg_params else []
        lr = schedule_at(self.lr_spec, min(step, self.total_steps))
        self.main_opt.zero_grad()
        for p, g in zip(main_params, grads):
            p.grad = g
        self.main_opt.step(lr)
        if self.reg_opt is not None:
            self.reg_opt.zero_grad()
            for p, g in zip(reg_params, reg_grads):
                p.grad = g
            self.reg_opt.step(lr)
        if self.critic is not None and step >= self.cfg.gan.window_start:
            self.critic_step(x, out.recon.detach(), lr)
        return report

    def critic_step(self, real: torch.Tensor, fake: torch.Tensor, lr: float) -> float:
        disc, _ = gan_losses(self.critic, real, fake)
        self.critic_opt.zero_grad()
        disc.backward()
        self.critic_opt.step(lr)
        with torch.no_grad():
            for p in self.critic.parameters():
                p.clamp_(-self.cfg.gan.clip, self.cfg.gan.clip)
        return float(disc)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        params = {f"tokenizer.{k}": v for k, v in self.tokenizer.state_dict().items()}
        if self.regularizer is not None:
            params.update({f"regularizer.{k}": v for k, v in self.regularizer.state_dict().items()})
        if self.critic is not None:
            params.update({f"critic.{k}": v for k, v in self.critic.state_dict().items()})
        return params

    def optimizers(self) -> dict[str, AdamW]:
        opts = {"main": self.main_opt}
        if self.reg_opt is not None:
            opts["regularizer"] = self.reg_opt
        if self.critic_opt is not None:
            opts["critic"] = self.critic_opt
        return opts


def batch_order(n: int, batch_size: int, steps: int, seed: int):
    """Deterministic epoch-wise shuffled minibatch indices; yields (epoch, indices)."""
    g = torch.Generator().manual_seed(seed)
    produced, epoch = 0, 0
    while produced < steps:
        perm = torch.randperm(n, generator=g)
        for i in range(0, n - batch_size + 1, batch_size):
            if produced >= steps:
                return
            yield epoch, perm[i:i + batch_size]
            produced += 1
        epoch += 1


@dataclass
class Stage1Result:
    tokenizer: Tokenizer
    trainer: Stage1Trainer
    log: list[dict]
    checkpoint: Path | None
    iterations: int


def train_tokenizer(cfg: TokenizerConfig, images: torch.Tensor, out_dir=None,
                    trainer: Stage1Trainer | None = None) -> Stage1Result:
    """Train stage 1 to its (parity-adjusted) iteration budget.

    Writes ``tokenizer.ckpt`` and ``train_log.jsonl`` under ``out_dir`` when given.
    """
    trainer = trainer or Stage1Trainer(cfg)
    steps = cfg.effective_iterations
    out = Path(out_dir) if out_dir is not None else None
    log_records: list[dict] = []
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")
    t0 = time.time()
    quantizer = trainer.tokenizer.quantizer
    quantizer.reset_usage()
    epoch_util = None
    current_epoch = 0

    def emit(rec):
        log_records.append(rec)
        if log_file:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        step = 0
        for epoch, idx in batch_order(images.shape[0], cfg.batch_size, steps, cfg.seed):
            if epoch != current_epoch:
                epoch_util = utilization(quantizer.usage)
                emit({"kind": "epoch", "epoch": current_epoch, "utilization": epoch_util})
                quantizer.reset_usage()
                current_epoch = epoch
            report = trainer.step(images[idx], step)
            if report.total > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"stage-1 loss {report.total:.3g} exceeds {DIVERGENCE_LIMIT:g}", report)
            step += 1
            if step % cfg.log_interval == 0 or step == steps:
                rec = dict(kind="step", **report.to_dict(), wall_time=time.time() - t0,
                           utilization=utilization(quantizer.usage))
                emit(rec)
                log.debug("stage1 step %d total %.4f", step, report.total)
    finally:
        if log_file:
            log_file.close()
    ckpt = None
    if out is not None:
        ckpt = out / "tokenizer.ckpt"
        save_tokenizer(ckpt, trainer)
    return Stage1Result(trainer.tokenizer, trainer, log_records, ckpt, steps)


def save_tokenizer(path, trainer: Stage1Trainer) -> None:
    meta = {"kind": "tokenizer", "config": dump_config_text(trainer.cfg), "config_hash": config_hash(trainer.cfg)}
    ad.save_checkpoint(path, trainer.state_tensors(), trainer.optimizers(), meta)


def load_tokenizer(path) -> Tokenizer:
    params, _, meta = ad.load_checkpoint(path)
    cfg = TokenizerConfig().with_overrides(parse_config_text(meta["config"]))
    tok = Tokenizer(cfg)
    tok.load_state_dict({k[len("tokenizer."):]: v for k, v in params.items() if k.startswith("tokenizer.")})
    tok.eval()
    return tok


def tokenize_at_resolution(tokenizer: Tokenizer, images: torch.Tensor) -> torch.Tensor:
    """Images at any side R' divisible by f -> (B, (R'/f)^2) raster-order tokens."""
    side = images.shape[-1]
    if side % tokenizer.cfg.downsample:
        raise ValueError(f"side {side} not divisible by downsample factor {tokenizer.cfg.downsample}")
    return tokenizer.tokens(images, side=None).flatten(1)


def reconstruct_at_resolution(tokenizer: Tokenizer, images: torch.Tensor, target: int) -> torch.Tensor:
    """Tokenize and decode at the images' own side, then bicubic-resize to ``target``."""
    recon = tokenizer.reconstruct(images, side=None)
    return bicubic_resize(recon, target).clamp(-1, 1).float()


def measure_regularizer_flop_fraction(cfg: TokenizerConfig) -> float:
    """Share of one stage-1 training step's FLOPs spent in the CRT regularizer."""
    from torch.utils.flop_counter import FlopCounterMode

    if not cfg.crt_active:
        return 0.0
    trainer = Stage1Trainer(cfg)
    x = torch.zeros(2, 3, cfg.image_size, cfg.image_size)
    with FlopCounterMode(display=False) as counter:
        total, terms, _, _ = trainer.losses(x, trainer.total_steps)
        total.backward()
    all_flops = counter.get_total_flops()
    with FlopCounterMode(display=False) as counter:
        seq = grid_to_sequence(trainer.tokenizer.encode(x).detach().requires_grad_())
        crt_loss(seq, trainer.regularizer).backward()
    return counter.get_total_flops() / max(all_flops, 1)
