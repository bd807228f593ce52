"""Stage 2: class-conditional causal transformer over raster token sequences."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import autodiff as ad
from .autodiff import AdamW, ScheduleSpec, schedule_at
from .config import apply_overrides, config_hash, dump_config_text, parse_config_text
from .transformer import HEAD_DIM, CausalTransformer

log = logging.getLogger(__name__)


@dataclass
class GeneratorConfig:
    layers: int = 2
    heads: int = 2
    vocab_size: int = 256
    num_classes: int = 8
    seq_len: int = 16
    class_dropout: float = 0.1
    z_loss: float = 1e-4
    lr: float = 3e-3
    warmup_start: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.1
    betas: tuple[float, ...] = (0.9, 0.95)
    iterations: int = 2000
    batch_size: int = 64
    seed: int = 0
    log_interval: int = 100

    def __post_init__(self):
        if not 0.0 <= self.class_dropout <= 1.0:
            raise ValueError("class_dropout must lie in [0, 1]")
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be positive")

    @property
    def dim(self) -> int:
        return HEAD_DIM * self.heads

    @property
    def tokens_per_step(self) -> int:
        # class token + image tokens
        return self.batch_size * (self.seq_len + 1)

    def with_overrides(self, values: dict) -> "GeneratorConfig":
        return apply_overrides(self, values)


@dataclass
class SampleConfig:
    class_id: int
    alpha: float = 1.75
    count: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("CFG scale must be non-negative")


class Generator(nn.Module):
    """Class token (or learned dummy) followed by image tokens, next-token logits out."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        # row num_classes is the unconditional dummy token
        self.cls_emb = nn.Embedding(cfg.num_classes + 1, cfg.dim)
        self.trunk = CausalTransformer(cfg.layers, cfg.heads, max_len=cfg.seq_len)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.cls_emb.weight, std=0.02)
        nn.init.normal_(self.head.weight, std=0.02)

    @property
    def dummy_index(self) -> int:
        return self.cfg.num_classes

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def forward_logits(self, prefix: torch.Tensor, classes: torch.Tensor,
                       dummy: torch.Tensor | None = None) -> torch.Tensor:
        """Logits (B, min(p+1, N), K) for positions 0..p given a (B, p) token prefix.

        Position i sees the class slot and tokens < i only. ``dummy`` (B,) bool
        replaces the class token with the unconditional dummy.
        """
        b, p = prefix.shape
        n = self.cfg.seq_len
        if p > n:
            raise ad.ShapeError("forward_logits", prefix.shape, detail=f"prefix longer than {n}")
        if classes.shape != (b,):
            raise ad.ShapeError("forward_logits", prefix.shape, classes.shape)
        if dummy is not None:
            classes = torch.where(dummy, torch.full_like(classes, self.dummy_index), classes)
        h = ad.embedding(classes, self.cls_emb.weight).unsqueeze(1)
        if p:
            h = torch.cat([h, ad.embedding(prefix[:, :n - 1], self.tok_emb.weight)], dim=1)
        return self.head(self.trunk(h))


def cfg_logits(uncond: torch.Tensor, cond: torch.Tensor, alpha: float) -> torch.Tensor:
    """ℓ_u + (ℓ_c − ℓ_u)·α, evaluated as ℓ_u·(1−α) + ℓ_c·α so α ∈ {0, 1} is exact."""
    if uncond.shape != cond.shape:
        raise ad.ShapeError("cfg_logits", uncond.shape, cond.shape)
    return uncond * (1.0 - alpha) + cond * alpha


def token_losses(logits: torch.Tensor, targets: torch.Tensor, z_coef: float = 0.0):
    """Returns (mean cross-entropy, z-loss term)."""
    ce = ad.cross_entropy(logits, targets)
    if z_coef <= 0:
        return ce, logits.new_zeros(())
    log_z = torch.logsumexp(logits, dim=-1)
    return ce, z_coef * log_z.pow(2).mean()


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(cfg: GeneratorConfig) -> ScheduleSpec:
    warm = min(cfg.warmup_steps, cfg.iterations)
    return ScheduleSpec("linear-warmup-then-cosine", cfg.lr, max(cfg.iterations, 1), cfg.warmup_start, warm)


class Stage2Trainer:
    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = Generator(cfg)
        self.opt = AdamW(self.model.named_parameters(prefix="generator"), cfg.lr, tuple(cfg.betas),
                         cfg.weight_decay)
        self.lr_spec = lr_schedule(cfg)
        self.rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.dummy_uses = 0

    def train_step(self, tokens: torch.Tensor, classes: torch.Tensor, step: int) -> dict:
        self.model.train()
        drop = torch.rand(classes.shape[0], generator=self.rng) < self.cfg.class_dropout
        self.dummy_uses += int(drop.sum())
        logits = self.model.forward_logits(tokens, classes, drop)
        ce, z = token_losses(logits, tokens, self.cfg.z_loss)
        loss = ce + z
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite stage-2 loss at step {step}")
        self.opt.zero_grad()
        loss.backward()
        lr = schedule_at(self.lr_spec, min(step, self.lr_spec.total_steps))
        self.opt.step(lr)
        return {"step": step, "ce": float(ce.detach()), "z_loss": float(z.detach()), "loss": float(loss.detach()), "lr": lr}


@dataclass
class Stage2Result:
    model: Generator
    log: list[dict]
    checkpoint: Path | None
    tokens_seen: int


def train_generator(cfg: GeneratorConfig, tokens: torch.Tensor, classes: torch.Tensor, out_dir=None) -> Stage2Result:
    """Train to ``cfg.iterations``; tokens (n, N) int64, classes (n,) int64."""
    from .tokenizer import batch_order

    if tokens.shape[1] != cfg.seq_len:
        raise ad.ShapeError("train_generator", tokens.shape, detail=f"expected sequence length {cfg.seq_len}")
    trainer = Stage2Trainer(cfg)
    records = []
    t0 = time.time()
    step = 0
    for _, idx in batch_order(tokens.shape[0], min(cfg.batch_size, tokens.shape[0]), cfg.iterations, cfg.seed):
        rec = trainer.train_step(tokens[idx], classes[idx], step)
        step += 1
        if step % cfg.log_interval == 0 or step == cfg.iterations:
            records.append(dict(rec, wall_time=time.time() - t0))
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_log.jsonl", "w") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        ckpt = out / "generator.ckpt"
        save_generator(ckpt, trainer)
    return Stage2Result(trainer.model, records, ckpt, cfg.iterations * cfg.tokens_per_step)


def save_generator(path, trainer: Stage2Trainer) -> None:
    meta = {"kind": "generator", "config": dump_config_text(trainer.cfg), "config_hash": config_hash(trainer.cfg)}
    ad.save_checkpoint(path, {f"generator.{k}": v for k, v in trainer.model.state_dict().items()},
                       {"main": trainer.opt}, meta)


def load_generator(path) -> Generator:
    params, _, meta = ad.load_checkpoint(path)
    cfg = GeneratorConfig().with_overrides(parse_config_text(meta["config"]))
    model = Generator(cfg)
    model.load_state_dict({k[len("generator."):]: v for k, v in params.items()})
    model.eval()
    return model


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sample_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2 ** 63)


@torch.no_grad()
def generate_tokens(model: Generator, classes: torch.Tensor, alpha: float, seed: int) -> torch.Tensor:
    """CFG sampling of (n, N) tokens; sample i uses its own RNG stream."""
    model.eval()
    n = classes.shape[0]
    rngs = [torch.Generator().manual_seed(sample_seed(seed, i)) for i in range(n)]
    out = torch.zeros(n, 0, dtype=torch.long)
    both_classes = torch.cat([classes, classes])
    dummy = torch.cat([torch.zeros(n, dtype=torch.bool), torch.ones(n, dtype=torch.bool)])
    for _ in range(model.cfg.seq_len):
        logits = model.forward_logits(torch.cat([out, out]), both_classes, dummy)[:, -1]
        mixed = cfg_logits(logits[n:], logits[:n], alpha)
        probs = torch.softmax(mixed.double(), dim=-1)
        nxt = torch.stack([torch.multinomial(probs[i], 1, generator=rngs[i]) for i in range(n)])
        out = torch.cat([out, nxt], dim=1)
    return out


def generate(model: Generator, sample: SampleConfig, tokenizer=None, alphas: Sequence[float] | None = None):
    """Sample ``sample.count`` images of one class.

    With ``alphas`` given, returns ``{alpha: result}`` for each scale from the
    same seeds. A result is the token tensor, or ``(tokens, images)`` when a
    tokenizer is supplied to decode them.
    """
    if not 0 <= sample.class_id < model.cfg.num_classes:
        raise ValueError(f"class id {sample.class_id} outside [0, {model.cfg.num_classes})")

    def one(alpha):
        classes = torch.full((sample.count,), sample.class_id, dtype=torch.long)
        toks = generate_tokens(model, classes, alpha, sample.seed)
        if tokenizer is None:
            return toks
        side = int(math.isqrt(model.cfg.seq_len))
        return toks, tokenizer.decode_indices(toks.view(-1, side, side))

    if alphas is None:
        return one(sample.alpha)
    if not len(alphas):
        raise ValueError("empty CFG grid")
    return {float(a): one(a) for a in alphas}


def write_samples(out_dir, tokens: torch.Tensor, images: torch.Tensor, classes, alpha: float, seed: int) -> Path:
    """Write P6 images and a JSON-lines manifest (seed, class, alpha, token offset)."""
    from .synthdata import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "samples.jsonl"
    with open(manifest, "w") as f:
        for i in range(tokens.shape[0]):
            name = f"sample_{i:05d}.ppm"
            write_image(out / name, images[i].numpy())
            f.write(json.dumps({"file": name, "seed": sample_seed(seed, i), "class": int(classes[i]),
                                "alpha": alpha, "token_offset": i * tokens.shape[1]}) + "\n")
    return manifest


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class PerPositionReport:
    mean: list[float]
    variance: list[float]
    count: int
    shard_losses: list[float]

    @property
    def final_loss_variance(self) -> float:
        return float(np.var(self.shard_losses)) if len(self.shard_losses) > 1 else 0.0


@torch.no_grad()
def _position_losses(model: Generator, tokens: torch.Tensor, classes: torch.Tensor, batch_size: int = 512):
    model.eval()
    rows = []
    for i in range(0, tokens.shape[0], batch_size):
        t, c = tokens[i:i + batch_size], classes[i:i + batch_size]
        rows.append(ad.cross_entropy(model.forward_logits(t, c).double(), t, reduction="none"))
    return torch.cat(rows)


def per_position_loss(model: Generator, tokens: torch.Tensor, classes: torch.Tensor, shards: int = 4) -> PerPositionReport:
    """Mean cross-entropy (nats) at each position over a frozen evaluation set."""
    if tokens.shape[0] == 0:
        raise ValueError("empty evaluation set")
    losses = _position_losses(model, tokens, classes)
    shard_rows = [s for s in torch.tensor_split(losses, min(shards, losses.shape[0])) if s.shape[0]]
    shard_pos = torch.stack([s.mean(0) for s in shard_rows])
    var = shard_pos.var(0, unbiased=False) if len(shard_rows) > 1 else torch.zeros(losses.shape[1])
    return PerPositionReport(losses.mean(0).tolist(), var.tolist(), losses.shape[0],
                             [float(s.mean()) for s in shard_rows])


def validation_loss(model: Generator, tokens: torch.Tensor, classes: torch.Tensor) -> float:
    return float(np.mean(per_position_loss(model, tokens, classes).mean))
