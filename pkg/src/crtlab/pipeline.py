"""End-to-end experiment cells: corpus → tokenizer → tokens → generator → metrics.

Trained artifacts are content-addressed under a work directory, so cells that
share a tokenizer (for example every stage-2 size in a scaling grid) train it
once, and re-running a finished cell only reloads checkpoints.
"""

from __future__ import annotations

import functools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import generator as gen
from . import metrics as mt
from . import scaling as sc
from . import synthdata as sd
from . import tokenizer as tk
from .autodiff import atomic_write_bytes
from .config import apply_overrides, config_hash, dump_config_text
from .quantizers import read_token_dump, write_token_dump

log = logging.getLogger(__name__)


@dataclass
class CorpusConfig:
    seed: int = 7
    classes: int = 8
    train: int = 4096
    val: int = 512
    size: int = 32
    path: str = ""


@dataclass
class EvalConfig:
    stages: int = 2
    token_side: int = 0
    samples: int = 512
    alpha: float = 1.75
    alpha_grid: tuple[float, ...] = ()
    held_in: int = 512
    sample_seed: int = 0
    shards: int = 4
    gffd: bool = True


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    tokenizer: tk.TokenizerConfig = field(default_factory=tk.TokenizerConfig)
    generator: gen.GeneratorConfig = field(default_factory=gen.GeneratorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_overrides(self, values: dict) -> "ExperimentConfig":
        return apply_overrides(self, values)

    @property
    def token_side(self) -> int:
        return self.eval.token_side or self.corpus.size

    def resolved(self) -> "ExperimentConfig":
        """Fill the generator fields that are determined by the data and tokenizer."""
        tok = replace(self.tokenizer, image_size=self.corpus.size)
        if self.token_side % tok.downsample:
            raise ValueError(f"token side {self.token_side} not divisible by {tok.downsample}")
        n = (self.token_side // tok.downsample) ** 2
        g = replace(self.generator, vocab_size=tok.quantizer.effective_size,
                    num_classes=self.corpus.classes, seq_len=n)
        return replace(self, tokenizer=tok, generator=g)


# Desk-scale defaults sized for a single CPU core; see README for the budget.
DESK_OVERRIDES = {
    "tokenizer.widths": [16, 32, 64],
    "tokenizer.res_blocks": 1,
    "tokenizer.iterations": 1200,
    "tokenizer.batch_size": 32,
    "generator.iterations": 1500,
    "generator.batch_size": 64,
}


def desk_config(overrides: dict | None = None) -> ExperimentConfig:
    return ExperimentConfig().with_overrides({**DESK_OVERRIDES, **(overrides or {})})


@functools.lru_cache(maxsize=8)
def _rendered(seed: int, classes: int, count: int, size: int, split: str):
    return sd.render_split(seed, classes, count, size, split)


def load_corpus(cfg: CorpusConfig):
    """(train images, train labels, val images, val labels)."""
    if cfg.path:
        tr, trl = sd.load_split(cfg.path, "train")
        va, val = sd.load_split(cfg.path, "val")
        return tr, trl, va, val
    tr, trl = _rendered(cfg.seed, cfg.classes, cfg.train, cfg.size, "train")
    va, val = _rendered(cfg.seed, cfg.classes, cfg.val, cfg.size, "val")
    return tr, trl, va, val


def _hash(*parts) -> str:
    return config_hash({str(i): asdict(p) if hasattr(p, "__dataclass_fields__") else p for i, p in enumerate(parts)})


def _write_json(path: Path, doc) -> None:
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


@torch.no_grad()
def reconstruction_metrics(tokenizer: tk.Tokenizer, images: torch.Tensor, extractor=None) -> dict[str, float]:
    """Held-out reconstruction quality; ``recon_mse`` is on [0, 1]-scaled pixels."""
    extractor = extractor or mt.FeatureExtractor()
    recon = tokenizer.reconstruct(images, side=None).float()
    return {
        "recon_mse": float(((images.double() - recon.double()) / 2).pow(2).mean()),
        "psnr": mt.psnr(images, recon).db,
        "ms_ssim": mt.ms_ssim(images, recon),
        "rffd": mt.frechet_feature_distance(images, recon, extractor),
    }


class Pipeline:
    """Runs one experiment configuration, reusing cached artifacts under ``work_dir``."""

    def __init__(self, cfg: ExperimentConfig, work_dir):
        self.cfg = cfg.resolved()
        self.work = Path(work_dir)
        self.extractor = mt.FeatureExtractor()
        self._data = None

    # -- data ---------------------------------------------------------------
    @property
    def data(self):
        if self._data is None:
            self._data = load_corpus(self.cfg.corpus)
        return self._data

    @property
    def tokenizer_key(self) -> str:
        c = self.cfg.corpus
        return _hash(replace(c, path=""), self.cfg.tokenizer)

    @property
    def tokenizer_dir(self) -> Path:
        return self.work / "tokenizers" / self.tokenizer_key

    @property
    def generator_dir(self) -> Path:
        return self.work / "generators" / _hash(self.tokenizer_key, self.cfg.token_side, self.cfg.generator,
                                                self.cfg.eval)

    # -- stage 1 ------------------------------------------------------------
    def stage1(self) -> tuple[tk.Tokenizer, dict]:
        d = self.tokenizer_dir
        ckpt, summary = d / "tokenizer.ckpt", d / "stage1.json"
        if ckpt.exists() and summary.exists():
            return tk.load_tokenizer(ckpt), json.loads(summary.read_text())
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.cfg").write_text(dump_config_text(self.cfg))
        train, _, val, _ = self.data
        t0 = time.time()
        result = tk.train_tokenizer(self.cfg.tokenizer, train, d)
        tok = result.tokenizer.eval()
        info = {
            "metrics": reconstruction_metrics(tok, val, self.extractor),
            "params": sum(p.numel() for p in tok.parameters()),
            "regularizer_params": (sum(p.numel() for p in result.trainer.regularizer.parameters())
                                   if result.trainer.regularizer is not None else 0),
            "iterations": result.iterations,
            "wall_time": time.time() - t0,
            "final": result.log[-1] if result.log else {},
        }
        _write_json(summary, info)
        return tok, info

    def stage1_record(self, run_id: str = "") -> sc.RunRecord:
        tok, info = self.stage1()
        cfg = self.cfg.tokenizer
        return sc.RunRecord(
            run_id or f"stage1/{self.tokenizer_key}", 1, info["params"],
            info["iterations"] * cfg.batch_size * cfg.tokens_per_image,
            metrics=info["metrics"], config_hash=self.tokenizer_key, seed=cfg.seed, wall_time=info["wall_time"],
            extra={"regularizer_params": info["regularizer_params"]},
        )

    # -- tokens ------------------------------------------------------------
    def tokens(self, tokenizer: tk.Tokenizer | None = None) -> dict[str, torch.Tensor]:
        """Raster-order (n, N) token sets for train and val at the configured token side."""
        side = self.cfg.token_side
        grid = side // self.cfg.tokenizer.downsample
        paths = {s: self.tokenizer_dir / f"tokens_r{side}_{s}.bin" for s in ("train", "val")}
        if not all(p.exists() for p in paths.values()):
            tokenizer = tokenizer or self.stage1()[0]
            train, _, val, _ = self.data
            for split, images in (("train", train), ("val", val)):
                if side != images.shape[-1]:
                    images = sd.bicubic_resize(images, side).clamp(-1, 1).float()
                toks = tk.tokenize_at_resolution(tokenizer, images)
                write_token_dump(paths[split], toks.view(-1, grid, grid).numpy(), tokenizer.codebook_size)
        out = {}
        for split, p in paths.items():
            arr, _ = read_token_dump(p)
            out[split] = torch.from_numpy(arr).reshape(arr.shape[0], -1)
        return out

    # -- stage 2 ------------------------------------------------------------
    def stage2(self) -> tuple[gen.Generator, dict]:
        d = self.generator_dir
        ckpt, summary = d / "generator.ckpt", d / "stage2.json"
        if ckpt.exists() and summary.exists():
            return gen.load_generator(ckpt), json.loads(summary.read_text())
        tok, s1 = self.stage1()
        toks = self.tokens(tok)
        _, train_labels, val_images, val_labels = self.data
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.cfg").write_text(dump_config_text(self.cfg))
        t0 = time.time()
        result = gen.train_generator(self.cfg.generator, toks["train"], train_labels, d)
        train_time = time.time() - t0
        model = result.model.eval()
        ppl = gen.per_position_loss(model, toks["val"], val_labels, self.cfg.eval.shards)
        report = mt.entropy_report(toks["val"].numpy(), self.cfg.generator.vocab_size)
        info = {
            "val_loss": float(np.mean(ppl.mean)),
            "per_position": ppl.mean,
            "shard_losses": ppl.shard_losses,
            "entropy": report.to_dict(),
            "params": model.parameter_count(),
            "tokens": result.tokens_seen,
            "wall_time": train_time,
            "stage1": s1["metrics"],
            "metrics": {},
        }
        if self.cfg.eval.gffd and self.cfg.eval.samples >= 2:
            alpha, scores = self.select_alpha(model, tok)
            info["alpha"], info["alpha_scores"] = alpha, {str(k): v for k, v in scores.items()}
            info["metrics"]["gffd"] = self.generation_ffd(model, tok, alpha, val_images)
        _write_json(summary, info)
        return model, info

    def _sample_images(self, model: gen.Generator, tok: tk.Tokenizer, alpha: float) -> torch.Tensor:
        n, classes = self.cfg.eval.samples, self.cfg.corpus.classes
        labels = torch.arange(n) % classes
        toks = gen.generate_tokens(model, labels, alpha, self.cfg.eval.sample_seed)
        side = int(round(self.cfg.generator.seq_len ** 0.5))
        images = tok.decode_indices(toks.view(n, side, side), any_size=True)
        if images.shape[-1] != self.cfg.corpus.size:
            images = sd.bicubic_resize(images, self.cfg.corpus.size).clamp(-1, 1)
        return images.float()

    def generation_ffd(self, model, tok, alpha: float, reference: torch.Tensor) -> float:
        fake = self._sample_images(model, tok, alpha)
        return mt.frechet_distance(mt.collect_stats(fake, self.extractor), mt.collect_stats(reference, self.extractor))

    def select_alpha(self, model, tok) -> tuple[float, dict[float, float]]:
        grid = self.cfg.eval.alpha_grid or (self.cfg.eval.alpha,)
        if len(grid) == 1:
            return float(grid[0]), {}
        held_in = self.data[0][: self.cfg.eval.held_in]
        return sc.cfg_selection(grid, lambda a: self.generation_ffd(model, tok, a, held_in))

    def run(self, run_id: str = "") -> sc.RunRecord:
        if self.cfg.eval.stages == 1:
            return self.stage1_record(run_id)
        _, info = self.stage2()
        metrics = dict(info["stage1"], **info["metrics"])
        return sc.RunRecord(
            run_id or f"stage2/{self.generator_dir.name}", 2, info["params"], info["tokens"],
            val_loss=info["val_loss"], metrics=metrics, config_hash=self.generator_dir.name,
            seed=self.cfg.generator.seed, wall_time=info["wall_time"],
            extra={"per_position": info["per_position"], "tokenizer": self.tokenizer_key,
                   "generator": self.generator_dir.name,
                   "skew": info["entropy"]["skew"], "alpha": info.get("alpha")},
        )


@dataclass
class CellRunner:
    """Picklable sweep runner: base config + cell overrides → RunRecord."""

    base: dict
    work_dir: str

    def __call__(self, cell: sc.SweepCell) -> sc.RunRecord:
        cfg = desk_config({**self.base, **cell.overrides})
        t0 = time.time()
        rec = Pipeline(cfg, self.work_dir).run(cell.run_id)
        rec.wall_time = rec.wall_time or time.time() - t0
        return rec


# --------------------------------------------------------------------------
# figure-analog plans
# --------------------------------------------------------------------------

ITERATION_GRID = [250, 500, 1000, 2000]
MODEL_SIZES = [
    {"label": "L2H2", "generator.layers": 2, "generator.heads": 2},
    {"label": "L4H2", "generator.layers": 4, "generator.heads": 2},
]
CRT_AXIS = [
    {"label": "off", "tokenizer.crt.enabled": False},
    {"label": "on", "tokenizer.crt.enabled": True},
]


def figure_plans(figure: str) -> list[sc.SweepPlan]:
    """Sweep plans for the desk-scale analog of a figure id."""
    if figure == "fig4-analog":
        return [sc.SweepPlan({}, {"crt": CRT_AXIS, "model": MODEL_SIZES, "generator.iterations": ITERATION_GRID},
                             "fig4")]
    if figure == "fig5-analog":
        quant = [
            {"label": "vq64", "tokenizer.quantizer.mode": "vq", "tokenizer.quantizer.codebook_size": 64},
            {"label": "vq256", "tokenizer.quantizer.mode": "vq", "tokenizer.quantizer.codebook_size": 256},
            {"label": "vq1024", "tokenizer.quantizer.mode": "vq", "tokenizer.quantizer.codebook_size": 1024},
            {"label": "fsq64", "tokenizer.quantizer.mode": "fsq", "tokenizer.quantizer.fsq_levels": [4, 4, 4]},
            {"label": "fsq256", "tokenizer.quantizer.mode": "fsq", "tokenizer.quantizer.fsq_levels": [8, 8, 4]},
            {"label": "fsq1024", "tokenizer.quantizer.mode": "fsq", "tokenizer.quantizer.fsq_levels": [8, 8, 4, 4]},
        ]
        return [sc.SweepPlan({"eval.stages": 1}, {"quantizer": quant}, "fig5")]
    if figure == "fig7-analog":
        return [sc.SweepPlan({}, {"crt": CRT_AXIS}, "fig7")]
    if figure == "fig8-analog":
        on = {"tokenizer.crt.enabled": True}
        return [
            sc.SweepPlan(on, {"tokenizer.crt.layers": [0, 2, 4, 6]}, "fig8-depth"),
            sc.SweepPlan(on, {"tokenizer.crt.lam": [0.0, 1.0, 2.0, 4.0, 8.0]}, "fig8-lambda"),
        ]
    raise ValueError(f"unknown figure id {figure!r}; expected one of {FIGURES}")


FIGURES = ("fig4-analog", "fig5-analog", "fig7-analog", "fig8-analog")


def ablation_table(records: list[sc.RunRecord], axis: str) -> str:
    """CSV table of axis value vs rFFD-analog and gFFD-analog (and losses)."""
    lines = [f"{axis},rffd,gffd,val_loss,recon_mse"]
    for r in records:
        if not r.ok:
            lines.append(f"{r.axes.get(axis)},failed,failed,failed,failed")
            continue
        m = r.metrics
        lines.append(",".join(str(v) for v in (r.axes.get(axis), m.get("rffd", ""), m.get("gffd", ""),
                                                 r.val_loss if r.val_loss is not None else "",
                                                 m.get("recon_mse", ""))))
    return "\n".join(lines) + "\n"


def reproduce(figure: str, out_dir, base: dict | None = None, jobs: int = 1) -> dict[str, Path]:
    """Run a figure analog end to end; idempotent through the record store."""
    plans = figure_plans(figure)
    out = Path(out_dir) / figure
    out.mkdir(parents=True, exist_ok=True)
    base = dict(base or {})
    store = sc.RecordStore(out / "records.jsonl")
    runner = CellRunner(base, str(Path(out_dir) / "work"))
    produced: dict[str, Path] = {}
    all_records = []
    for plan in plans:
        plan = sc.SweepPlan({**base, **plan.base}, plan.axes, plan.name)
        (out / f"{plan.name}.plan").write_text(plan.to_text())
        records = sc.sweep(plan, runner, store, jobs)
        all_records += records
        if figure == "fig8-analog":
            axis = next(iter(plan.axes))
            p = out / f"{plan.name}_table.csv"
            p.write_text(ablation_table(records, axis))
            produced[plan.name] = p
    objectives = ("rffd", "psnr", "ms_ssim") if figure == "fig5-analog" else ("loss", "gffd")
    produced.update(sc.report(all_records, out, objectives))
    if figure == "fig7-analog":
        produced.update(entropy_artifacts(all_records, out, runner))
    if figure == "fig4-analog":
        flags = sc.overtraining_flags(all_records)
        _write_json(out / "overtraining.json", flags)
        produced["overtraining"] = out / "overtraining.json"
    return produced


def entropy_artifacts(records: list[sc.RunRecord], out: Path, runner: CellRunner) -> dict[str, Path]:
    """Per-position entropy and per-position loss tables/plots for baseline vs CRT."""
    rows = ["crt,position,entropy_bits,loss_nats"]
    series = {}
    for r in records:
        if not r.ok:
            continue
        info = json.loads((Path(runner.work_dir) / "generators" / r.extra["generator"] / "stage2.json").read_text())
        label = str(r.axes.get("crt"))
        series[label] = (info["entropy"]["per_position"], info["per_position"], info["entropy"]["skew"])
        for i, (h, l) in enumerate(zip(info["entropy"]["per_position"], info["per_position"])):
            rows.append(f"{label},{i},{h!r},{l!r}")
    paths = {"entropy_csv": out / "entropy.csv"}
    paths["entropy_csv"].write_text("\n".join(rows) + "\n")
    paths["entropy_svg"] = out / "entropy.svg"
    plot_position_series(series, paths["entropy_svg"])
    return paths


def plot_position_series(series: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "crtlab"
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, (ent, loss, skew) in sorted(series.items()):
        a.plot(ent, marker="o", label=f"crt={label} skew={skew:.3f}")
        b.plot(loss, marker="o", label=f"crt={label}")
    a.set_xlabel("raster position")
    a.set_ylabel("token entropy (bits)")
    b.set_xlabel("raster position")
    b.set_ylabel("stage-2 loss (nats)")
    a.legend(fontsize=7)
    b.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
