"""``crtlab`` command line: corpus synthesis, training, sampling, evaluation and sweeps.

Exit codes: 0 success, 1 validation error (bad flag, config or input), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError, apply_overrides, dump_config_text, parse_overrides, read_config_file

log = logging.getLogger("crtlab")


class UsageError(ConfigError):
    """Invalid invocation detected after argument parsing."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="config file (flat dotted keys, version = 1)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable, wins over --config")
    p.add_argument("--seed", type=int, help="seed for the run")
    p.add_argument("--out", default=os.environ.get("CRTLAB_OUT", "crtlab_out"),
                   help="output directory (default: $CRTLAB_OUT or ./crtlab_out)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="crtlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", parents=[common], help="render the synthetic corpus")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train", type=int, default=4096)
    p.add_argument("--val", type=int, default=512)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--force", action="store_true", help="overwrite a corpus with a different checksum")

    p = sub.add_parser("train-tokenizer", parents=[common], help="train a stage-1 tokenizer")
    p.add_argument("--corpus", help="corpus directory from `synth` (default: render in memory)")
    p.add_argument("--desk", action="store_true", help="start from the desk-scale preset")

    p = sub.add_parser("train-generator", parents=[common], help="train a stage-2 generator on token dumps")
    p.add_argument("--data", required=True, help="output directory of `train-tokenizer`")
    p.add_argument("--desk", action="store_true", help="start from the desk-scale preset")

    p = sub.add_parser("sample", parents=[common], help="class-conditional CFG sampling")
    p.add_argument("--generator", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--class", dest="class_id", type=int, default=0)
    p.add_argument("--alpha", type=float, action="append", help="CFG scale; repeat for a grid")
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("eval", parents=[common], help="reconstruction and generation metrics")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--generator")
    p.add_argument("--corpus", help="corpus directory (default: render in memory)")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--alpha", type=float, default=1.75)

    p = sub.add_parser("sweep", parents=[common], help="run an endpoint sweep plan")
    p.add_argument("--plan", required=True, help="plan file: base keys plus axis.<key> = [values]")

    p = sub.add_parser("analyze", parents=[common], help="entropy or scaling analysis")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tokens", help="token dump file")
    src.add_argument("--records", help="record store (JSON lines)")
    p.add_argument("--objective", default="loss")

    p = sub.add_parser("plot", parents=[common], help="CSV + SVG report from a record store")
    p.add_argument("--records", required=True)

    p = sub.add_parser("reproduce", parents=[common], help="run a desk-scale figure analog")
    p.add_argument("figure", help="fig4-analog | fig5-analog | fig7-analog | fig8-analog")
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _overrides(args) -> dict:
    values = read_config_file(args.config) if args.config else {}
    values.update(parse_overrides(args.overrides))
    return values


def _build(factory, values: dict):
    try:
        return apply_overrides(factory(), values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _require(path: str | None, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _snapshot(out: Path, cfg, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = dump_config_text(cfg)
    (out / "resolved.cfg").write_text(f"# crtlab {args.command}\n" + text)


def _corpus(corpus_dir: str | None, overrides: dict | None = None):
    from .pipeline import CorpusConfig, load_corpus

    cfg = CorpusConfig(path=str(_require(corpus_dir, "corpus")) if corpus_dir else "")
    return load_corpus(cfg)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> None:
    from . import synthdata as sd

    out = Path(args.out)
    seed = 7 if args.seed is None else args.seed
    if args.train <= 0 or args.val <= 0 or args.size < 16:
        raise UsageError("need --train > 0, --val > 0 and --size >= 16")
    if not 1 <= args.classes <= sd.MAX_CLASSES:
        raise UsageError(f"--classes must lie in [1, {sd.MAX_CLASSES}]")
    try:
        manifest = sd.build_corpus(out / "corpus", seed, args.classes, args.train, args.val, args.size, args.force)
    except sd.CorpusExistsError as e:
        raise UsageError(str(e)) from e
    _snapshot(out / "corpus", {"seed": seed, "classes": args.classes, "train": args.train, "val": args.val,
                               "size": args.size}, args)
    print(f"corpus {out / 'corpus'} checksum {manifest['checksum']}")


def cmd_train_tokenizer(args) -> None:
    from . import metrics as mt
    from . import tokenizer as tk
    from .pipeline import DESK_OVERRIDES, reconstruction_metrics
    from .quantizers import write_token_dump

    values = {k[len("tokenizer."):]: v for k, v in DESK_OVERRIDES.items() if k.startswith("tokenizer.")} if args.desk else {}
    values.update(_overrides(args))
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = _build(tk.TokenizerConfig, values)
    train, train_labels, val, val_labels = _corpus(args.corpus)
    if train.shape[-1] != cfg.image_size:
        raise UsageError(f"corpus side {train.shape[-1]} != image_size {cfg.image_size}")
    out = Path(args.out)
    _snapshot(out, cfg, args)
    result = tk.train_tokenizer(cfg, train, out)
    tok = result.tokenizer.eval()
    metrics = reconstruction_metrics(tok, val)
    mt.write_metric_report(out / "metrics.json", metrics, val.shape[0], tk.config_hash(cfg))
    for split, images, labels in (("train", train, train_labels), ("val", val, val_labels)):
        write_token_dump(out / f"tokens_{split}.bin", tok.tokens(images).numpy(), tok.codebook_size)
        (out / f"labels_{split}.json").write_text(json.dumps(labels.tolist()))
    print(json.dumps(metrics, sort_keys=True))


def _load_tokens(data: Path, split: str):
    from .quantizers import read_token_dump

    arr, k = read_token_dump(_require(str(data / f"tokens_{split}.bin"), "token dump"))
    labels = json.loads(_require(str(data / f"labels_{split}.json"), "labels").read_text())
    return torch.from_numpy(arr).reshape(arr.shape[0], -1), torch.tensor(labels, dtype=torch.long), k


def cmd_train_generator(args) -> None:
    from . import generator as gen
    from . import metrics as mt
    from .pipeline import DESK_OVERRIDES

    data = _require(args.data, "data directory")
    train, train_labels, k = _load_tokens(data, "train")
    val, val_labels, _ = _load_tokens(data, "val")
    values = {k_[len("generator."):]: v for k_, v in DESK_OVERRIDES.items() if k_.startswith("generator.")} if args.desk else {}
    values.update(_overrides(args))
    values.update(vocab_size=k, seq_len=train.shape[1], num_classes=int(max(train_labels.max(), val_labels.max())) + 1)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = _build(gen.GeneratorConfig, values)
    out = Path(args.out)
    _snapshot(out, cfg, args)
    result = gen.train_generator(cfg, train, train_labels, out)
    report = gen.per_position_loss(result.model, val, val_labels)
    ent = mt.entropy_report(val.numpy(), k)
    doc = {"val_loss": float(sum(report.mean) / len(report.mean)), "per_position": report.mean,
           "final_loss_variance": report.final_loss_variance, "entropy_bits": ent.per_position,
           "params": result.model.parameter_count(), "tokens": result.tokens_seen}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"val_loss": doc["val_loss"], "params": doc["params"]}))


def cmd_sample(args) -> None:
    from . import generator as gen
    from . import tokenizer as tk

    model = gen.load_generator(_require(args.generator, "generator checkpoint"))
    tok = tk.load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    alphas = args.alpha or [1.75]
    seed = args.seed or 0
    try:
        sample = gen.SampleConfig(args.class_id, alphas[0], args.count, seed)
        results = gen.generate(model, sample, tok, alphas)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    _snapshot(out, sample, args)
    for alpha, (toks, images) in results.items():
        classes = [args.class_id] * toks.shape[0]
        manifest = gen.write_samples(out / f"alpha_{alpha:g}", toks, images, classes, alpha, seed)
        print(manifest)


def cmd_eval(args) -> None:
    from . import generator as gen
    from . import metrics as mt
    from . import tokenizer as tk
    from .pipeline import reconstruction_metrics

    tok = tk.load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    _, _, val, val_labels = _corpus(args.corpus)
    out = Path(args.out)
    _snapshot(out, {"tokenizer": args.tokenizer, "generator": args.generator or "", "samples": args.samples,
                    "alpha": args.alpha, "seed": args.seed or 0}, args)
    extractor = mt.FeatureExtractor()
    metrics = reconstruction_metrics(tok, val, extractor)
    if args.generator:
        model = gen.load_generator(_require(args.generator, "generator checkpoint"))
        toks = tok.tokens(val).flatten(1)
        metrics["val_loss"] = gen.validation_loss(model, toks, val_labels)
        if args.samples >= 2:
            labels = torch.arange(args.samples) % model.cfg.num_classes
            g = gen.generate_tokens(model, labels, args.alpha, args.seed or 0)
            side = tok.cfg.grid_side
            fake = tok.decode_indices(g.view(-1, side, side))
            metrics["gffd"] = mt.frechet_feature_distance(fake, val, extractor)
    doc = mt.write_metric_report(out / "metrics.json", metrics, val.shape[0], tk.config_hash(tok.cfg))
    print(json.dumps(doc, sort_keys=True))


def _experiment_base(args) -> dict:
    from .pipeline import ExperimentConfig

    values = _overrides(args)
    if args.seed is not None:
        values.setdefault("tokenizer.seed", args.seed)
        values.setdefault("generator.seed", args.seed)
    _build(ExperimentConfig, values)  # validate keys up front
    return values


def cmd_sweep(args) -> None:
    from . import scaling as sc
    from .pipeline import CellRunner, desk_config

    try:
        plan = sc.SweepPlan.from_file(_require(args.plan, "plan file"))
        base = _experiment_base(args)
        for cell in plan.cells():
            desk_config({**base, **cell.overrides})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.cfg").write_text(plan.to_text())
    _snapshot(out, base, args)
    store = sc.RecordStore(out / "records.jsonl")
    records = sc.sweep(plan, CellRunner(base, str(out / "work")), store, args.jobs)
    sc.report(records, out)
    failed = [r for r in records if not r.ok]
    print(f"{len(records)} cells, {len(failed)} failed")
    if failed:
        raise RuntimeError(f"{len(failed)} sweep cells failed; see records.jsonl")


def cmd_analyze(args) -> None:
    from . import metrics as mt
    from . import scaling as sc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.tokens:
        from .pipeline import plot_position_series
        from .quantizers import TokenDumpError, read_token_dump

        try:
            arr, k = read_token_dump(_require(args.tokens, "token dump"))
        except TokenDumpError as e:
            raise UsageError(str(e)) from e
        report = mt.entropy_report(arr, k)
        (out / "entropy.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        rows = ["position,entropy_bits"] + [f"{i},{h!r}" for i, h in enumerate(report.per_position)]
        (out / "entropy.csv").write_text("\n".join(rows) + "\n")
        plot_position_series({"tokens": (report.per_position, [0.0] * len(report.per_position), report.skew)},
                             out / "entropy.svg")
        print(json.dumps({"total": report.total, "skew": report.skew, "degenerate": report.degenerate}))
        return
    records = sc.RecordStore(_require(args.records, "record store")).load()
    ok = [r for r in records if r.ok and sc._has(r, args.objective)]
    rows = ["series,slope,intercept,r2,count"]
    if ok:
        front = sc.pareto_frontier(ok, args.objective)
        (out / "frontier.csv").write_text(sc.records_to_csv(front))
        groups: dict[str, list] = {}
        for r in front:
            groups.setdefault(str(r.axes.get("crt", "all")), []).append(r)
        for key, rs in sorted(groups.items()):
            if len({r.flops for r in rs}) >= 2:
                fit = sc.loglog_fit((r.flops, sc.objective_value(r, args.objective)) for r in rs)
                rows.append(f"{key},{fit.slope!r},{fit.intercept!r},{fit.r2!r},{fit.count}")
    else:
        (out / "frontier.csv").write_text(sc.records_to_csv([]))
    (out / "fits.csv").write_text("\n".join(rows) + "\n")
    sc.report(records, out, (args.objective,))
    print(f"{len(ok)} usable records")


def cmd_plot(args) -> None:
    from . import scaling as sc

    store = sc.RecordStore(_require(args.records, "record store"))
    paths = sc.report(store.load(), args.out)
    for p in paths.values():
        print(p)


def cmd_reproduce(args) -> None:
    from .pipeline import FIGURES, reproduce

    if args.figure not in FIGURES:
        raise UsageError(f"unknown figure id {args.figure!r}; expected one of {', '.join(FIGURES)}")
    base = _experiment_base(args)
    paths = reproduce(args.figure, args.out, base, args.jobs)
    for p in paths.values():
        print(p)


COMMANDS = {
    "synth": cmd_synth, "train-tokenizer": cmd_train_tokenizer, "train-generator": cmd_train_generator,
    "sample": cmd_sample, "eval": cmd_eval, "sweep": cmd_sweep, "analyze": cmd_analyze, "plot": cmd_plot,
    "reproduce": cmd_reproduce,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"crtlab {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - exit-code contract
        log.debug("runtime failure", exc_info=True)
        print(f"crtlab {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
