"""Endpoint sweeps, FLOPs accounting, log-log fits and Pareto frontiers."""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import itertools
import json
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from filelock import FileLock

from .config import parse_config_text, read_config_file

METRIC_COLUMNS = ("gffd", "rffd", "psnr", "ms_ssim", "recon_mse")
CSV_COLUMNS = ("run_id", "stage", "status", "params", "tokens", "flops", "val_loss", *METRIC_COLUMNS,
               "config_hash", "seed", "wall_time", "axes", "extra", "error")


def flops_estimate(params: int, tokens: int) -> int:
    """Training FLOPs ≈ 6·N·D, exact integer arithmetic."""
    if params <= 0 or tokens <= 0:
        raise ValueError("parameter and token counts must be positive")
    return 6 * int(params) * int(tokens)


def tokens_processed(iterations: int, batch_size: int, seq_len: int) -> int:
    """Tokens seen by stage 2, counting the class token of every sequence."""
    return int(iterations) * int(batch_size) * (int(seq_len) + 1)


@dataclass
class RunRecord:
    run_id: str
    stage: int
    params: int
    tokens: int
    val_loss: float | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    wall_time: float = 0.0
    status: str = "ok"
    error: str = ""
    axes: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    flops: int = 0

    def __post_init__(self):
        expected = 6 * int(self.params) * int(self.tokens)
        if self.flops == 0:
            self.flops = expected
        elif self.flops != expected:
            raise ValueError(f"{self.run_id}: flops {self.flops} != 6*N*D = {expected}")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


# --------------------------------------------------------------------------
# fits and frontiers
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    slope: float
    intercept: float
    r2: float
    count: int

    def predict(self, x):
        return 10 ** (self.intercept + self.slope * np.log10(np.asarray(x, dtype=np.float64)))


def loglog_fit(points: Iterable[tuple[float, float]]) -> FitResult:
    """Ordinary least squares of log10(y) on log10(x)."""
    pts = sorted((float(x), float(y)) for x, y in points)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    if any(x <= 0 or y <= 0 for x, y in pts):
        raise ValueError("log-log fit needs strictly positive values")
    lx = np.log10([p[0] for p in pts])
    ly = np.log10([p[1] for p in pts])
    if np.ptp(lx) == 0:
        raise ValueError("all x values identical")
    # centered closed form with compensated sums: exact on exact power laws where lstsq's SVD is not
    mx, my = math.fsum(lx) / len(lx), math.fsum(ly) / len(ly)
    dx = lx - mx
    slope = math.fsum(dx * (ly - my)) / math.fsum(dx * dx)
    intercept = my - slope * mx
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 if ss_tot == 0 or len(pts) == 2 else 1.0 - ss_res / ss_tot
    return FitResult(float(slope), float(intercept), r2, len(pts))


def objective_value(record: RunRecord, objective: str) -> float:
    if objective in ("loss", "val_loss"):
        return record.val_loss
    return record.metrics[objective]


def pareto_frontier(records: Sequence[RunRecord], objective: str = "loss") -> list[RunRecord]:
    """Records not dominated in (flops, objective), both minimized; exact ties kept.

    Returned in increasing FLOPs order, so the objective is non-increasing.
    """
    if not records:
        raise ValueError("pareto_frontier of an empty record set")
    keyed = sorted(((r.flops, objective_value(r, objective)), i) for i, r in enumerate(records))
    frontier = []
    best = math.inf
    for flops, group in itertools.groupby(keyed, key=lambda t: t[0][0]):
        group = list(group)
        low = group[0][0][1]
        if low < best:
            frontier += [records[i] for (f, v), i in group if v == low]
            best = low
    return frontier


def overtraining_flags(records: Sequence[RunRecord], group_key: str = "model",
                       metric: str = "gffd") -> dict[str, bool]:
    """Per model size: True if loss ordering and metric ordering disagree for some pair of endpoints."""
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        if r.ok and r.val_loss is not None and metric in r.metrics:
            groups.setdefault(str(r.axes.get(group_key, r.params)), []).append(r)
    flags = {}
    for key, rs in groups.items():
        flags[key] = any((a.val_loss - b.val_loss) * (a.metrics[metric] - b.metrics[metric]) < 0
                         for a, b in itertools.combinations(rs, 2))
    return flags


def cfg_selection(alphas: Sequence[float], score: Callable[[float], float]) -> tuple[float, dict[float, float]]:
    """Pick the CFG scale with the lowest score (Fréchet distance against a held-in split)."""
    if not len(alphas):
        raise ValueError("empty CFG grid")
    scores = {float(a): float(score(float(a))) for a in alphas}
    best = min(scores, key=lambda a: (scores[a], list(scores).index(a)))
    return best, scores


# --------------------------------------------------------------------------
# record store and sweeps
# --------------------------------------------------------------------------


class RecordStore:
    """Append-only JSON-lines store of RunRecords guarded by a file lock."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path) + ".lock")

    def load(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        with self.lock:
            lines = self.path.read_text().splitlines()
        return [RunRecord.from_json(line) for line in lines if line.strip()]

    def append(self, record: RunRecord) -> None:
        with self.lock:
            with open(self.path, "a") as f:
                f.write(record.to_json() + "\n")

    def completed(self) -> dict[str, RunRecord]:
        """Latest successful record per config hash."""
        return {r.config_hash: r for r in self.load() if r.ok}


@dataclass
class SweepCell:
    run_id: str
    overrides: dict[str, Any]
    axes: dict[str, Any]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.overrides, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SweepPlan:
    """Base overrides plus named axes whose cross product defines the cells.

    An axis value is either a scalar (assigned to the dotted key named by the
    axis) or a mapping of dotted keys, for axes that move several settings at once.
    """

    base: dict[str, Any] = field(default_factory=dict)
    axes: dict[str, list] = field(default_factory=dict)
    name: str = "sweep"

    def cells(self) -> list[SweepCell]:
        if not self.axes:
            return []
        names = list(self.axes)
        if any(len(self.axes[n]) == 0 for n in names):
            return []
        cells = []
        for combo in itertools.product(*(self.axes[n] for n in names)):
            overrides = dict(self.base)
            axes = {}
            for n, value in zip(names, combo):
                if isinstance(value, dict):
                    overrides.update(value)
                    axes[n] = value.get("label", json.dumps(value, sort_keys=True))
                else:
                    overrides[n] = value
                    axes[n] = value
            overrides.pop("label", None)
            label = "-".join(f"{n.split('.')[-1]}={axes[n]}" for n in names)
            cells.append(SweepCell(f"{self.name}/{label}", overrides, axes))
        ids = [c.run_id for c in cells]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate run id in sweep plan")
        return cells

    def to_text(self) -> str:
        from .config import format_value

        lines = ["version = 1", f"name = {self.name}"]
        lines += [f"{k} = {format_value(v)}" for k, v in sorted(self.base.items())]
        lines += [f"axis.{k} = {json.dumps(v)}" for k, v in self.axes.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SweepPlan":
        values = parse_config_text(text)
        name = str(values.pop("name", "sweep"))
        axes = {k[len("axis."):]: list(v) for k, v in values.items() if k.startswith("axis.")}
        base = {k: v for k, v in values.items() if not k.startswith("axis.")}
        return cls(base, axes, name)

    @classmethod
    def from_file(cls, path) -> "SweepPlan":
        return cls.from_text(Path(path).read_text())


def run_cell(runner: Callable[[SweepCell], RunRecord], cell: SweepCell) -> RunRecord:
    """Run one cell; any exception becomes a ``status="failed"`` record."""
    t0 = time.time()
    try:
        rec = runner(cell)
        rec.config_hash = cell.config_hash
        rec.axes = dict(cell.axes, **rec.axes)
    except Exception as e:  # noqa: BLE001 - any cell failure becomes a record
        rec = RunRecord(cell.run_id, 2, 1, 1, status="failed", config_hash=cell.config_hash,
                        error=f"{type(e).__name__}: {e}", axes=dict(cell.axes),
                        extra={"traceback": traceback.format_exc(limit=5)}, wall_time=time.time() - t0)
    return rec


def sweep(plan: SweepPlan, runner: Callable[[SweepCell], RunRecord], store: RecordStore,
          jobs: int = 1) -> list[RunRecord]:
    """Run every cell to its endpoint; completed cells (by config hash) are skipped.

    Failures are stored as records with ``status="failed"`` rather than dropped,
    and are retried on the next invocation. With ``jobs > 1`` cells run in a
    process pool, so ``runner`` must be picklable. Returns one record per cell,
    in plan order.
    """
    cells = plan.cells()
    done = store.completed()
    pending = [c for c in cells if c.config_hash not in done]
    new = {}
    if jobs > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(jobs, len(pending))) as pool:
            for cell, rec in zip(pending, pool.map(functools.partial(run_cell, runner), pending)):
                store.append(rec)
                new[cell.config_hash] = rec
    else:
        for cell in pending:
            rec = run_cell(runner, cell)
            store.append(rec)
            new[cell.config_hash] = rec
    return [done.get(c.config_hash) or new[c.config_hash] for c in cells]


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        row = {
            "run_id": r.run_id, "stage": r.stage, "status": r.status, "params": r.params, "tokens": r.tokens,
            "flops": r.flops, "val_loss": r.val_loss, "config_hash": r.config_hash, "seed": r.seed,
            "wall_time": r.wall_time, "axes": json.dumps(r.axes, sort_keys=True),
            "extra": json.dumps(r.extra, sort_keys=True), "error": r.error,
        }
        row.update({m: r.metrics.get(m) for m in METRIC_COLUMNS})
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        metrics = {m: float(row[m]) for m in METRIC_COLUMNS if row[m] != ""}
        out.append(RunRecord(
            run_id=row["run_id"], stage=int(row["stage"]), params=int(row["params"]), tokens=int(row["tokens"]),
            val_loss=float(row["val_loss"]) if row["val_loss"] else None, metrics=metrics,
            config_hash=row["config_hash"], seed=int(row["seed"]), wall_time=float(row["wall_time"]),
            status=row["status"], error=row["error"], axes=json.loads(row["axes"]),
            extra=json.loads(row["extra"]), flops=int(row["flops"]),
        ))
    return out


def _series_key(r: RunRecord, key: str) -> str:
    return str(r.axes.get(key, r.params))


def plot_vs_flops(records: Sequence[RunRecord], objective: str, path, series: str = "model",
                  overlay: str = "crt") -> None:
    """Log-log scatter per series, plus a fitted line through each overlay group's frontier."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "crtlab"
    pts = [r for r in records if r.ok and _has(r, objective)]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    groups: dict[tuple, list[RunRecord]] = {}
    for r in pts:
        groups.setdefault((str(r.axes.get(overlay, "")), _series_key(r, series)), []).append(r)
    markers = ["o", "s", "^", "D", "v", "P"]
    overlays = sorted({k[0] for k in groups})
    for (ov, ser), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r.flops)
        ax.plot([r.flops for r in rs], [objective_value(r, objective) for r in rs],
                marker=markers[overlays.index(ov) % len(markers)], linestyle=":", label=f"{overlay}={ov} {series}={ser}")
    for ov in overlays:
        sub = [r for r in pts if str(r.axes.get(overlay, "")) == ov]
        front = pareto_frontier(sub, objective) if sub else []
        if len({r.flops for r in front}) >= 2 and all(objective_value(r, objective) > 0 for r in front):
            fit = loglog_fit((r.flops, objective_value(r, objective)) for r in front)
            xs = np.array(sorted(r.flops for r in front), dtype=np.float64)
            ax.plot(xs, fit.predict(xs), linewidth=2, label=f"{overlay}={ov} frontier slope {fit.slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("training FLOPs (6ND)")
    ax.set_ylabel(objective)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _has(r: RunRecord, objective: str) -> bool:
    try:
        v = objective_value(r, objective)
    except KeyError:
        return False
    return v is not None and v > 0


def report(records: Sequence[RunRecord], out_dir, objectives: Sequence[str] = ("loss", "gffd"),
           series: str = "model", overlay: str = "crt") -> dict[str, Path]:
    """Write ``records.csv`` and one ``<objective>_vs_flops.svg`` per objective with data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "records.csv"}
    paths["csv"].write_text(records_to_csv(records))
    for obj in objectives:
        if any(r.ok and _has(r, obj) for r in records):
            p = out / f"{obj}_vs_flops.svg"
            plot_vs_flops(records, obj, p, series, overlay)
            paths[obj] = p
    return paths
