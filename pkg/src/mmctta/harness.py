"""Experiment runner: pretraining per seed, paired adaptation runs, ablations, reports.

Every run for a given seed consumes the same world, the same pretrained
models and the same target stream, so variants are compared on identical
data. Results are written under one output directory::

    summary.csv            variant, seed, segment, accuracy, miou
    summary.json           per-variant means and the list of failed runs
    runs/<variant>_seed<k>.json
    traces/<variant>_seed<k>.jsonl
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from collections.abc import Iterable, Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, MethodVariant, init, run_sequence, with_variant
from .config import ExperimentConfig
from .errors import ConfigError, ContractError, DivergenceError
from .metrics import SegmentMetrics
from .stream import (
    MODALITIES,
    PointBatch,
    SegmentSpec,
    SourceDataset,
    WorldSpec,
    accuracy,
    even_angles_3d,
    even_scales_2d,
    init_pairs,
    make_source_dataset,
    make_stream,
    pretrain,
)

SUMMARY_COLUMNS = ("variant", "seed", "segment", "accuracy", "miou")


@dataclass
class SeedContext:
    """Everything shared by the runs of one seed."""

    seed: int
    world: WorldSpec
    segments: list[SegmentSpec]
    pairs: tuple
    features: dict
    holdout_accuracy: dict[str, float]


@dataclass
class RunRecord:
    label: str
    seed: int
    segment_names: list[str]
    segments: dict[str, SegmentMetrics] = field(default_factory=dict)
    overall: SegmentMetrics | None = None
    wall_clock: float = 0.0
    stream_sha256: str = ""
    error: str | None = None
    trace: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.error is not None

    def rows(self) -> list[tuple]:
        out = []
        for name in self.segment_names + ["overall"]:
            m = self.overall if name == "overall" else self.segments.get(name)
            acc, miou = (m.accuracy, m.miou) if m is not None and not self.failed else (math.nan, math.nan)
            out.append((self.label, self.seed, name, acc, miou))
        return out


_CONTEXTS: dict = {}


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedContext:
    """Build the world, pretrain both students and fix the schedule for ``seed``.

    Cached per process, keyed on the settings that influence the result.
    """
    key = (cfg.world, cfg.pretrain, cfg.preset, cfg.segment_length, cfg.custom_segments, seed)
    if key in _CONTEXTS:
        return _CONTEXTS[key]
    world = cfg.world.build(seed)
    data = make_source_dataset(world, cfg.pretrain.n_samples, seed)
    p2, p3 = init_pairs(world, seed)
    p2, p3, feats = pretrain(p2, p3, data, cfg.pretrain.epochs, cfg.pretrain.lr, seed)
    hold = SourceDataset.stack(data.holdout)
    held = {m: accuracy(p.student, hold.modality(m), hold.labels) for m, p in zip(MODALITIES, (p2, p3))}
    segments = cfg.segments(world)
    for s in segments:
        s.validate(world.dim_2d)
    ctx = SeedContext(seed, world, segments, (p2, p3), feats, held)
    _CONTEXTS[key] = ctx
    return ctx


class _Digest:
    """Passes batches through while hashing their contents."""

    def __init__(self, batches: Iterable[PointBatch]):
        self._it = iter(batches)
        self.sha = hashlib.sha256()

    def __iter__(self) -> Iterator[PointBatch]:
        for b in self._it:
            for a in (b.x2d, b.x3d, b.labels):
                self.sha.update(np.ascontiguousarray(a).tobytes())
            yield b


def run_one(cfg: ExperimentConfig, seed: int, adapter: AdapterConfig, label: str | None = None) -> RunRecord:
    """One adaptation run. Divergence is recorded on the result, not raised."""
    ctx = prepare_seed(cfg, seed)
    names = [s.name for s in ctx.segments]
    rec = RunRecord(label or adapter.variant.value, seed, names)
    stream = _Digest(make_stream(ctx.world, ctx.segments, seed))
    try:
        state = init(ctx.pairs[0], ctx.pairs[1], ctx.features, adapter, seed)
        hook = _record_centroids if cfg.trace_centroids else None
        res = run_sequence(state, stream, adapter, names, on_step=hook)
    except (DivergenceError, ContractError) as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        rec.stream_sha256 = stream.sha.hexdigest()
        return rec
    rec.segments = {s.name: s for s in res.segments}
    rec.overall = res.overall
    rec.wall_clock = res.wall_clock
    rec.stream_sha256 = stream.sha.hexdigest()
    rec.trace = res.trace
    return rec


def _record_centroids(state, rec: dict) -> None:
    for m in MODALITIES:
        rec[f"centroids_{m}"] = state.memory[m].centroids.live.tolist()


def _job(args) -> RunRecord:
    cfg, seed, adapter, label = args
    return run_one(cfg, seed, adapter, label)


def _map_runs(cfg: ExperimentConfig, jobs: list[tuple], workers: int) -> list[RunRecord]:
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def _fmt(v: float) -> str:
    return "%.17g" % v if isinstance(v, float) else str(v)


def write_summary_csv(records: list[RunRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rec in records:
            for row in rec.rows():
                w.writerow([_fmt(x) for x in row])


def read_summary_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["accuracy"] = float(r["accuracy"])
        r["miou"] = float(r["miou"])
    return rows


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def aggregate(rows: list[dict]) -> dict:
    """Mean accuracy and mIoU per (variant, segment) over the seeds that finished."""
    out: dict = {}
    for r in rows:
        v = out.setdefault(r["variant"], {})
        cell = v.setdefault(r["segment"], {"accuracy": [], "miou": []})
        for key in ("accuracy", "miou"):
            if math.isfinite(r[key]):
                cell[key].append(r[key])
    return {
        variant: {
            seg: {k: (float(np.mean(vals)) if vals else math.nan) for k, vals in cell.items()}
            for seg, cell in segs.items()
        }
        for variant, segs in out.items()
    }


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | os.PathLike | None = None,
    workers: int | None = None,
) -> list[RunRecord]:
    """Run every (variant, seed) pair of ``cfg`` and write the result files."""
    out = Path(out_dir or cfg.output_dir)
    workers = workers or cfg.workers
    jobs = [(cfg, s, with_variant(cfg.adapter, v), v.value) for v in cfg.variants for s in cfg.seeds]
    if workers > 1:
        # pretrain once per seed here so workers only adapt
        for s in cfg.seeds:
            prepare_seed(cfg, s)
    records = _map_runs(cfg, jobs, workers)
    write_outputs(cfg, records, out)
    return records


def write_outputs(cfg: ExperimentConfig, records: list[RunRecord], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs").mkdir(exist_ok=True)
    if cfg.trace:
        (out / "traces").mkdir(exist_ok=True)
    write_summary_csv(records, out / "summary.csv")
    for rec in records:
        stem = f"{rec.label}_seed{rec.seed}"
        run = {
            "variant": rec.label,
            "seed": rec.seed,
            "wall_clock": rec.wall_clock,
            "stream_sha256": rec.stream_sha256,
            "error": rec.error,
            "segments": [rec.segments[n].as_dict() for n in rec.segment_names if n in rec.segments],
            "overall": rec.overall.as_dict() if rec.overall else None,
        }
        (out / "runs" / f"{stem}.json").write_text(json.dumps(_json_safe(run), indent=2) + "\n")
        if cfg.trace and rec.trace:
            with open(out / "traces" / f"{stem}.jsonl", "w") as fh:
                for t in rec.trace:
                    fh.write(json.dumps(_json_safe(t)) + "\n")
                for name in rec.segment_names:
                    if name in rec.segments:
                        fh.write(json.dumps(_json_safe({"segment_summary": rec.segments[name].as_dict()})) + "\n")
    rows = [dict(zip(SUMMARY_COLUMNS, r)) for rec in records for r in rec.rows()]
    summary = {
        "seeds": list(cfg.seeds),
        "variants": [v.value for v in cfg.variants],
        "segments": records[0].segment_names + ["overall"] if records else [],
        "means": aggregate(rows),
        "failures": [{"variant": r.label, "seed": r.seed, "error": r.error} for r in records if r.failed],
    }
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2) + "\n")


def pretrain_report(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> dict[int, dict]:
    """Pretrain for every seed, save the student weights and return holdout accuracies."""
    out = Path(out_dir or cfg.output_dir) / "pretrained"
    out.mkdir(parents=True, exist_ok=True)
    report = {}
    for s in cfg.seeds:
        ctx = prepare_seed(cfg, s)
        arrays = {}
        for m, pair in zip(MODALITIES, ctx.pairs):
            for name, a in zip(pair.student.param_names(), pair.student.params()):
                arrays[f"{m}.{name}"] = a
        np.savez(out / f"seed{s}.npz", **arrays)
        report[s] = ctx.holdout_accuracy
    (out / "holdout_accuracy.json").write_text(json.dumps({str(k): v for k, v in report.items()}, indent=2) + "\n")
    return report


# ---------------------------------------------------------------- ablations

def _cell_metric(records: list[RunRecord], metric: str) -> tuple[float, int]:
    vals = [getattr(r.overall, metric) for r in records if not r.failed and r.overall is not None]
    return (float(np.mean(vals)) if vals else math.nan), len(vals)


def ablate(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None, workers: int | None = None) -> dict:
    """Augmentation-count grid and/or single-parameter sweeps of the full method.

    Cells report the seed-mean of the overall metric. Returns the tables
    that were written.
    """
    ab = cfg.ablate
    if not ab.n_aug_2d and not ab.sweeps:
        raise ConfigError("[ablate] defines neither an augmentation grid nor a sweep")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or cfg.workers
    base = with_variant(cfg.adapter, MethodVariant.COMAC)
    for s in cfg.seeds:
        prepare_seed(cfg, s)
    tables = {}

    if ab.n_aug_2d:
        cells = [(n3, n2) for n3 in ab.n_aug_3d for n2 in ab.n_aug_2d]
        jobs = []
        for n3, n2 in cells:
            a = replace(base, aug_2d=tuple(even_scales_2d(n2)), aug_3d=tuple(even_angles_3d(n3)))
            jobs += [(cfg, s, a, f"aug{n2}x{n3}") for s in cfg.seeds]
        recs = _map_runs(cfg, jobs, workers)
        k = len(cfg.seeds)
        grid = np.array([_cell_metric(recs[i * k:(i + 1) * k], ab.metric)[0] for i in range(len(cells))])
        grid = grid.reshape(len(ab.n_aug_3d), len(ab.n_aug_2d))
        with open(out / "ablation_aug.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n_aug_3d\\n_aug_2d", *ab.n_aug_2d, "avg"])
            for n3, row in zip(ab.n_aug_3d, grid):
                w.writerow([n3, *(_fmt(float(x)) for x in row), _fmt(float(np.nanmean(row)))])
            w.writerow(["avg", *(_fmt(float(x)) for x in np.nanmean(grid, axis=0)), _fmt(float(np.nanmean(grid)))])
        tables["aug"] = grid

    if ab.sweeps:
        rows = []
        for name, values in ab.sweeps:
            jobs = []
            for val in values:
                a = replace(base, **{name: type(getattr(base, name))(val)})
                jobs += [(cfg, s, a, f"{name}={val:g}") for s in cfg.seeds]
            recs = _map_runs(cfg, jobs, workers)
            k = len(cfg.seeds)
            for i, val in enumerate(values):
                mean, n_ok = _cell_metric(recs[i * k:(i + 1) * k], ab.metric)
                rows.append((name, val, mean, n_ok))
        with open(out / "ablation_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "value", ab.metric, "n_seeds_ok"])
            for name, val, mean, n_ok in rows:
                w.writerow([name, _fmt(float(val)), _fmt(mean), n_ok])
        tables["sweep"] = rows
    return tables


# ---------------------------------------------------------------- reporting

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def render_svg(means: dict, segments: list[str], metric: str = "miou", width: int = 640, height: int = 360) -> str:
    """Line chart of the per-segment seed-mean metric, one line per variant."""
    pad_l, pad_r, pad_t, pad_b = 50, 130, 20, 60
    vals = [means[v][s][metric] for v in means for s in segments if math.isfinite(means[v][s][metric])]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def xy(i, y):
        x = pad_l + (pw * i / max(len(segments) - 1, 1))
        return x, pad_t + ph * (1 - (y - lo) / (hi - lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
             f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>']
    for frac in (0.0, 0.5, 1.0):
        y = lo + frac * (hi - lo)
        _, py = xy(0, y)
        parts.append(f'<text x="{pad_l - 5}" y="{py:.1f}" text-anchor="end">{y:.3f}</text>')
    for i, s in enumerate(segments):
        px, _ = xy(i, lo)
        parts.append(f'<text x="{px:.1f}" y="{pad_t + ph + 15}" text-anchor="end" transform="rotate(-30 {px:.1f} {pad_t + ph + 15})">{s}</text>')
    for j, v in enumerate(means):
        color = _PALETTE[j % len(_PALETTE)]
        pts = [xy(i, means[v][s][metric]) for i, s in enumerate(segments) if math.isfinite(means[v][s][metric])]
        if pts:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad_r + 10}" y="{pad_t + 14 * (j + 1)}" fill="{color}">{v}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(out_dir: str | os.PathLike, metric: str = "miou") -> str:
    """Summarize ``summary.csv`` as a Markdown table and an SVG chart next to it."""
    out = Path(out_dir)
    rows = read_summary_csv(out / "summary.csv")
    means = aggregate(rows)
    segments = list(dict.fromkeys(r["segment"] for r in rows))
    per_seg = [s for s in segments if s != "overall"]
    lines = [f"| variant | {' | '.join(segments)} |", "|---" * (len(segments) + 1) + "|"]
    for v, segs in means.items():
        cells = " | ".join(f"{100 * segs[s][metric]:.1f}" if math.isfinite(segs[s][metric]) else "n/a" for s in segments)
        lines.append(f"| {v} | {cells} |")
    table = "\n".join(lines) + "\n"
    (out / "report.md").write_text(f"Seed-mean {metric} (%) per segment.\n\n" + table)
    (out / "chart.svg").write_text(render_svg(means, per_seg, metric))
    return table
