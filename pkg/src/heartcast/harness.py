"""Experiment grids, percent-reduction tables, cross-city aggregation and reports.

A grid trains every attention cell on every dataset for every seed.  The
``NoAttention`` baseline of each (dataset, seed) is trained first and shares
its seed with the other cells, so the backbone initialisation is identical
and only the attention block differs.

Output layout under ``out_dir``::

    manifest.json          grid config plus the status and fingerprint of each cell
    cells/<key>.json       one record per trained cell, written atomically
    cells/<key>.csv        per-epoch history
    cells/<key>.npz        best checkpoint
    results.csv            one row per (dataset, non-baseline cell, seed)
    results.json           the same rows at full precision, plus wall times and failures
    table.csv / table.json aggregated percent-reduction table
    chart.svg              bar chart, one group per cell and one bar per pollutant
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attention import AttentionConfig, Variant
from .data import CsvSchema, DatasetSpec, PreparedData, SynthConfig, load_csv, prepare, synth_generate
from .errors import AggregationError, ConfigurationError, DomainError, HeartcastError
from .model import HeartModel, ModelConfig
from .training import TrainingConfig, TrainingHistory, train

log = logging.getLogger(__name__)

POLLUTANT_ORDER = ("NO2", "O3", "PM10", "PM25")
AVERAGE = "average"
BASELINE_LABEL = AttentionConfig(Variant.NONE).label
RESULT_COLUMNS = ("dataset", "city", "pollutant", "cell", "seed",
                  "baseline_mse", "variant_mse", "percent_reduction", "history")


# -- arithmetic ---------------------------------------------------------------

def percent_reduction(mse_base: float, mse_att: float) -> float:
    """``100 * (base - att) / base``; negative when the variant is worse."""
    if not mse_base > 0 or not math.isfinite(mse_base):
        raise DomainError(f"baseline MSE must be positive and finite, got {mse_base!r}")
    return 100.0 * (mse_base - mse_att) / mse_base


def format_one_decimal(x: float) -> str:
    """One decimal, halves rounded away from zero (``7.45 -> 7.5``)."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def pollutant_columns(names: Iterable[str]) -> list[str]:
    """Known pollutants in a fixed order, then any others alphabetically."""
    names = set(names) - {AVERAGE}
    return [p for p in POLLUTANT_ORDER if p in names] + sorted(names - set(POLLUTANT_ORDER))


@dataclass(frozen=True)
class AggregateRow:
    label: str
    values: dict[str, float]
    average: float


CityTable = Mapping[str, Mapping[str, float]]  # row label -> pollutant -> value


def aggregate_cities(tables: Mapping[str, CityTable]) -> list[AggregateRow]:
    """Mean of every (row, pollutant) cell across cities.

    Each row's average is the mean over its pollutant columns.  Rows are
    sorted by that average, highest first, with ties broken by label.  An
    ``average`` column in the input is ignored and recomputed.
    """
    if not tables:
        raise AggregationError("no city tables to aggregate")
    cities = sorted(tables)
    cells = {c: {(r, p) for r, row in tables[c].items() for p in row if p != AVERAGE} for c in cities}
    union = set().union(*cells.values())
    for c in cities:
        missing = sorted(union - cells[c])
        if missing:
            r, p = missing[0]
            raise AggregationError(f"city {c!r} has no value for row {r!r}, pollutant {p!r}")
    rows = sorted({r for r, _ in union})
    cols = pollutant_columns(p for _, p in union)
    out = []
    for r in rows:
        vals = {p: math.fsum(float(tables[c][r][p]) for c in cities) / len(cities)
                for p in cols if (r, p) in union}
        out.append(AggregateRow(r, vals, math.fsum(vals.values()) / len(vals)))
    out.sort(key=lambda row: (-row.average, row.label))
    return out


# -- grid description ---------------------------------------------------------

@dataclass(frozen=True)
class DatasetEntry:
    """One (city, pollutant) dataset, read from CSV or generated synthetically.

    For synthetic entries ``data_seed=None`` ties the generated panel to the
    run seed, so each seed sees a fresh realisation.
    """

    id: str
    spec: DatasetSpec = field(default_factory=DatasetSpec)
    city: str | None = None
    pollutant: str | None = None
    csv: str | None = None
    schema: Mapping | None = None
    synth: SynthConfig | None = None
    data_seed: int | None = None

    def __post_init__(self):
        if (self.csv is None) == (self.synth is None):
            raise ConfigurationError(f"dataset {self.id!r} needs exactly one of 'csv' or 'synth'")
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", self.id):
            raise ConfigurationError(f"dataset id {self.id!r} may only use letters, digits, '_', '.', '-'")

    @property
    def city_name(self) -> str:
        return self.city or self.id

    @property
    def pollutant_name(self) -> str:
        return self.pollutant or "target"

    def effective_seed(self, seed: int) -> int | None:
        if self.synth is None:
            return None
        return seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        d = {"id": self.id, "spec": self.spec.to_dict()}
        for k in ("city", "pollutant", "csv", "data_seed"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.schema is not None:
            d["schema"] = dict(self.schema)
        if self.synth is not None:
            d["synth"] = self.synth.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "DatasetEntry":
        d = dict(d)
        unknown = set(d) - {"id", "spec", "city", "pollutant", "csv", "schema", "synth", "data_seed"}
        if unknown:
            raise ConfigurationError(f"unknown dataset keys {sorted(unknown)}")
        if "spec" in d:
            d["spec"] = DatasetSpec.from_dict(d["spec"])
        if "synth" in d:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        if "csv" in d and base_dir is not None and not Path(d["csv"]).is_absolute():
            d["csv"] = str(base_dir / d["csv"])
        return cls(**d)

    def load(self, seed: int):
        if self.synth is not None:
            return synth_generate(self.synth, self.effective_seed(seed))
        schema = dict(self.schema or {})
        return load_csv(self.csv, CsvSchema(**schema))


_PREPARED: dict[str, PreparedData] = {}


def prepared_data(entry: DatasetEntry, seed: int) -> PreparedData:
    """Windows for ``entry`` at ``seed``, cached per process."""
    key = json.dumps([entry.to_dict(), entry.effective_seed(seed)], sort_keys=True)
    if key not in _PREPARED:
        if len(_PREPARED) > 8:
            _PREPARED.clear()
        _PREPARED[key] = prepare(entry.load(seed), entry.spec)
    return _PREPARED[key]


MODEL_KEYS = ("latent", "conv_lag", "encoder_dropout")


def model_config_for(data: PreparedData, spec: DatasetSpec, attention: AttentionConfig,
                     model: Mapping | None = None) -> ModelConfig:
    s, f, _ = data.shape
    opts = dict(model or {})
    unknown = set(opts) - set(MODEL_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown model keys {sorted(unknown)}")
    return ModelConfig(s, f, spec.t_in, spec.t_out, attention=attention, **opts)


@dataclass(frozen=True)
class ExperimentGrid:
    datasets: tuple[DatasetEntry, ...]
    cells: tuple[AttentionConfig, ...]
    seeds: tuple[int, ...] = (0,)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    model: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "model", dict(self.model))
        if not self.datasets:
            raise ConfigurationError("grid has no datasets")
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("dataset ids must be unique")
        n_base = sum(c.variant is Variant.NONE for c in self.cells)
        if n_base != 1:
            raise ConfigurationError(f"the NoAttention baseline must appear exactly once, found {n_base}")
        labels = [c.label for c in self.cells]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"cell labels must be unique: {labels}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be a non-empty list of distinct integers")
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown model keys {sorted(unknown)}")

    @property
    def baseline(self) -> AttentionConfig:
        return next(c for c in self.cells if c.variant is Variant.NONE)

    def to_dict(self) -> dict:
        return {"datasets": [d.to_dict() for d in self.datasets],
                "cells": [c.to_dict() for c in self.cells],
                "seeds": list(self.seeds),
                "training": self.training.to_dict(),
                "model": dict(self.model)}

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "ExperimentGrid":
        unknown = set(d) - {"datasets", "cells", "seeds", "training", "model"}
        if unknown:
            raise ConfigurationError(f"unknown grid keys {sorted(unknown)}")
        cells = [AttentionConfig.from_dict(c) for c in d.get("cells", [])]
        if not any(c.variant is Variant.NONE for c in cells):
            cells.insert(0, AttentionConfig(Variant.NONE))
        return cls(datasets=tuple(DatasetEntry.from_dict(x, base_dir) for x in d["datasets"]),
                   cells=tuple(cells),
                   seeds=tuple(d.get("seeds", (0,))),
                   training=TrainingConfig.from_dict(d.get("training", {})),
                   model=d.get("model", {}))

    @classmethod
    def from_json(cls, path) -> "ExperimentGrid":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def jobs(self) -> list["Job"]:
        return [Job(d, c, s, self.model, self.training) for d in self.datasets for s in self.seeds for c in self.cells]


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-")


@dataclass(frozen=True)
class Job:
    dataset: DatasetEntry
    cell: AttentionConfig
    seed: int
    model: Mapping
    training: TrainingConfig

    @property
    def key(self) -> str:
        return f"{self.dataset.id}__{_slug(self.cell.label)}__s{self.seed}"

    @property
    def is_baseline(self) -> bool:
        return self.cell.variant is Variant.NONE

    def fingerprint(self) -> str:
        doc = {"dataset": self.dataset.to_dict(), "cell": self.cell.to_dict(), "seed": self.seed,
               "model": dict(self.model), "training": self.training.to_dict()}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# -- running ------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentResult:
    dataset: str
    city: str
    pollutant: str
    cell: str
    seed: int
    baseline_mse: float
    variant_mse: float
    percent_reduction: float
    history: str
    wall_time: float = 0.0

    def csv_row(self) -> list[str]:
        return [self.dataset, self.city, self.pollutant, self.cell, str(self.seed),
                repr(self.baseline_mse), repr(self.variant_mse), repr(self.percent_reduction), self.history]


@dataclass
class RunSummary:
    results: list[ExperimentResult]
    failures: dict[str, str]
    trained: list[str]
    skipped: list[str]
    out_dir: Path

    @property
    def ok(self) -> bool:
        return not self.failures


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def train_cell(dataset: DatasetEntry, cell: AttentionConfig, seed: int, model: Mapping | None,
               training: TrainingConfig) -> tuple[HeartModel, TrainingHistory, PreparedData]:
    """Train one model; the training config's seed is replaced by ``seed``."""
    data = prepared_data(dataset, seed)
    cfg = model_config_for(data, dataset.spec, cell, model)
    m = HeartModel(cfg, seed=seed)
    xt, yt, xv, yv = data.arrays()
    hist = train(m, (xt, yt), (xv, yv), TrainingConfig.from_dict({**training.to_dict(), "seed": seed}))
    return m, hist, data


def run_job(job: Job, out_dir) -> dict:
    """Train ``job`` and write its record; failures are captured, not raised."""
    from ._alloc import tune_allocator

    tune_allocator()
    cells_dir = Path(out_dir) / "cells"
    record = {"key": job.key, "fingerprint": job.fingerprint(), "dataset": job.dataset.id,
              "cell": job.cell.label, "seed": job.seed}
    t0 = time.perf_counter()
    try:
        m, hist, data = train_cell(job.dataset, job.cell, job.seed, job.model, job.training)
    except (HeartcastError, ArithmeticError, MemoryError) as exc:
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}", wall_time=time.perf_counter() - t0)
        return record
    hist.to_csv(cells_dir / f"{job.key}.csv")
    m.save(cells_dir / f"{job.key}.npz", extra={"best_epoch": hist.best_epoch})
    data.standardizer.save(cells_dir / f"{job.key}.scaler.json")
    record.update(status="ok", val_mse=hist.best_validation_mse, best_epoch=hist.best_epoch,
                  epochs=hist.epochs, stop_reason=hist.stop_reason, wall_time=time.perf_counter() - t0,
                  history=f"cells/{job.key}.csv")
    _atomic_write(cells_dir / f"{job.key}.json", json.dumps(record, indent=1, sort_keys=True))
    return record


def _load_record(out_dir: Path, job: Job) -> dict | None:
    path = out_dir / "cells" / f"{job.key}.json"
    if not path.exists():
        return None
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    return rec if rec.get("status") == "ok" and rec.get("fingerprint") == job.fingerprint() else None


def _map(jobs: Sequence[Job], out_dir: Path, workers: int) -> list[dict]:
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j, out_dir) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(run_job, jobs, [out_dir] * len(jobs)))


def run_experiment(grid: ExperimentGrid, out_dir, jobs: int = 1, resume: bool = False) -> RunSummary:
    """Train every cell of ``grid`` and write results and a report under ``out_dir``.

    Baselines run first.  A failed baseline marks its (dataset, seed) cells as
    failed without training them.  With ``resume`` a cell whose record
    exists and matches the current configuration is not retrained.
    """
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    all_jobs = grid.jobs()
    records: dict[str, dict] = {}
    skipped = []
    if resume:
        for j in all_jobs:
            rec = _load_record(out_dir, j)
            if rec is not None:
                records[j.key] = rec
                skipped.append(j.key)
    manifest = {"grid": grid.to_dict(), "cells": {}}

    def _update_manifest():
        manifest["cells"] = {j.key: {"fingerprint": j.fingerprint(), "status": records[j.key]["status"]}
                             for j in all_jobs if j.key in records}
        _atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))

    trained = []
    base_jobs = [j for j in all_jobs if j.is_baseline and j.key not in records]
    for rec in _map(base_jobs, out_dir, jobs):
        records[rec["key"]] = rec
        trained.append(rec["key"])
    _update_manifest()

    def _baseline(j: Job) -> dict:
        return records[Job(j.dataset, grid.baseline, j.seed, j.model, j.training).key]

    pending = []
    for j in all_jobs:
        if j.is_baseline or j.key in records:
            continue
        if _baseline(j)["status"] != "ok":
            records[j.key] = {"key": j.key, "status": "failed", "error": "baseline failed; dataset aborted"}
            continue
        pending.append(j)
    for rec in _map(pending, out_dir, jobs):
        records[rec["key"]] = rec
        trained.append(rec["key"])
    _update_manifest()

    results, failures = [], {}
    for j in all_jobs:
        rec = records[j.key]
        if rec["status"] != "ok":
            failures[j.key] = rec.get("error", "unknown error")
            continue
        if j.is_baseline:
            continue
        base = _baseline(j)
        results.append(ExperimentResult(
            j.dataset.id, j.dataset.city_name, j.dataset.pollutant_name, j.cell.label, j.seed,
            base["val_mse"], rec["val_mse"], percent_reduction(base["val_mse"], rec["val_mse"]),
            rec["history"], rec["wall_time"]))
    write_results(results, failures, out_dir)
    if results:
        render_report(results, out_dir)
    for key, err in failures.items():
        log.error("cell %s failed: %s", key, err)
    return RunSummary(results, failures, trained, skipped, out_dir)


def results_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow(r.csv_row())
    return buf.getvalue()


def write_results(results: Sequence[ExperimentResult], failures: Mapping[str, str], out_dir) -> None:
    out_dir = Path(out_dir)
    _atomic_write(out_dir / "results.csv", results_csv(results))
    doc = {"results": [asdict(r) for r in results], "failures": dict(failures)}
    _atomic_write(out_dir / "results.json", json.dumps(doc, indent=1, sort_keys=True))


def load_results(path) -> list[ExperimentResult]:
    doc = json.loads(Path(path).read_text())
    return [ExperimentResult(**r) for r in doc["results"]]


# -- report -------------------------------------------------------------------

def city_tables(results: Sequence[ExperimentResult]) -> dict[str, dict[str, dict[str, dict]]]:
    """city -> cell -> pollutant -> {mean, std, n} over seeds."""
    acc: dict[str, dict[str, dict[str, list[float]]]] = {}
    for r in results:
        acc.setdefault(r.city, {}).setdefault(r.cell, {}).setdefault(r.pollutant, []).append(r.percent_reduction)
    out = {}
    for city, rows in acc.items():
        out[city] = {cell: {p: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
                            for p, v in cols.items()} for cell, cols in rows.items()}
    return out


def _complete_cells(tables: Mapping[str, Mapping[str, Mapping[str, float]]]):
    """Drop (row, pollutant) cells missing from any city, returning what was dropped."""
    cities = list(tables)
    common = set.intersection(*({(r, p) for r, row in tables[c].items() for p in row} for c in cities))
    dropped = sorted(set().union(*({(r, p) for r, row in tables[c].items() for p in row} for c in cities)) - common)
    trimmed = {c: {} for c in cities}
    for c in cities:
        for r, p in common:
            trimmed[c].setdefault(r, {})[p] = tables[c][r][p]
    return trimmed, dropped


def render_table_csv(rows: Sequence[AggregateRow]) -> str:
    cols = pollutant_columns(p for r in rows for p in r.values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attention", *cols, AVERAGE])
    for r in rows:
        w.writerow([r.label, *(format_one_decimal(r.values[p]) if p in r.values else "" for p in cols),
                    format_one_decimal(r.average)])
    return buf.getvalue()


def render_svg(rows: Sequence[AggregateRow], title: str = "Percent reduction in MSE") -> str:
    """Grouped bar chart: one group per row, one bar per pollutant."""
    cols = pollutant_columns(p for r in rows for p in r.values)
    palette = ["#1b6ca8", "#e07b39", "#3d9970", "#b10dc9", "#85144b", "#7f8c8d"]
    bar, gap, left, top, height = 14, 18, 60, 40, 240
    values = [r.values.get(p, 0.0) for r in rows for p in cols] or [0.0]
    vmax, vmin = max(0.0, max(values)), min(0.0, min(values))
    span = (vmax - vmin) or 1.0
    width = left + len(rows) * (len(cols) * bar + gap) + 120

    def y(v):
        return top + (vmax - v) / span * height

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{top + height + 110}" '
           f'font-family="sans-serif" font-size="10">',
           f'<text x="{left}" y="20" font-size="13">{_xml(title)}</text>',
           f'<line x1="{left}" y1="{y(0):.2f}" x2="{width - 110}" y2="{y(0):.2f}" stroke="#000"/>']
    for tick in np.linspace(vmin, vmax, 5):
        out.append(f'<text x="{left - 6}" y="{y(tick) + 3:.2f}" text-anchor="end">{tick:.1f}</text>')
    x = left + gap / 2
    for r in rows:
        for i, p in enumerate(cols):
            v = r.values.get(p, 0.0)
            y0, y1 = sorted((y(0), y(v)))
            out.append(f'<rect x="{x:.2f}" y="{y0:.2f}" width="{bar}" height="{y1 - y0:.2f}" '
                       f'fill="{palette[i % len(palette)]}"><title>{_xml(r.label)} {_xml(p)}: '
                       f'{format_one_decimal(v)}</title></rect>')
            x += bar
        cx = x - len(cols) * bar / 2
        out.append(f'<text x="{cx:.2f}" y="{top + height + 14}" text-anchor="end" '
                   f'transform="rotate(-35 {cx:.2f} {top + height + 14})">{_xml(r.label)}</text>')
        x += gap
    for i, p in enumerate(cols):
        ly = top + i * 16
        out.append(f'<rect x="{width - 100}" y="{ly}" width="10" height="10" fill="{palette[i % len(palette)]}"/>')
        out.append(f'<text x="{width - 85}" y="{ly + 9}">{_xml(p)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_report(results: Sequence[ExperimentResult], out_dir) -> dict[str, Path]:
    """Write ``table.csv``, ``table.json`` and ``chart.svg``; returns their paths.

    Seeds are averaged per (city, cell, pollutant) before cities are
    averaged.  Cells missing from some city are left out and listed under
    ``dropped`` in the JSON.
    """
    if not results:
        raise AggregationError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_city = city_tables(results)
    means = {c: {r: {p: v["mean"] for p, v in row.items()} for r, row in rows.items()} for c, rows in per_city.items()}
    means, dropped = _complete_cells(means)
    if dropped:
        log.warning("cells missing from some cities left out of the aggregate: %s", dropped)
    rows = aggregate_cities(means)
    paths = {"csv": out_dir / "table.csv", "json": out_dir / "table.json", "svg": out_dir / "chart.svg"}
    _atomic_write(paths["csv"], render_table_csv(rows))
    doc = {"rows": [asdict(r) for r in rows], "per_city": per_city, "dropped": [list(d) for d in dropped]}
    _atomic_write(paths["json"], json.dumps(doc, indent=1, sort_keys=True))
    _atomic_write(paths["svg"], render_svg(rows))
    return paths
