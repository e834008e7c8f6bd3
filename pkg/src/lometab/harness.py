"""Experiment orchestration: single runs, grids, axis sweeps, the additive gap run, random search.

An experiment config is a JSON document mirroring :class:`ExperimentConfig`::

    {
      "dataset": {"synthetic": "two_gaussians_binary", "n": 4000, "seed": 0},
      "model": {"K": 8, "L": 2, "d": 32, "r": 16, "sigma_init": 1.0},
      "train": {"lr": 0.001, "max_epochs": 100, "patience": 100},
      "axes": [["r", [1, 2, 4, 8, 16]], ["sigma_init", [0.1, 0.3, 0.5, 1.0, 2.0, 3.0]]],
      "seeds": [0, 1, 2],
      "variants": ["multiplicative"],
      "trace_every": 5,
      "trace": false
    }

A CSV dataset is given as ``{"csv": path, "schema": path}`` plus optional
``fractions`` or ``split_files`` (``{"train": .., "val": .., "test": ..}``) and
``seed``.  Unknown keys are rejected at every level.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import functools
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .data import DatasetSchema, load_csv, make_synthetic, standardize
from .layers import Kind, fit_ple
from .model import ModelConfig, init_model
from .numkernel import make_rng
from .trainer import TrainConfig, evaluate, fit, target_scaler_for

log = logging.getLogger(__name__)

GRID_R = (1, 2, 4, 8, 16)
GRID_SIGMA = (0.1, 0.3, 0.5, 1.0, 2.0, 3.0)
AXIS_SWEEP_SIGMA = (0.1, 0.3, 0.5, 1.0, 2.0)
DEFAULT_TRACE_EVERY = 5

MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
DATASET_KEYS = {"synthetic", "n", "csv", "schema", "fractions", "split_files", "seed", "name"}


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    dataset: dict
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    axes: list[tuple[str, list]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    variants: list[str] = field(default_factory=lambda: ["multiplicative"])
    trace_every: int = DEFAULT_TRACE_EVERY
    trace: bool = False

    def __post_init__(self):
        _reject_unknown("dataset", self.dataset, DATASET_KEYS)
        if ("synthetic" in self.dataset) == ("csv" in self.dataset):
            raise ConfigError("dataset needs exactly one of 'synthetic' or 'csv'")
        if "csv" in self.dataset and "schema" not in self.dataset:
            raise ConfigError("a csv dataset needs a 'schema' path")
        self.axes = [(str(name), list(values)) for name, values in self.axes]
        for name, values in self.axes:
            if name not in MODEL_FIELDS and name not in TRAIN_FIELDS:
                raise ConfigError(f"axis {name!r} is not a model or train field")
            if name in ("variant", "task", "n_classes"):
                raise ConfigError(f"{name!r} cannot be swept as an axis")
            if not values:
                raise ConfigError(f"axis {name!r} has no values")
        self.variants = [Kind.parse(v).value for v in self.variants]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.trace_every < 1:
            raise ConfigError("trace_every must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        allowed = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown("experiment", raw, allowed)
        raw = dict(raw)
        if "dataset" not in raw:
            raise ConfigError("config needs a 'dataset' section")
        model = raw.get("model", {})
        train = raw.get("train", {})
        _reject_unknown("model", model, MODEL_FIELDS)
        _reject_unknown("train", train, TRAIN_FIELDS)
        axes = raw.get("axes", [])
        if isinstance(axes, dict):
            axes = list(axes.items())
        return cls(
            dataset=dict(raw["dataset"]),
            model=ModelConfig(**model),
            train=TrainConfig(**train),
            axes=axes,
            seeds=[int(s) for s in raw.get("seeds", [0])],
            variants=list(raw.get("variants", ["multiplicative"])),
            trace_every=int(raw.get("trace_every", DEFAULT_TRACE_EVERY)),
            trace=bool(raw.get("trace", False)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "axes": [[n, list(v)] for n, v in self.axes],
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "trace_every": self.trace_every,
            "trace": self.trace,
        }


# --------------------------------------------------------------------------
# datasets


@functools.lru_cache(maxsize=8)
def _load_dataset_cached(spec_json: str):
    spec = json.loads(spec_json)
    seed = int(spec.get("seed", 0))
    if "synthetic" in spec:
        ds = make_synthetic(spec["synthetic"], int(spec.get("n", 4000)), seed, tuple(spec.get("fractions", (0.6, 0.2, 0.2))))
    else:
        schema = DatasetSchema.load(spec["schema"])
        split = spec.get("split_files") or tuple(spec.get("fractions", (0.6, 0.2, 0.2)))
        ds = load_csv(spec["csv"], schema, split, seed)
    if "name" in spec:
        ds.name = spec["name"]
    return standardize(ds)


def load_dataset(spec: dict):
    """Standardised dataset for a config ``dataset`` section (cached per process)."""
    return _load_dataset_cached(json.dumps(spec, sort_keys=True))


# --------------------------------------------------------------------------
# records

KEY_COLUMNS = ("dataset", "variant", "K", "r", "sigma_init", "seed")
METRIC_COLUMNS = tuple(metrics.DiversityReport.field_names())
EXTRA_COLUMNS = ("best_epoch", "stopped_epoch", "overrides", "kl_init", "kl_trace")
RECORD_COLUMNS = KEY_COLUMNS + METRIC_COLUMNS + EXTRA_COLUMNS


@dataclass
class SweepRecord:
    dataset: str
    variant: str
    K: int
    r: int
    sigma_init: float
    seed: int
    task_score: float | None = None
    accuracy: float | None = None
    rmse: float | None = None
    pairwise_kl: float | None = None
    disagreement: float | None = None
    ambiguity: float | None = None
    normalized_ambiguity: float | None = None
    ece: float | None = None
    best_epoch: int = 0
    stopped_epoch: int = 0
    overrides: dict = field(default_factory=dict)
    kl_init: float | None = None
    kl_trace: list = field(default_factory=list)

    def cell_key(self) -> tuple:
        return (self.dataset, self.variant, self.K, self.r, self.sigma_init, json.dumps(self.overrides, sort_keys=True))

    def to_row(self) -> list[str]:
        out = []
        for col in RECORD_COLUMNS:
            v = getattr(self, col)
            if col in ("overrides", "kl_trace"):
                out.append(json.dumps(v, sort_keys=True) if v else "")
            elif v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_row(cls, row: dict) -> "SweepRecord":
        kw = {}
        for f in dataclasses.fields(cls):
            raw = row.get(f.name, "")
            if f.name in ("overrides", "kl_trace"):
                kw[f.name] = json.loads(raw) if raw else ({} if f.name == "overrides" else [])
            elif f.name in ("dataset", "variant"):
                kw[f.name] = raw
            elif f.name in ("K", "r", "seed", "best_epoch", "stopped_epoch"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw) if raw != "" else None
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps({c: getattr(self, c) for c in RECORD_COLUMNS})


@dataclass
class RunSpec:
    """Everything one worker needs for one (cell, seed, variant) run."""

    dataset: dict
    model: ModelConfig
    train: TrainConfig
    seed: int
    overrides: dict = field(default_factory=dict)
    trace_every: int | None = None


def _kl_or_none(pred):
    if pred.task == "regression" or pred.members.shape[0] < 2:
        return None
    return metrics.pairwise_kl(pred.members)


def run_spec(spec: RunSpec) -> SweepRecord:
    """init -> fit -> evaluate on the test split.  Deterministic per seed."""
    ds = load_dataset(spec.dataset)
    cfg = copy.copy(spec.model)
    cfg.task, cfg.n_classes, cfg.seed = ds.task, ds.n_classes, spec.seed
    cfg.validate()
    tcfg = copy.copy(spec.train)
    tcfg.seed = spec.seed
    x_num, x_cat, _ = ds.split("train")
    ple = fit_ple(x_num, cfg.n_bins, ds.cat_cardinalities)
    model = init_model(cfg, ple, make_rng(spec.seed))
    scaler = target_scaler_for(ds)

    trace: list = []
    kl_init = None
    on_epoch = None
    if spec.trace_every:
        last = tcfg.max_epochs

        def on_epoch(epoch, m):
            nonlocal kl_init
            if epoch == 0:
                kl_init = _kl_or_none(evaluate(m, ds, "test", scaler)[0])
            elif epoch % spec.trace_every == 0 or epoch == last:
                trace.append([epoch, _kl_or_none(evaluate(m, ds, "test", scaler)[0])])

    model, report = fit(model, ds, tcfg, on_epoch=on_epoch)
    pred, y = evaluate(model, ds, "test", scaler)
    var = ds.train_target_variance() if ds.task == "regression" else None
    rep = metrics.diversity_report(ds.task, pred.members, y, var if var and var > 0 else None)
    return SweepRecord(
        dataset=ds.name,
        variant=cfg.variant,
        K=cfg.K,
        r=cfg.r,
        sigma_init=float(cfg.sigma_init),
        seed=spec.seed,
        **dataclasses.asdict(rep),
        best_epoch=report.best_epoch,
        stopped_epoch=report.stopped_epoch,
        overrides=dict(spec.overrides),
        kl_init=kl_init,
        kl_trace=trace,
    )


def run_single(cfg: ExperimentConfig, seed: int | None = None, variant: str | None = None) -> SweepRecord:
    model = copy.copy(cfg.model)
    model.variant = Kind.parse(variant or cfg.variants[0]).value
    spec = RunSpec(cfg.dataset, model, cfg.train, cfg.seeds[0] if seed is None else seed,
                   trace_every=cfg.trace_every if cfg.trace else None)
    return run_spec(spec)


def expand(cfg: ExperimentConfig) -> list[RunSpec]:
    """Cartesian product in the order variants x axes (first axis slowest) x seeds."""
    names = [n for n, _ in cfg.axes]
    combos = list(itertools.product(*[v for _, v in cfg.axes])) if cfg.axes else [()]
    specs = []
    for variant in cfg.variants:
        for combo in combos:
            model = copy.copy(cfg.model)
            train = copy.copy(cfg.train)
            model.variant = variant
            overrides = {}
            for name, value in zip(names, combo):
                if name in MODEL_FIELDS:
                    setattr(model, name, value)
                else:
                    setattr(train, name, value)
                if name not in ("K", "r", "sigma_init"):
                    overrides[name] = value
            model.validate()
            for seed in cfg.seeds:
                specs.append(RunSpec(cfg.dataset, model, train, int(seed), overrides,
                                     cfg.trace_every if cfg.trace else None))
    return specs


def run_specs(specs: list[RunSpec], workers: int = 1) -> list[SweepRecord]:
    """Run specs, in a process pool when ``workers > 1``; output keeps input order."""
    if workers <= 1:
        return [run_spec(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_spec, specs))


@dataclass
class CellAggregate:
    key: tuple
    n: int
    mean: dict
    std: dict


def aggregate(records: list[SweepRecord]) -> list[CellAggregate]:
    """Per-cell mean and sample standard deviation (ddof=1; 0 for a single seed) over seeds.

    Metrics missing from any record of a cell are reported as ``None``.
    """
    cells: dict[tuple, list[SweepRecord]] = {}
    for rec in records:
        cells.setdefault(rec.cell_key(), []).append(rec)
    out = []
    for key, recs in cells.items():
        mean, std = {}, {}
        for col in METRIC_COLUMNS:
            vals = [getattr(r, col) for r in recs]
            if any(v is None for v in vals):
                mean[col] = std[col] = None
                continue
            arr = np.array(vals, dtype=np.float64)
            mean[col] = float(arr.mean())
            std[col] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out.append(CellAggregate(key, len(recs), mean, std))
    return out


def run_grid(cfg: ExperimentConfig, workers: int = 1):
    if not cfg.axes:
        raise ConfigError("a grid needs at least one axis")
    records = run_specs(expand(cfg), workers)
    return records, aggregate(records)


def default_grid_axes() -> list[tuple[str, list]]:
    return [("r", list(GRID_R)), ("sigma_init", list(GRID_SIGMA))]


def axis_sweep_config(cfg: ExperimentConfig, axis: str, values=None) -> ExperimentConfig:
    """Single-axis sweep over ``r`` or ``sigma_init``; other settings come from ``cfg``."""
    if axis not in ("r", "sigma_init"):
        raise ConfigError("axis sweeps run over 'r' or 'sigma_init'")
    if values is None:
        values = list(GRID_R) if axis == "r" else list(AXIS_SWEEP_SIGMA)
    out = copy.deepcopy(cfg)
    out.axes = [(axis, list(values))]
    return out


def run_gap_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[SweepRecord]:
    """Multiplicative vs additive under one shared config; KL traced every ``trace_every`` epochs.

    Early stopping is disabled (patience = max_epochs) so every trace covers
    the full training run; the last trace point is the end-of-training KL.
    """
    base = copy.deepcopy(cfg)
    base.train.patience = base.train.max_epochs
    base.trace = True
    specs = []
    for seed in base.seeds:
        for variant in (Kind.MULTIPLICATIVE.value, Kind.ADDITIVE.value):
            model = copy.copy(base.model)
            model.variant = variant  # the only field that differs between the two arms
            specs.append(RunSpec(base.dataset, model, base.train, int(seed), trace_every=base.trace_every))
    return run_specs(specs, workers)


def gap_summary(records: list[SweepRecord]) -> dict:
    """Seed-averaged end-of-training KL per variant."""
    out: dict[str, list[float]] = {}
    for rec in records:
        if rec.kl_trace:
            out.setdefault(rec.variant, []).append(rec.kl_trace[-1][1])
    return {k: float(np.mean(v)) for k, v in out.items()}


# --------------------------------------------------------------------------
# random search


@dataclass
class Categorical:
    values: list

    def sample(self, rng):
        v = self.values[int(rng.integers(len(self.values)))]
        return v.sample(rng) if hasattr(v, "sample") else v


@dataclass
class IntRange:
    low: int
    high: int
    step: int = 1

    def sample(self, rng):
        n = (self.high - self.low) // self.step
        return int(self.low + self.step * int(rng.integers(n + 1)))


@dataclass
class Uniform:
    low: float
    high: float

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high))


@dataclass
class LogUniform:
    low: float
    high: float

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


def default_hpo_space() -> dict:
    """Default tuning space (there is no separate PLE embedding width to tune)."""
    return {
        "K": Categorical([16, 32]),
        "r": Categorical([1, 2, 4, 8, 16]),
        "sigma_init": Categorical([0.1, 0.3, 0.5, 1.0]),
        "d": IntRange(64, 1024, 16),
        "L": IntRange(1, 4),
        "lr": LogUniform(1e-4, 5e-3),
        "weight_decay": Categorical([0.0, LogUniform(1e-4, 1e-1)]),
        "p_drop": Categorical([0.0, Uniform(0.0, 0.5)]),
        "n_bins": IntRange(2, 128),
    }


def validate_space(space: dict):
    for name, dist in space.items():
        if name not in MODEL_FIELDS and name not in TRAIN_FIELDS:
            raise ConfigError(f"search parameter {name!r} is not a model or train field")
        if isinstance(dist, Categorical) and not dist.values:
            raise ConfigError(f"{name}: empty categorical set")
        if isinstance(dist, (IntRange, Uniform, LogUniform)) and dist.high < dist.low:
            raise ConfigError(f"{name}: empty range")


def run_hpo(cfg: ExperimentConfig, space: dict | None = None, budget: int = 100, seed: int = 0, workers: int = 1):
    """Seeded random search; returns ``(best_trial, trials)``.

    Each trial is trained with the config's first seed and scored on the
    validation split (RMSE minimised, accuracy maximised).  No pruning.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = default_hpo_space() if space is None else space
    validate_space(space)
    rng = make_rng(seed)
    ds = load_dataset(cfg.dataset)
    trials = []
    specs = []
    for t in range(budget):
        params = {name: dist.sample(rng) for name, dist in space.items()}
        model = copy.copy(cfg.model)
        train = copy.copy(cfg.train)
        for name, value in params.items():
            setattr(model if name in MODEL_FIELDS else train, name, value)
        model.validate()
        specs.append(RunSpec(cfg.dataset, model, train, cfg.seeds[0]))
        trials.append({"trial": t, "params": params})
    scores = run_specs_validation(specs, workers)
    for trial, score in zip(trials, scores):
        trial["val_metric"] = score
    higher = metrics.higher_is_better(ds.task)
    best = max(trials, key=lambda tr: tr["val_metric"] if higher else -tr["val_metric"])
    return best, trials


def _validation_score(spec: RunSpec) -> float:
    ds = load_dataset(spec.dataset)
    cfg = copy.copy(spec.model)
    cfg.task, cfg.n_classes, cfg.seed = ds.task, ds.n_classes, spec.seed
    tcfg = copy.copy(spec.train)
    tcfg.seed = spec.seed
    ple = fit_ple(ds.split("train")[0], cfg.n_bins, ds.cat_cardinalities)
    _, report = fit(init_model(cfg, ple, make_rng(spec.seed)), ds, tcfg)
    return report.best_val_metric


def run_specs_validation(specs, workers: int = 1) -> list[float]:
    if workers <= 1:
        return [_validation_score(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_validation_score, specs))


# --------------------------------------------------------------------------
# export


def pivot_metric(records: list[SweepRecord]) -> str:
    task_metric = "pairwise_kl"
    if records and records[0].rmse is not None:
        task_metric = "normalized_ambiguity" if records[0].normalized_ambiguity is not None else "ambiguity"
    return task_metric


def write_pivot(records: list[SweepRecord], path, metric: str | None = None) -> Path:
    """Heatmap layout: one row per (dataset, variant, K, r), one column per sigma_init, cell = seed mean."""
    metric = metric or pivot_metric(records)
    aggs = aggregate(records)
    sigmas = sorted({a.key[4] for a in aggs})
    rows: dict[tuple, dict] = {}
    for a in aggs:
        dataset, variant, K, r, sigma, _ = a.key
        rows.setdefault((dataset, variant, K, r), {})[sigma] = a.mean[metric]
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "variant", "K", "r"] + [f"sigma_init={s!r}" for s in sigmas])
        for (dataset, variant, K, r), cells in sorted(rows.items(), key=lambda kv: kv[0]):
            vals = [cells.get(s) for s in sigmas]
            w.writerow([dataset, variant, K, r] + ["" if v is None else repr(v) for v in vals])
    return path


def write_aggregates(aggs: list[CellAggregate], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["dataset", "variant", "K", "r", "sigma_init", "overrides", "n_seeds"]
        for col in METRIC_COLUMNS:
            header += [f"{col}_mean", f"{col}_std"]
        w.writerow(header)
        for a in aggs:
            row = list(a.key[:5]) + [a.key[5] if a.key[5] != "{}" else "", a.n]
            for col in METRIC_COLUMNS:
                row += ["" if a.mean[col] is None else repr(a.mean[col]), "" if a.std[col] is None else repr(a.std[col])]
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def export_results(records: list[SweepRecord], path, fmt: str = "csv", pivot: bool = True) -> dict[str, Path]:
    """Write records (fixed column order) and, for r x sigma_init grids, the pivot table beside them.

    Returns the written paths keyed by ``records``/``pivot``.
    """
    if not records:
        raise ValueError("no records to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_COLUMNS)
            for rec in records:
                w.writerow(rec.to_row())
    elif fmt in ("json-lines", "jsonl"):
        with open(path, "w") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    out = {"records": path}
    if pivot:
        metric = pivot_metric(records)
        if any(getattr(r, metric) is not None for r in records):
            out["pivot"] = write_pivot(records, path.with_name(f"{path.stem}.pivot_{metric}.csv"), metric)
    return out


def read_results(path, fmt: str | None = None) -> list[SweepRecord]:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json-lines")
    if fmt == "csv":
        with open(path, newline="") as fh:
            return [SweepRecord.from_row(row) for row in csv.DictReader(fh)]
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(SweepRecord(**json.loads(line)))
    return records
