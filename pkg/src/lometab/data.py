"""Tabular datasets: CSV + JSON schema sidecar, seeded splits, standardisation, synthetic tasks.

Schema sidecar (JSON)::

    {
      "task": "binary" | "multiclass" | "regression",
      "columns": [
        {"name": "age", "role": "numeric"},
        {"name": "workclass", "role": "categorical"},
        {"name": "income", "role": "target"}
      ]
    }

For classification targets the class vocabulary is the sorted set of target
values; ``n_classes`` may be given explicitly.  Split index files hold one
0-based row index per line.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkernel import make_rng

ROLES = ("numeric", "categorical", "target")
SYNTHETIC_KINDS = ("two_gaussians_binary", "xor_multiclass", "linear_regression", "friedman_regression")


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, row: int, col: str, value: str, reason: str = "unparseable value"):
        super().__init__(f"{reason} {value!r} at row {row}, column {col!r}")
        self.row, self.col = row, col


@dataclass
class Column:
    name: str
    role: str


@dataclass
class DatasetSchema:
    task: str
    columns: list[Column]
    n_classes: int | None = None

    def __post_init__(self):
        self.columns = [c if isinstance(c, Column) else Column(**c) for c in self.columns]
        for c in self.columns:
            if c.role not in ROLES:
                raise SchemaError(f"column {c.name!r}: unknown role {c.role!r}")
        if self.task not in ("regression", "binary", "multiclass"):
            raise SchemaError(f"unknown task {self.task!r}")
        targets = [c for c in self.columns if c.role == "target"]
        if len(targets) != 1:
            raise SchemaError(f"schema needs exactly one target column, found {len(targets)}")
        if not any(c.role != "target" for c in self.columns):
            raise SchemaError("schema needs at least one feature column")

    @property
    def target(self) -> str:
        return next(c.name for c in self.columns if c.role == "target")

    @property
    def numeric(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "numeric"]

    @property
    def categorical(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "categorical"]

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        with open(path) as fh:
            raw = json.load(fh)
        unknown = set(raw) - {"task", "columns", "n_classes"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(raw["task"], raw["columns"], raw.get("n_classes"))

    def dump(self, path):
        data = {"task": self.task, "columns": [{"name": c.name, "role": c.role} for c in self.columns]}
        if self.n_classes is not None:
            data["n_classes"] = self.n_classes
        Path(path).write_text(json.dumps(data, indent=2) + "\n")


@dataclass
class TargetScaler:
    """z-scoring of regression targets; identity (with ``degenerate`` set) when std is 0."""

    mean: float = 0.0
    std: float = 1.0
    degenerate: bool = False

    @classmethod
    def fit(cls, y) -> "TargetScaler":
        y = np.asarray(y, dtype=np.float64)
        std = float(y.std())
        if not std > 0:
            return cls(0.0, 1.0, True)
        return cls(float(y.mean()), std)

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean


@dataclass
class TabularDataset:
    """Numeric features ``x_num (N, n_num)``, categorical codes ``x_cat (N, n_cat)`` and targets ``y``.

    Category code ``len(vocab)`` is the unknown bucket.  ``y`` is always kept in
    the original scale; ``target_scaler`` (regression only) is fitted on the
    training rows.
    """

    schema: DatasetSchema
    x_num: np.ndarray
    x_cat: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    vocabs: list[list[str]] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    degenerate_features: np.ndarray | None = None
    target_scaler: TargetScaler | None = None
    name: str = "dataset"

    @property
    def task(self) -> str:
        return self.schema.task

    @property
    def n_classes(self) -> int:
        if self.task == "regression":
            return 1
        if self.schema.n_classes:
            return self.schema.n_classes
        return len(self.classes) if self.classes else int(self.y.max()) + 1

    @property
    def cat_cardinalities(self) -> list[int]:
        return [len(v) for v in self.vocabs]

    def split(self, part: str):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[part]
        return self.x_num[idx], self.x_cat[idx], self.y[idx]

    def train_target_variance(self) -> float:
        return float(np.var(self.y[self.train_idx]))


def seeded_split(n: int, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffle ``range(n)`` with a Philox stream and cut into train/val/test.

    Sizes: ``n_val = round(f_val * n)``, ``n_test = round(f_test * n)``,
    train gets the rest.  Each returned index array is sorted.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1: {fractions}")
    perm = make_rng(seed).permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    parts = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise ValueError(f"empty {name} split")
    return tuple(np.sort(p) for p in parts)


def _read_index_file(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([int(x) for x in lines], dtype=np.int64)


def load_csv(path, schema: DatasetSchema, split_spec=None, seed: int = 0) -> TabularDataset:
    """Parse ``path`` against ``schema`` and split it.

    ``split_spec`` is either a 3-tuple of fractions or a dict with
    ``train``/``val``/``test`` index-file paths (index files take precedence).
    Categorical vocabularies come from the training rows only; other values
    map to the unknown bucket.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    missing = [c.name for c in schema.columns if c.name not in header]
    if missing:
        raise SchemaError(f"columns missing from {path.name}: {missing}")
    pos = {name: header.index(name) for name in header}
    n = len(rows)
    if n == 0:
        raise SchemaError(f"{path} has no data rows")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise ParseError(i, "<row>", ",".join(r), f"expected {len(header)} fields, got {len(r)} in")

    def numeric_column(name):
        out = np.empty(n)
        j = pos[name]
        for i, r in enumerate(rows):
            cell = r[j].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(i, name, cell) from None
            if not math.isfinite(v):
                raise ParseError(i, name, cell, "non-finite value")
            out[i] = v
        return out

    x_num = np.column_stack([numeric_column(c) for c in schema.numeric]) if schema.numeric else np.zeros((n, 0))

    if isinstance(split_spec, dict):
        train_idx, val_idx, test_idx = (np.sort(_read_index_file(split_spec[k])) for k in ("train", "val", "test"))
        for name, idx in (("train", train_idx), ("val", val_idx), ("test", test_idx)):
            if len(idx) == 0:
                raise ValueError(f"empty {name} split")
            if idx.min() < 0 or idx.max() >= n:
                raise ValueError(f"{name} split index out of range [0, {n})")
        if len(set(train_idx) | set(val_idx) | set(test_idx)) != len(train_idx) + len(val_idx) + len(test_idx):
            raise ValueError("split index files overlap")
    else:
        train_idx, val_idx, test_idx = seeded_split(n, split_spec or (0.6, 0.2, 0.2), seed)

    train_set = set(train_idx.tolist())
    vocabs = []
    cat_cols = []
    for name in schema.categorical:
        j = pos[name]
        values = [r[j].strip() for r in rows]
        vocab = sorted({v for i, v in enumerate(values) if i in train_set})
        lookup = {v: k for k, v in enumerate(vocab)}
        cat_cols.append(np.array([lookup.get(v, len(vocab)) for v in values], dtype=np.int64))
        vocabs.append(vocab)
    x_cat = np.column_stack(cat_cols) if cat_cols else np.zeros((n, 0), dtype=np.int64)

    target = schema.target
    classes: list[str] = []
    if schema.task == "regression":
        y = numeric_column(target)
    else:
        raw = [r[pos[target]].strip() for r in rows]
        try:
            as_num = [float(v) for v in raw]
            classes = [str(v) for v in sorted(set(as_num))]
            lookup = {float(c): k for k, c in enumerate(classes)}
            y = np.array([lookup[v] for v in as_num], dtype=np.int64)
        except ValueError:
            classes = sorted(set(raw))
            lookup = {c: k for k, c in enumerate(classes)}
            y = np.array([lookup[v] for v in raw], dtype=np.int64)
        if schema.task == "binary" and len(classes) > 2:
            raise SchemaError(f"binary task with {len(classes)} target classes")
    return TabularDataset(schema, x_num, x_cat, y, train_idx, val_idx, test_idx, vocabs, classes, name=path.stem)


def standardize(ds: TabularDataset) -> TabularDataset:
    """Return a copy with numeric features z-scored using training statistics.

    Zero-variance features are passed through unchanged and flagged.  For
    regression a :class:`TargetScaler` is fitted on the training targets and
    attached; ``y`` itself stays in the original scale.
    """
    if len(ds.train_idx) == 0:
        raise ValueError("empty train split")
    out = copy.copy(ds)
    train = ds.x_num[ds.train_idx]
    mean = train.mean(axis=0) if train.size else np.zeros(ds.x_num.shape[1])
    std = train.std(axis=0) if train.size else np.ones(ds.x_num.shape[1])
    degenerate = ~(std > 0)
    mean = np.where(degenerate, 0.0, mean)
    std = np.where(degenerate, 1.0, std)
    out.x_num = (ds.x_num - mean) / std
    out.feature_mean, out.feature_std, out.degenerate_features = mean, std, degenerate
    if ds.task == "regression":
        out.target_scaler = TargetScaler.fit(ds.y[ds.train_idx])
    return out


# --------------------------------------------------------------------------
# synthetic tasks


def _kind_key(kind: str) -> str:
    key = kind.strip().lower().replace("-", "_")
    camel = {
        "twogaussiansbinary": "two_gaussians_binary",
        "xormulticlass": "xor_multiclass",
        "linearregression": "linear_regression",
        "friedmanregression": "friedman_regression",
    }
    key = camel.get(key.replace("_", ""), key)
    if key not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    return key


def make_synthetic(kind: str, n: int, seed: int = 0, fractions=(0.6, 0.2, 0.2)) -> TabularDataset:
    """Deterministic desk-scale tasks.

    * ``two_gaussians_binary``: 8 features, class means at ``+-2 u`` for the
      unit vector ``u = (1, ..., 1) / sqrt(8)``, identity covariance.  The mean
      separation is 4 standard deviations, so the Bayes accuracy is
      ``Phi(2) ~ 0.977``.
    * ``xor_multiclass``: ``x ~ U[-1, 1]^4``; label ``2 [x1 > 0] + [x2 > 0]`` (4 classes),
      features 3-4 are noise.
    * ``linear_regression``: ``x ~ N(0, I_2)``, ``y = 2 x1 - x2`` (noiseless).
    * ``friedman_regression``: ``x ~ U[0, 1]^10``,
      ``y = 10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5 + N(0, 1)``.
    """
    key = _kind_key(kind)
    rng = make_rng(seed)
    if key == "two_gaussians_binary":
        d = 8
        y = rng.integers(0, 2, size=n)
        u = np.ones(d) / math.sqrt(d)
        x = rng.normal(size=(n, d)) + np.where(y[:, None] == 1, 2.0, -2.0) * u
        task, n_classes = "binary", 2
    elif key == "xor_multiclass":
        x = rng.uniform(-1.0, 1.0, size=(n, 4))
        y = 2 * (x[:, 0] > 0).astype(np.int64) + (x[:, 1] > 0).astype(np.int64)
        task, n_classes = "multiclass", 4
    elif key == "linear_regression":
        x = rng.normal(size=(n, 2))
        y = 2.0 * x[:, 0] - x[:, 1]
        task, n_classes = "regression", None
    else:
        x = rng.uniform(0.0, 1.0, size=(n, 10))
        y = (
            10.0 * np.sin(np.pi * x[:, 0] * x[:, 1])
            + 20.0 * (x[:, 2] - 0.5) ** 2
            + 10.0 * x[:, 3]
            + 5.0 * x[:, 4]
            + rng.normal(size=n)
        )
        task, n_classes = "regression", None
    cols = [Column(f"x{j + 1}", "numeric") for j in range(x.shape[1])] + [Column("y", "target")]
    schema = DatasetSchema(task, cols, n_classes)
    tr, va, te = seeded_split(n, fractions, seed)
    classes = [str(c) for c in range(n_classes)] if n_classes else []
    return TabularDataset(
        schema, x, np.zeros((n, 0), dtype=np.int64), y, tr, va, te, [], classes, name=key
    )


def bayes_accuracy_two_gaussians(separation: float = 4.0) -> float:
    """Bayes accuracy for two equiprobable unit-variance Gaussians ``separation`` apart."""
    return 0.5 * (1.0 + math.erf(separation / 2.0 / math.sqrt(2.0)))


def write_csv(ds: TabularDataset, path) -> Path:
    """Dump a dataset as CSV with the column order of its schema (used by tests and examples)."""
    path = Path(path)
    num = {name: ds.x_num[:, j] for j, name in enumerate(ds.schema.numeric)}
    cat = {name: ds.x_cat[:, j] for j, name in enumerate(ds.schema.categorical)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([c.name for c in ds.schema.columns])
        for i in range(len(ds.y)):
            row = []
            for c in ds.schema.columns:
                if c.role == "numeric":
                    row.append(repr(float(num[c.name][i])))
                elif c.role == "categorical":
                    code = int(cat[c.name][i])
                    vocab = ds.vocabs[ds.schema.categorical.index(c.name)]
                    row.append(vocab[code] if code < len(vocab) else "__unknown__")
                else:
                    yv = ds.y[i]
                    row.append(repr(float(yv)) if ds.task == "regression" else str(int(yv)))
            w.writerow(row)
    return path
