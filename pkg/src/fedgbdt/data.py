"""Datasets, schema files, partitioning and AUC.

Schema files are JSON::

    {
      "id": "id",                 # optional ID column
      "label": "label",           # optional label column (0/1)
      "features": [
        {"name": "x0", "kind": "continuous", "min": -8.0, "max": 8.0},
        {"name": "grade", "kind": "discrete", "classes": [1, 2, 3, 4]}
      ]
    }

``min``/``max`` are the public value bounds the quantile search starts from.
A feature whose CSV cells were partly empty is marked ``"imputed": true``
after loading (empty cells get the column median).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ArgumentError, DataError, SchemaError, UndefinedMetricError
from .quantiles import FeatureBounds

__all__ = [
    "FeatureSpec",
    "Schema",
    "Dataset",
    "load_csv",
    "save_csv",
    "split_train_test",
    "partition_vertical",
    "partition_horizontal",
    "auc",
    "synth_binary",
    "feature_ranges",
]

MISSING = {"", "na", "nan", "null", "none", "?"}


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "continuous"
    low: Optional[float] = None
    high: Optional[float] = None
    classes: Optional[tuple] = None
    imputed: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "discrete" and not self.classes:
            raise SchemaError(f"discrete feature {self.name!r} needs a class list")

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.kind == "continuous":
            if self.low is not None:
                out["min"] = self.low
            if self.high is not None:
                out["max"] = self.high
        else:
            out["classes"] = list(self.classes)
        if self.imputed:
            out["imputed"] = True
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSpec":
        classes = obj.get("classes")
        return cls(obj["name"], obj.get("kind", "continuous"), obj.get("min"), obj.get("max"),
                   tuple(classes) if classes is not None else None, bool(obj.get("imputed", False)))


@dataclass
class Schema:
    features: List[FeatureSpec]
    label: Optional[str] = "label"
    id_column: Optional[str] = "id"

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    def bounds(self, f: int, feature_index: Optional[int] = None) -> FeatureBounds:
        spec = self.features[f]
        if spec.low is None or spec.high is None:
            raise SchemaError(f"feature {spec.name!r} has no public bounds")
        return FeatureBounds(f if feature_index is None else feature_index, spec.low, spec.high)

    def subset(self, columns: Sequence[int], with_label: bool) -> "Schema":
        return Schema([self.features[c] for c in columns], self.label if with_label else None,
                      self.id_column)

    def to_json(self) -> dict:
        return {"id": self.id_column, "label": self.label,
                "features": [f.to_json() for f in self.features]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
        return cls([FeatureSpec.from_json(f) for f in obj["features"]], obj.get("label"),
                   obj.get("id"))


@dataclass
class Dataset:
    """``n x m`` float64 features with unique sample IDs and optional 0/1 labels.

    ``feature_index`` gives each column's global feature number, which
    differs from ``0..m-1`` on a vertical shard.
    """

    X: np.ndarray
    ids: np.ndarray
    y: Optional[np.ndarray] = None
    schema: Optional[Schema] = None
    feature_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError("feature matrix must be 2-D")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) != self.n:
            raise DataError("one ID per row is required")
        if len(np.unique(self.ids)) != self.n:
            raise DataError("sample IDs must be unique")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if len(self.y) != self.n:
                raise DataError("one label per row is required")
            if not np.isin(self.y, (0, 1)).all():
                raise DataError("labels must be 0 or 1")
        if self.feature_index is None:
            self.feature_index = np.arange(self.m)
        self.feature_index = np.asarray(self.feature_index, dtype=np.int64)
        if self.schema is None:
            self.schema = Schema([FeatureSpec(f"x{i}") for i in self.feature_index])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.X[rows], self.ids[rows], None if self.y is None else self.y[rows],
                       self.schema, self.feature_index)

    def columns(self, cols: Sequence[int], with_label: bool) -> "Dataset":
        cols = list(cols)
        return Dataset(self.X[:, cols], self.ids, self.y if with_label else None,
                       self.schema.subset(cols, with_label), self.feature_index[cols])


def _parse_cell(text: str, line: int, column: str, path) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {text!r} in column {column!r}") from None


def load_csv(path, schema: Optional[Schema] = None) -> Dataset:
    """Read a CSV with a header row.

    Without a schema, a column named ``id`` becomes the IDs, ``label`` the
    labels, and every other column a continuous feature whose bounds are
    taken from the data.

    Raises:
        DataError: empty file or unparseable cell (message names the line).
        SchemaError: header does not contain the schema's columns.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")

    inferred = schema is None
    if inferred:
        id_col = "id" if "id" in header else None
        label = "label" if "label" in header else None
        names = [h for h in header if h not in (id_col, label)]
        schema = Schema([FeatureSpec(h) for h in names], label, id_col)
    missing = [c for c in schema.names + [schema.label, schema.id_column]
               if c is not None and c not in header]
    if missing:
        raise SchemaError(f"{path}: header lacks columns {missing}")
    pos = {h: k for k, h in enumerate(header)}

    n, m = len(rows), len(schema.features)
    X = np.empty((n, m))
    holes = np.zeros((n, m), dtype=bool)
    for r, row in enumerate(rows):
        line = r + 2
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
        for c, spec in enumerate(schema.features):
            text = row[pos[spec.name]].strip()
            if text.lower() in MISSING:
                holes[r, c] = True
                X[r, c] = np.nan
            else:
                X[r, c] = _parse_cell(text, line, spec.name, path)
    if schema.id_column is not None:
        ids = np.array([int(_parse_cell(row[pos[schema.id_column]], r + 2, schema.id_column, path))
                        for r, row in enumerate(rows)], dtype=np.int64)
    else:
        ids = np.arange(n, dtype=np.int64)
    y = None
    if schema.label is not None:
        y = np.array([_parse_cell(row[pos[schema.label]], r + 2, schema.label, path)
                      for r, row in enumerate(rows)])
        bad = np.flatnonzero(~np.isin(y, (0.0, 1.0)))
        if len(bad):
            raise DataError(f"{path}:{bad[0] + 2}: label {y[bad[0]]!r} is not 0 or 1")
        y = y.astype(np.int64)

    specs = []
    for c, spec in enumerate(schema.features):
        if holes[:, c].any():
            if holes[:, c].all():
                raise DataError(f"{path}: column {spec.name!r} is entirely empty")
            X[holes[:, c], c] = float(np.median(X[~holes[:, c], c]))
            spec = replace(spec, imputed=True)
        if spec.kind == "discrete":
            allowed = {float(v) for v in spec.classes}
            outside = [v for v in np.unique(X[:, c]) if float(v) not in allowed]
            if outside:
                raise SchemaError(f"{path}: column {spec.name!r} has undeclared classes {outside[:5]}")
        elif spec.low is None or spec.high is None:
            lo, hi = float(X[:, c].min()), float(X[:, c].max())
            if lo == hi:
                hi = lo + 1.0
            spec = replace(spec, low=lo if spec.low is None else spec.low,
                           high=hi if spec.high is None else spec.high)
        specs.append(spec)
    return Dataset(X, ids, y, Schema(specs, schema.label, schema.id_column))


def save_csv(dataset: Dataset, path) -> None:
    schema = dataset.schema
    id_col = schema.id_column or "id"
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        header = [id_col] + schema.names + ([schema.label] if dataset.y is not None else [])
        w.writerow(header)
        for r in range(dataset.n):
            row = [str(int(dataset.ids[r]))] + [repr(float(v)) for v in dataset.X[r]]
            if dataset.y is not None:
                row.append(str(int(dataset.y[r])))
            w.writerow(row)


def split_train_test(dataset: Dataset, seed: int):
    """Seeded shuffle; the first ``ceil(2n/3)`` rows train, the rest test.

    Both parts keep the original row order.
    """
    n = dataset.n
    if n < 3:
        raise ArgumentError("need at least 3 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(2 * n / 3)
    return dataset.take(np.sort(perm[:n_train])), dataset.take(np.sort(perm[n_train:]))


def feature_ranges(m: int, l: int) -> List[range]:
    """Contiguous feature ranges, earlier participants take the remainder."""
    base, extra = divmod(m, l)
    out, start = [], 0
    for i in range(l):
        size = base + (1 if i < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


def partition_vertical(dataset: Dataset, l: int) -> List[Dataset]:
    """Column shards; only the last participant keeps the labels."""
    if l < 1 or dataset.m < l:
        raise ArgumentError(f"cannot split {dataset.m} features over {l} participants")
    return [dataset.columns(list(r), with_label=(i == l - 1))
            for i, r in enumerate(feature_ranges(dataset.m, l))]


def partition_horizontal(dataset: Dataset, l: int, seed: int) -> List[Dataset]:
    """Seeded row shards with every feature and label; rows keep their original order."""
    if l < 1 or dataset.n < l:
        raise ArgumentError(f"cannot split {dataset.n} samples over {l} participants")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    base, extra = divmod(dataset.n, l)
    shards, start = [], 0
    for i in range(l):
        size = base + (1 if i < extra else 0)
        shards.append(dataset.take(np.sort(perm[start:start + size])))
        start += size
    return shards


def auc(labels, scores) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count one half."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ArgumentError("labels and scores differ in length")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def synth_binary(n: int, m: int, separation: float, seed: int) -> Dataset:
    """Two Gaussian clusters with unit variance.

    Class means sit at ``+-separation/2`` along the all-ones direction, so
    ``separation`` is the distance between them; ``0`` gives pure noise.
    """
    if n < 1 or m < 1:
        raise ArgumentError("need n, m >= 1")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    direction = np.ones(m) / math.sqrt(m)
    X = rng.standard_normal((n, m)) + ((2 * y - 1) * separation / 2.0)[:, None] * direction
    specs = [FeatureSpec(f"x{i}", "continuous", float(math.floor(X[:, i].min()) - 1.0),
                         float(math.ceil(X[:, i].max()) + 1.0)) for i in range(m)]
    return Dataset(X, np.arange(n), y, Schema(specs, "label", "id"))
