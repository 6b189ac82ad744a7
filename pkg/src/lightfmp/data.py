"""Dataset schema, CSV ingestion, stratified splitting, batching, and a
synthetic CTR generator with known-informative fields."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np


class DataError(Exception):
    """Malformed input file or schema violation."""


class ConfigError(Exception):
    """Invalid split / generator configuration."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # "categorical" | "continuous"
    cardinality: int = 1

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise DataError(f"unknown field kind {self.kind!r} for field {self.name!r}")
        if self.kind == "categorical" and self.cardinality < 2:
            raise DataError(f"categorical field {self.name!r} needs cardinality >= 2")
        if self.kind == "continuous" and self.cardinality != 1:
            raise DataError(f"continuous field {self.name!r} must have cardinality 1")


@dataclass(frozen=True)
class FieldSchema:
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        if len(self.fields) < 2:
            raise DataError("schema needs at least 2 fields")

    @property
    def m(self) -> int:
        return len(self.fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def cardinalities(self) -> np.ndarray:
        return np.array([f.cardinality for f in self.fields], dtype=np.int64)

    def is_categorical(self) -> np.ndarray:
        return np.array([f.kind == "categorical" for f in self.fields])

    def to_toml(self) -> str:
        lines = []
        for f in self.fields:
            lines.append("[[field]]")
            lines.append(f'name = "{f.name}"')
            lines.append(f'kind = "{f.kind}"')
            lines.append(f"cardinality = {f.cardinality}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_toml(cls, text: str) -> "FieldSchema":
        try:
            import tomllib as toml_reader
        except ImportError:
            import tomli as toml_reader

        doc = toml_reader.loads(text)
        specs = [
            FieldSpec(f["name"], f["kind"], int(f.get("cardinality", 1)))
            for f in doc.get("field", [])
        ]
        return cls(tuple(specs))

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    @classmethod
    def load(cls, path) -> "FieldSchema":
        return cls.from_toml(Path(path).read_text())


@dataclass
class Batch:
    """One mini-batch: per-field raw values (categorical columns hold
    integer indices) and binary labels."""

    x: np.ndarray  # (B, m) float64
    y: np.ndarray  # (B,) float64 in {0, 1}

    def __len__(self) -> int:
        return self.x.shape[0]


class Dataset:
    """Immutable encoded example table tied to a schema.

    `row_ids` track provenance through splits so leakage checks can
    compare membership against the source dataset.
    """

    def __init__(self, schema: FieldSchema, x: np.ndarray, y: np.ndarray,
                 name: str = "", row_ids: Optional[np.ndarray] = None):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != schema.m:
            raise DataError(f"feature matrix width {x.shape} does not match schema m={schema.m}")
        if y.shape != (x.shape[0],):
            raise DataError("label vector length mismatch")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be exactly 0 or 1")
        for j, spec in enumerate(schema.fields):
            if spec.kind == "categorical" and x.shape[0]:
                col = x[:, j]
                if np.any(col != np.floor(col)) or col.min() < 0 or col.max() >= spec.cardinality:
                    raise DataError(f"categorical index out of range for field {spec.name!r}")
        self.schema = schema
        self.x = x
        self.y = y
        self.name = name
        self.row_ids = np.arange(x.shape[0]) if row_ids is None else np.asarray(row_ids)
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def pos_rate(self) -> float:
        return float(self.y.mean()) if len(self) else 0.0

    def take(self, idx: np.ndarray, name: str = "") -> "Dataset":
        return Dataset(self.schema, self.x[idx], self.y[idx],
                       name=name or self.name, row_ids=self.row_ids[idx])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.schema.names + ["label"])
            cat = self.schema.is_categorical()
            for i in range(len(self)):
                row = []
                for j in range(self.schema.m):
                    v = self.x[i, j]
                    row.append(str(int(v)) if cat[j] else repr(float(v)))
                row.append(str(int(self.y[i])))
                w.writerow(row)


@dataclass
class SplitSet:
    train: Dataset
    val: Dataset
    test: Dataset
    pretrain: Dataset
    seed: int

    def splits(self) -> dict[str, Dataset]:
        return {"train": self.train, "val": self.val,
                "test": self.test, "pretrain": self.pretrain}


@dataclass
class SyntheticSpec:
    m: int
    informative: frozenset[int]
    cardinalities: Sequence[int]
    n: int
    seed: int
    weight_scale: float = 1.5
    noise_std: float = 0.1

    def __post_init__(self):
        self.informative = frozenset(self.informative)
        if not self.informative or not self.informative < set(range(self.m)):
            raise ConfigError("informative must be a nonempty proper subset of fields")
        if len(self.cardinalities) != self.m:
            raise ConfigError("cardinalities length must equal m")
        if self.weight_scale <= 0 or self.noise_std < 0 or self.n < 1:
            raise ConfigError("invalid synthetic spec")


def load_dataset(path, schema: FieldSchema, name: str = "") -> Dataset:
    """Parse the CSV interchange format: header of field names then `label`,
    categorical cells as integer indices, label 0/1."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows = []
    labels = []
    cat = schema.is_categorical()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file (no header)")
        expected = schema.names + ["label"]
        if header != expected:
            raise DataError(f"{path}: header {header} does not match schema {expected}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != schema.m + 1:
                raise DataError(f"{path}: wrong column count, line {lineno}")
            vals = np.empty(schema.m)
            for j in range(schema.m):
                try:
                    vals[j] = int(row[j]) if cat[j] else float(row[j])
                except ValueError:
                    raise DataError(f"{path}: bad cell {row[j]!r}, line {lineno}") from None
                if cat[j] and not (0 <= vals[j] < schema.fields[j].cardinality):
                    raise DataError(f"{path}: index out of range, line {lineno}")
            if row[-1] not in ("0", "1"):
                raise DataError(f"{path}: non-binary label, line {lineno}")
            rows.append(vals)
            labels.append(int(row[-1]))
    x = np.array(rows) if rows else np.empty((0, schema.m))
    return Dataset(schema, x, np.array(labels, dtype=np.float64), name=name or path.stem)


def _allocate(n_class: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(n_class * ratios[0]))
    n_val = int(round(n_class * ratios[1]))
    n_test = n_class - n_train - n_val
    if n_test < 0:
        n_val += n_test
        n_test = 0
    return n_train, n_val, n_test


def stratified_split(ds: Dataset, ratios: tuple[float, float, float],
                     pretrain_size: int, seed: int) -> SplitSet:
    """Split positives and negatives independently so every split keeps the
    source class balance; the pretraining subset is carved out of the train
    portion (continued training later uses train minus nothing: the carve
    removes those rows from train)."""
    if len(ds) == 0:
        raise ConfigError("cannot split an empty dataset")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {ratios}")
    pos = np.flatnonzero(ds.y == 1)
    neg = np.flatnonzero(ds.y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigError("stratification needs both classes present")
    rng = np.random.default_rng([seed, 0x5b17])
    parts: dict[str, list[np.ndarray]] = {k: [] for k in ("train", "val", "test", "pretrain")}
    class_sizes = {}
    for label, idx in (("pos", pos), ("neg", neg)):
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, n_test = _allocate(len(idx), ratios)
        class_sizes[label] = n_train
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:n_train + n_val + n_test])

    train_total = class_sizes["pos"] + class_sizes["neg"]
    if pretrain_size > train_total:
        raise ConfigError(f"pretrain_size {pretrain_size} exceeds train portion {train_total}")
    # carve the pretrain subset from the head of each class's train share,
    # proportionally, so both train and pretrain stay stratified
    pre_pos = int(round(pretrain_size * class_sizes["pos"] / train_total)) if train_total else 0
    pre_pos = min(pre_pos, class_sizes["pos"])
    pre_neg = pretrain_size - pre_pos
    if pre_neg > class_sizes["neg"]:
        pre_pos += pre_neg - class_sizes["neg"]
        pre_neg = class_sizes["neg"]
    carves = (pre_pos, pre_neg)
    for i in range(2):
        tr = parts["train"][i]
        parts["pretrain"].append(tr[:carves[i]])
        parts["train"][i] = tr[carves[i]:]

    out = {}
    for key in parts:
        idx = np.concatenate(parts[key]) if parts[key] else np.empty(0, dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        out[key] = ds.take(idx.astype(np.int64), name=f"{ds.name}:{key}")
    return SplitSet(train=out["train"], val=out["val"], test=out["test"],
                    pretrain=out["pretrain"], seed=seed)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Logistic ground truth over the informative fields only: per-category
    weights are drawn once, the label is Bernoulli(sigmoid(sum + noise))."""
    rng = np.random.default_rng([spec.seed, 0x5717])
    cards = np.asarray(spec.cardinalities, dtype=np.int64)
    x = np.empty((spec.n, spec.m))
    for j in range(spec.m):
        x[:, j] = rng.integers(0, cards[j], size=spec.n)
    logits = np.zeros(spec.n)
    for j in sorted(spec.informative):
        w = rng.normal(0.0, spec.weight_scale, size=cards[j])
        logits += w[x[:, j].astype(np.int64)]
    if spec.noise_std > 0:
        logits += rng.normal(0.0, spec.noise_std, size=spec.n)
    p = 1.0 / (1.0 + np.exp(-logits))
    y = (rng.random(spec.n) < p).astype(np.float64)
    fields = tuple(FieldSpec(f"f{j}", "categorical", int(cards[j])) for j in range(spec.m))
    return Dataset(FieldSchema(fields), x, y, name=f"synthetic-{spec.seed}")


def synthetic_schema(spec: SyntheticSpec) -> FieldSchema:
    cards = np.asarray(spec.cardinalities, dtype=np.int64)
    return FieldSchema(tuple(
        FieldSpec(f"f{j}", "categorical", int(cards[j])) for j in range(spec.m)))


def batch_iter(ds: Dataset, batch_size: int,
               shuffle_seed: Optional[int] = None) -> Iterator[Batch]:
    """Yield every example exactly once; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(ds) == 0:
        raise DataError("empty split")
    order = np.arange(len(ds))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, 0xba7c]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(x=ds.x[idx], y=ds.y[idx])
