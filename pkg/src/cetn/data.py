"""Raw CSV ingestion, per-field vocabularies, splits and mini-batches.

Every categorical field gets a vocabulary built on the training split only.
Index 0 is reserved for OOV; tokens seen fewer than ``min_count`` times, and
missing values, encode to it. Remaining tokens are numbered from 1 in order
of descending frequency with lexicographic tie-breaking.
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

OOV_INDEX = 0
MISSING = ""
TIMESTAMP_FIELDS = ("hour", "weekday", "weekend")


class ConfigurationError(ValueError):
    """Inconsistent dataset, schema or run configuration."""


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: str = "categorical"  # or "numeric"
    column_index: int = -1

    def __post_init__(self):
        if self.kind not in ("categorical", "numeric"):
            raise ConfigurationError(f"field {self.name!r}: unknown kind {self.kind!r}")


@dataclass
class DatasetSchema:
    fields: List[FieldSchema]
    label: str = "label"
    # raw YYMMDDHH column expanded into hour / weekday / weekend fields on read
    timestamp_column: Optional[str] = None

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate field names in schema: {names}")
        if self.label in names:
            raise ConfigurationError(f"label column {self.label!r} is also listed as a field")

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.fields]

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        fields = []
        for item in d["fields"]:
            if isinstance(item, str):
                item = {"name": item}
            fields.append(FieldSchema(item["name"], item.get("kind", "categorical")))
        return cls(fields, d.get("label", "label"), d.get("timestamp_column"))

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = {"label": self.label, "fields": [{"name": f.name, "kind": f.kind} for f in self.fields]}
        if self.timestamp_column:
            out["timestamp_column"] = self.timestamp_column
        return out

    def bind(self, header: Sequence[str]) -> "DatasetSchema":
        """Resolve column indices against a CSV header."""
        header = list(header)
        if self.timestamp_column:
            if self.timestamp_column not in header:
                raise ConfigurationError(f"column {self.timestamp_column!r} not found in CSV header {header}")
            header = [h for h in header if h != self.timestamp_column] + list(TIMESTAMP_FIELDS)
        pos = {name: i for i, name in enumerate(header)}
        missing = [n for n in [self.label] + self.names if n not in pos]
        if missing:
            raise ConfigurationError(f"column {missing[0]!r} not found in CSV header {list(header)}")
        return DatasetSchema(
            [FieldSchema(f.name, f.kind, pos[f.name]) for f in self.fields], self.label, self.timestamp_column
        )


# ---------------------------------------------------------------------------
# token-level preprocessing


def discretize_numeric(x) -> str:
    """Bucket a numeric value: floor((ln x)^2) above 2, "1" otherwise.

    ``None``, empty strings and NaN are missing and map to the OOV-bound
    empty token.
    """
    if x is None:
        return MISSING
    if isinstance(x, str):
        x = x.strip()
        if not x:
            return MISSING
        x = float(x)
    x = float(x)
    if math.isnan(x):
        return MISSING
    if x > 2:
        return str(int(math.floor(math.log(x) ** 2)))
    return "1"


def expand_timestamp(token: str) -> tuple:
    """Split an Avazu ``YYMMDDHH`` hour stamp into (hour, weekday, weekend) tokens."""
    token = token.strip()
    when = datetime.strptime("20" + token[:6], "%Y%m%d")
    weekday = when.weekday()
    return token[6:8], str(weekday), "1" if weekday >= 5 else "0"


def expand_timestamp_column(rows: List[dict], column: str = "hour") -> List[dict]:
    """Replace ``column`` by the three derived fields hour, weekday and weekend."""
    out = []
    for row in rows:
        row = dict(row)
        hour, weekday, weekend = expand_timestamp(row.pop(column))
        row["hour"], row["weekday"], row["weekend"] = hour, weekday, weekend
        out.append(row)
    return out


def row_tokens(row: dict, schema: DatasetSchema) -> List[str]:
    toks = []
    for f in schema.fields:
        raw = row.get(f.name, MISSING)
        raw = MISSING if raw is None else str(raw)
        toks.append(discretize_numeric(raw) if f.kind == "numeric" else raw.strip())
    return toks


# ---------------------------------------------------------------------------
# vocabularies


@dataclass
class Vocabulary:
    token_to_index: Dict[str, int]
    min_count: int = 1
    oov_index: int = OOV_INDEX

    @property
    def size(self) -> int:
        return len(self.token_to_index) + 1

    def encode(self, token: str) -> int:
        return self.token_to_index.get(token, OOV_INDEX)

    @classmethod
    def from_counts(cls, counts: Counter, min_count: int = 1) -> "Vocabulary":
        if min_count < 1:
            raise ConfigurationError(f"min_count must be >= 1, got {min_count}")
        kept = [(t, c) for t, c in counts.items() if c >= min_count and t != MISSING]
        kept.sort(key=lambda tc: (-tc[1], tc[0]))
        return cls({t: i + 1 for i, (t, _) in enumerate(kept)}, min_count)


def build_vocab(train_rows: Sequence[dict], schema: DatasetSchema, min_count: int = 2) -> Dict[str, Vocabulary]:
    if len(train_rows) == 0:
        raise ConfigurationError("cannot build vocabularies from an empty training split")
    counters = [Counter() for _ in schema.fields]
    for row in train_rows:
        for c, tok in zip(counters, row_tokens(row, schema)):
            c[tok] += 1
    return {f.name: Vocabulary.from_counts(c, min_count) for f, c in zip(schema.fields, counters)}


def save_vocab(vocabs: Dict[str, Vocabulary], path) -> None:
    payload = {name: v.token_to_index for name, v in vocabs.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, sort_keys=False, indent=0)
        fh.write("\n")


def load_vocab(path) -> Dict[str, Vocabulary]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return {name: Vocabulary({t: int(i) for t, i in m.items()}) for name, m in payload.items()}


# ---------------------------------------------------------------------------
# encoded datasets


@dataclass
class EncodedDataset:
    instances: np.ndarray  # [N, f] int64, column i in [0, s_i)
    labels: np.ndarray  # [N] float64 of 0/1
    field_names: List[str]
    vocab_sizes: List[int]

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[1] != len(self.field_names):
            raise ConfigurationError(
                f"instances of shape {self.instances.shape} do not match {len(self.field_names)} fields"
            )
        if len(self.labels) != len(self.instances):
            raise ConfigurationError("labels and instances differ in length")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ConfigurationError("labels must be 0 or 1")
        if len(self.instances) and (
            (self.instances < 0).any() or (self.instances >= np.asarray(self.vocab_sizes)).any()
        ):
            raise ConfigurationError("encoded index out of its field's vocabulary range")
        self.instances.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def field_count(self) -> int:
        return len(self.field_names)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "EncodedDataset":
        return EncodedDataset(self.instances[idx], self.labels[idx], list(self.field_names), list(self.vocab_sizes))

    def save(self, path) -> None:
        np.savez(
            path,
            instances=self.instances,
            labels=self.labels,
            field_names=np.array(self.field_names),
            vocab_sizes=np.array(self.vocab_sizes, dtype=np.int64),
        )

    @classmethod
    def load(cls, path) -> "EncodedDataset":
        with np.load(path) as z:
            return cls(z["instances"], z["labels"], [str(s) for s in z["field_names"]], [int(s) for s in z["vocab_sizes"]])


def parse_label(raw) -> float:
    v = float(raw)
    # libfm-style -1/1 labels are folded onto 0/1
    if v in (0.0, -1.0):
        return 0.0
    if v == 1.0:
        return 1.0
    raise ConfigurationError(f"label {raw!r} is not binary")


def encode_rows(rows: Sequence[dict], schema: DatasetSchema, vocabs: Dict[str, Vocabulary]) -> EncodedDataset:
    f = len(schema.fields)
    inst = np.zeros((len(rows), f), dtype=np.int64)
    labels = np.zeros(len(rows))
    voc = [vocabs[name] for name in schema.names]
    for r, row in enumerate(rows):
        for i, tok in enumerate(row_tokens(row, schema)):
            inst[r, i] = voc[i].encode(tok)
        labels[r] = parse_label(row[schema.label])
    return EncodedDataset(inst, labels, schema.names, [v.size for v in voc])


def read_csv(path, schema: DatasetSchema) -> List[dict]:
    """Read a headered UTF-8 CSV; checks every schema column is present."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigurationError(f"{path}: empty CSV")
        schema.bind(reader.fieldnames)
        rows = list(reader)
    if schema.timestamp_column:
        rows = expand_timestamp_column(rows, schema.timestamp_column)
    return rows


# ---------------------------------------------------------------------------
# splitting and batching


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.7, 0.2, 0.1)
    seed: int = 2023

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigurationError(f"split ratios must be three non-negative numbers: {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigurationError(f"split ratios must sum to 1: {self.ratios}")

    @classmethod
    def parse(cls, text: str, seed: int = 2023) -> "SplitSpec":
        """Parse ``"7:2:1"`` style ratios."""
        parts = [float(p) for p in text.split(":")]
        total = sum(parts)
        return cls(tuple(p / total for p in parts), seed)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple:
    """Validation and test sizes round to nearest; the remainder goes to train."""
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int, spec: SplitSpec) -> tuple:
    sizes = split_sizes(n, spec.ratios)
    if min(sizes) <= 0:
        raise ConfigurationError(f"split {spec.ratios} of {n} rows leaves an empty partition: {sizes}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return perm[:a], perm[a:b], perm[b:]


def split(dataset, spec: SplitSpec):
    """Shuffle with ``spec.seed`` and cut into (train, val, test).

    Works on an :class:`EncodedDataset` or on a plain list of raw rows.
    """
    parts = split_indices(len(dataset), spec)
    if isinstance(dataset, EncodedDataset):
        return tuple(dataset.subset(p) for p in parts)
    return tuple([dataset[i] for i in p] for p in parts)


@dataclass
class Batch:
    indices: np.ndarray  # [B, f]
    labels: np.ndarray  # [B]
    rows: np.ndarray = field(default=None)  # dataset positions

    @property
    def size(self) -> int:
        return len(self.labels)


def batches(dataset: EncodedDataset, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        sel = order[lo : lo + batch_size]
        yield Batch(dataset.instances[sel], dataset.labels[sel], sel)


# ---------------------------------------------------------------------------
# end-to-end preparation


@dataclass
class PreparedData:
    train: EncodedDataset
    val: EncodedDataset
    test: EncodedDataset
    vocabs: Dict[str, Vocabulary]
    schema: DatasetSchema
    split_mode: str  # "ratio" or "presplit"

    @property
    def total_features(self) -> int:
        return sum(v.size for v in self.vocabs.values())

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            getattr(self, name).save(out / f"{name}.npz")
        save_vocab(self.vocabs, out / "vocab.json")
        manifest = {
            "schema": self.schema.to_dict(),
            "split_mode": self.split_mode,
            "sizes": {k: len(getattr(self, k)) for k in ("train", "val", "test")},
            "vocab_sizes": {k: v.size for k, v in self.vocabs.items()},
            "total_features": self.total_features,
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, data_dir) -> "PreparedData":
        d = Path(data_dir)
        if not (d / "manifest.json").exists():
            raise ConfigurationError(f"{d}: no prepared dataset (manifest.json missing)")
        with open(d / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        return cls(
            EncodedDataset.load(d / "train.npz"),
            EncodedDataset.load(d / "val.npz"),
            EncodedDataset.load(d / "test.npz"),
            load_vocab(d / "vocab.json"),
            DatasetSchema.from_dict(manifest["schema"]),
            manifest["split_mode"],
        )


def prepare_rows(rows: List[dict], schema: DatasetSchema, spec: SplitSpec, min_count: int = 2) -> PreparedData:
    train, val, test = split(rows, spec)
    return _encode_splits(train, val, test, schema, min_count, "ratio")


def prepare_presplit(train: List[dict], val: List[dict], test: List[dict], schema: DatasetSchema, min_count: int = 2) -> PreparedData:
    return _encode_splits(train, val, test, schema, min_count, "presplit")


def _encode_splits(train, val, test, schema, min_count, mode) -> PreparedData:
    vocabs = build_vocab(train, schema, min_count)
    return PreparedData(
        encode_rows(train, schema, vocabs),
        encode_rows(val, schema, vocabs),
        encode_rows(test, schema, vocabs),
        vocabs,
        schema,
        mode,
    )
