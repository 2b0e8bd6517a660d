"""Categorical schema, column-major dataset storage, ingestion, and synthetic data."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

# Encoded feature values are 1..m_j; 0 is the missing marker so unsigned
# column dtypes need no extra headroom.
MISSING = 0

_MAGIC = b"STR1"


class DatasetError(Exception):
    """Raised for malformed input files or out-of-range values."""


def _column_dtype(cardinality: int) -> np.dtype:
    if cardinality <= 0xFF:
        return np.dtype("<u1")
    if cardinality <= 0xFFFF:
        return np.dtype("<u2")
    return np.dtype("<u4")


@dataclass(frozen=True)
class Schema:
    """Ordered categorical features, each with a fixed cardinality.

    Feature j takes values in {1..cardinality_j}; 0 marks a missing value.
    """

    features: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.features:
            raise ValueError("schema needs at least one feature")
        names = [name for name, _ in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        for name, m in self.features:
            if m < 2:
                raise ValueError(f"feature {name!r} needs cardinality >= 2, got {m}")
        object.__setattr__(self, "features", tuple((str(n), int(m)) for n, m in self.features))

    @property
    def num_features(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.features]

    @property
    def cardinalities(self) -> list[int]:
        return [m for _, m in self.features]

    def cardinality(self, j: int) -> int:
        return self.features[j][1]

    def index(self, name: str) -> int:
        for j, (n, _) in enumerate(self.features):
            if n == name:
                return j
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps({"features": [[n, m] for n, m in self.features]})

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        obj = json.loads(text)
        return cls(tuple((n, m) for n, m in obj["features"]))


@dataclass
class Dataset:
    """Immutable column-major store of encoded feature vectors."""

    schema: Schema
    columns: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        if len(self.columns) != self.schema.num_features:
            raise ValueError("column count does not match schema")
        lengths = {len(c) for c in self.columns}
        if len(lengths) > 1:
            raise ValueError("columns have unequal lengths")
        for j, col in enumerate(self.columns):
            m = self.schema.cardinality(j)
            if len(col) and int(col.max(initial=0)) > m:
                raise ValueError(f"column {self.schema.names[j]!r} exceeds cardinality {m}")
            self.columns[j] = np.ascontiguousarray(col, dtype=_column_dtype(m))
        for col in self.columns:
            col.setflags(write=False)

    @property
    def num_rows(self) -> int:
        return len(self.columns[0]) if self.columns else 0

    def column(self, j: int) -> np.ndarray:
        return self.columns[j]

    def row(self, i: int) -> tuple[int, ...]:
        return tuple(int(col[i]) for col in self.columns)

    def iter_rows(self) -> Iterator[tuple[int, ...]]:
        for i in range(self.num_rows):
            yield self.row(i)

    def rows_matrix(self) -> np.ndarray:
        """Row-major view (copies); mainly for tests and small exports."""
        return np.stack(self.columns, axis=1) if self.num_rows else np.empty(
            (0, self.schema.num_features), dtype=np.uint32
        )


def dataset_from_rows(schema: Schema, rows: Iterable[Sequence[int]]) -> Dataset:
    """Build a Dataset from row tuples of encoded values (0 = missing)."""
    mat = list(rows)
    k = schema.num_features
    cols = []
    for j in range(k):
        cols.append(np.array([r[j] for r in mat], dtype=_column_dtype(schema.cardinality(j))))
    return Dataset(schema, cols)


def ingest_csv(path: str, schema: Schema) -> Dataset:
    """Read a header-carrying CSV into a Dataset.

    Cells may be integers 1..m_j or string labels; labels are assigned codes
    in first-seen order.  Empty cells, "?", and labels beyond a feature's
    cardinality become the missing marker.  Integer values outside 1..m_j
    raise a cardinality-overflow error naming the feature.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        if sorted(header) != sorted(schema.names):
            raise DatasetError(
                f"{path}: header {header} does not match schema features {schema.names}"
            )
        order = [header.index(name) for name in schema.names]
        label_maps: list[dict[str, int]] = [{} for _ in schema.features]
        cols: list[list[int]] = [[] for _ in schema.features]
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: row {rownum} has {len(row)} cells, expected {len(header)}"
                )
            for j, src in enumerate(order):
                cell = row[src].strip()
                m = schema.cardinality(j)
                if cell == "" or cell == "?":
                    cols[j].append(MISSING)
                    continue
                try:
                    value = int(cell)
                except ValueError:
                    table = label_maps[j]
                    if cell in table:
                        cols[j].append(table[cell])
                    elif len(table) < m:
                        table[cell] = len(table) + 1
                        cols[j].append(table[cell])
                    else:
                        cols[j].append(MISSING)
                    continue
                if not 1 <= value <= m:
                    raise DatasetError(
                        f"{path}: row {rownum}: value {value} overflows cardinality "
                        f"{m} of feature {schema.names[j]!r}"
                    )
                cols[j].append(value)
    arrays = [
        np.array(col, dtype=_column_dtype(schema.cardinality(j))) for j, col in enumerate(cols)
    ]
    return Dataset(schema, arrays)


def dataset_to_csv(dataset: Dataset, path: str) -> None:
    """Write numeric codes back out; missing values become empty cells."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.schema.names)
        for row in dataset.iter_rows():
            writer.writerow(["" if v == MISSING else v for v in row])


def save_dataset(dataset: Dataset, path: str) -> None:
    """Binary layout: magic, schema block, row count, then raw column blocks."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", dataset.schema.num_features))
        for name, m in dataset.schema.features:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", m))
        fh.write(struct.pack("<Q", dataset.num_rows))
        for col in dataset.columns:
            fh.write(col.astype(col.dtype.newbyteorder("<"), copy=False).tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DatasetError(f"{path}: bad magic, not a dataset file")
        (k,) = struct.unpack("<I", fh.read(4))
        features = []
        for _ in range(k):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (m,) = struct.unpack("<I", fh.read(4))
            features.append((name, m))
        schema = Schema(tuple(features))
        (n,) = struct.unpack("<Q", fh.read(8))
        cols = []
        for j in range(k):
            dtype = _column_dtype(schema.cardinality(j))
            raw = fh.read(n * dtype.itemsize)
            if len(raw) != n * dtype.itemsize:
                raise DatasetError(f"{path}: truncated column block for feature {j}")
            cols.append(np.frombuffer(raw, dtype=dtype).copy())
    return Dataset(schema, cols)


def bucketize(values: Sequence[float], num_buckets: int) -> tuple[np.ndarray, list[float]]:
    """Equal-frequency bucketization of a numeric column.

    Returns codes in 1..num_buckets plus the empirical quantile boundaries;
    value v lands in bucket b when boundaries[b-2] < v <= boundaries[b-1].
    """
    if num_buckets < 2:
        raise ValueError("need at least 2 buckets")
    vals = np.asarray(values, dtype=float)
    if len(np.unique(vals)) < num_buckets:
        raise DatasetError(
            f"only {len(np.unique(vals))} distinct values; "
            f"use fewer than {num_buckets} buckets"
        )
    boundaries = np.quantile(vals, [i / num_buckets for i in range(1, num_buckets)])
    codes = (np.searchsorted(boundaries, vals, side="left") + 1).astype(
        _column_dtype(num_buckets)
    )
    return codes, [float(b) for b in boundaries]


def generate_synthetic(
    schema: Schema,
    edges: Sequence[tuple[int, int, np.ndarray]],
    num_rows: int,
    seed: int,
    sweeps: int = 60,
) -> Dataset:
    """Draw rows from a pairwise potential model via vectorized Gibbs sweeps.

    Each edge (j, k, theta) couples features j and k through an m_j x m_k
    penalty matrix; the conditional of feature j is proportional to
    exp(-sum over incident edges of theta[t, x_k]).  All rows evolve as
    independent chains, so sweeps vectorize across rows.  Isolated features
    are drawn uniformly once and skipped in the sweep loop.
    """
    k = schema.num_features
    neighbors: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(k)]
    for j, kk, theta in edges:
        theta = np.asarray(theta, dtype=float)
        expect = (schema.cardinality(j), schema.cardinality(kk))
        if theta.shape != expect:
            raise ValueError(
                f"edge ({j},{kk}): theta shape {theta.shape} != expected {expect}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError(f"edge ({j},{kk}): theta has non-finite entries")
        neighbors[j].append((kk, theta))
        neighbors[kk].append((j, theta.T))

    rng = np.random.default_rng(seed)
    cols = [
        rng.integers(1, schema.cardinality(j) + 1, size=num_rows).astype(np.int64)
        for j in range(k)
    ]
    coupled = [j for j in range(k) if neighbors[j]]
    # float32 throughout: the sweep loop is memory-bandwidth bound and the
    # sampler needs nothing like double precision.  Neighbors sharing one
    # penalty matrix collapse into a single matmul over value counts.
    grouped: dict[int, list[tuple[np.ndarray, list[int]]]] = {}
    for j in coupled:
        groups: dict[int, tuple[np.ndarray, list[int]]] = {}
        for kk, theta in neighbors[j]:
            key = id(theta)
            if key not in groups:
                groups[key] = (np.ascontiguousarray(theta, dtype=np.float32), [])
            groups[key][1].append(kk)
        grouped[j] = list(groups.values())
    for _ in range(sweeps if coupled and num_rows else 0):
        for j in coupled:
            m = schema.cardinality(j)
            energy = np.zeros((num_rows, m), dtype=np.float32)
            for theta32, ks in grouped[j]:
                if len(ks) == 1:
                    energy += np.take(theta32, cols[ks[0]] - 1, axis=1).T
                else:
                    m_k = theta32.shape[1]
                    counts = np.zeros((m_k, num_rows), dtype=np.float32)
                    for kk in ks:
                        for q in range(m_k):
                            counts[q] += cols[kk] == q + 1
                    energy += (theta32 @ counts).T
            logits = -energy
            logits -= logits.max(axis=1, keepdims=True)
            np.exp(logits, out=logits)
            logits /= logits.sum(axis=1, keepdims=True)
            u = rng.random((num_rows, 1), dtype=np.float32)
            cols[j] = 1 + np.minimum(
                (logits.cumsum(axis=1) < u).sum(axis=1), m - 1
            ).astype(np.int64)

    arrays = [
        cols[j].astype(_column_dtype(schema.cardinality(j))) for j in range(k)
    ]
    return Dataset(schema, arrays)
