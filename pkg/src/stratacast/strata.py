"""Stratification: feature selection, tag-signature partitioning, fuzzy
fall-back, proportional allocation, sample drawing, and per-node splitting.

A stratum is keyed by its signature: the set of (feature, value) tags a row
carries over the selected features.  Missing values simply drop that tag, so
rows with gaps land in coarser strata instead of being rejected.
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .datamodel import MISSING, Dataset, Schema, _column_dtype
from .mrf import MrfGraph

# A tag is a (feature index, value) pair; a signature is a tuple of tags
# sorted by feature index, at most one tag per feature.
Tag = tuple[int, int]
Signature = tuple[Tag, ...]

METHOD_UNIFORM = "uniform"
METHOD_SIMPLE = "simple-stratified"
METHOD_FALLBACK = "fallback-stratified"

_SAMPLE_MAGIC = b"SMP1"


class AllocationError(Exception):
    """Raised when a proportional allocation cannot satisfy its contract."""


def make_signature(tags: Iterable[Tag]) -> Signature:
    out = tuple(sorted((int(f), int(v)) for f, v in tags))
    features = [f for f, _ in out]
    if len(set(features)) != len(features):
        raise ValueError(f"signature has two tags on one feature: {out}")
    return out


@dataclass
class Stratum:
    signature: Signature
    row_ids: np.ndarray

    @property
    def population(self) -> int:
        return len(self.row_ids)


@dataclass
class StrataPartition:
    """Disjoint strata covering every dataset row."""

    selected: tuple[int, ...]
    strata: list[Stratum]
    total_rows: int

    def by_signature(self) -> dict[Signature, Stratum]:
        return {s.signature: s for s in self.strata}

    def populations(self) -> dict[Signature, int]:
        return {s.signature: s.population for s in self.strata}

    def validate(self) -> None:
        seen: set[int] = set()
        total = 0
        for s in self.strata:
            ids = set(int(i) for i in s.row_ids)
            if len(ids) != len(s.row_ids):
                raise ValueError(f"stratum {s.signature} repeats a row id")
            if seen & ids:
                raise ValueError(f"stratum {s.signature} overlaps another stratum")
            seen |= ids
            total += s.population
        if total != self.total_rows:
            raise ValueError(f"populations sum to {total}, expected {self.total_rows}")


@dataclass(frozen=True)
class StratumSpec:
    """Per-stratum sampling record carried with every sample."""

    stratum_id: int
    signature: Signature
    population: int
    drawn: int

    def weight(self) -> Fraction:
        if self.drawn <= 0:
            raise ValueError(f"stratum {self.stratum_id} has no drawn rows")
        return Fraction(self.population, self.drawn)


@dataclass(frozen=True)
class SampleInfo:
    """What an estimator must know to scale results from one sample slice."""

    row_count: int
    stratum_counts: dict[int, int]
    total_weight: Fraction


@dataclass
class Sample:
    """Weighted sample rows plus the strata table the weights derive from."""

    schema: Schema
    vectors: np.ndarray  # (n, K)
    stratum_ids: np.ndarray  # (n,)
    strata: list[StratumSpec]
    total_population: int
    seed: int
    method: str
    node_index: int | None = None  # set on per-node sub-samples
    _weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_rows(self) -> int:
        return len(self.stratum_ids)

    def weight_table(self) -> dict[int, Fraction]:
        return {s.stratum_id: s.weight() for s in self.strata}

    @property
    def weights(self) -> np.ndarray:
        """Float row weights; exact values live in the strata table."""
        if self._weights is None:
            table = {s.stratum_id: float(s.weight()) for s in self.strata}
            self._weights = np.array(
                [table[int(sid)] for sid in self.stratum_ids], dtype=float
            )
        return self._weights

    def sample_info(self) -> SampleInfo:
        counts: dict[int, int] = {}
        for sid in self.stratum_ids:
            counts[int(sid)] = counts.get(int(sid), 0) + 1
        weights = self.weight_table()
        total = sum(
            (weights[sid] * c for sid, c in counts.items()), start=Fraction(0)
        )
        return SampleInfo(self.num_rows, dict(sorted(counts.items())), total)


def approx_min_vertex_cover(graph: MrfGraph) -> list[int]:
    """Maximal-matching 2-approximation, edges taken in canonical order."""
    cover: set[int] = set()
    for j, k in graph.edge_list():
        if j not in cover and k not in cover:
            cover.add(j)
            cover.add(k)
    return sorted(cover)


def cover_is_valid(graph: MrfGraph, cover: Sequence[int]) -> bool:
    chosen = set(cover)
    return all(j in chosen or k in chosen for j, k in graph.edges)


def build_partition(dataset: Dataset, selected: Sequence[int]) -> StrataPartition:
    """Group rows by their tag signature over the selected features.

    A missing value contributes no tag, so such rows fall into the stratum
    keyed by their remaining tags.  Only non-empty strata materialize.
    """
    if not selected:
        raise ValueError("selected feature list must be non-empty")
    selected = tuple(sorted(int(j) for j in selected))
    for j in selected:
        if not 0 <= j < dataset.schema.num_features:
            raise ValueError(f"selected feature {j} out of range")
    key = np.stack([dataset.column(j).astype(np.int64) for j in selected], axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq)))
    strata = []
    for g in range(len(uniq)):
        lo = bounds[g]
        hi = bounds[g + 1] if g + 1 < len(uniq) else len(inverse)
        sig = make_signature(
            (selected[i], int(v)) for i, v in enumerate(uniq[g]) if v != MISSING
        )
        strata.append(Stratum(sig, np.sort(order[lo:hi])))
    strata.sort(key=lambda s: s.signature)
    return StrataPartition(selected, strata, dataset.num_rows)


def is_stable(signature: Signature, population: int, total_rows: int, n: int) -> bool:
    """Population strictly above total/(2n), or a single-tag signature."""
    return 2 * n * population > total_rows or len(signature) == 1


def classify_stability(
    partition: StrataPartition, n: int
) -> tuple[set[Signature], set[Signature]]:
    if n < 1:
        raise ValueError("sample size must be at least 1")
    stable: set[Signature] = set()
    unstable: set[Signature] = set()
    for s in partition.strata:
        if is_stable(s.signature, s.population, partition.total_rows, n):
            stable.add(s.signature)
        else:
            unstable.add(s.signature)
    return stable, unstable


def fallback_merge(
    partition: StrataPartition,
    stable: set[Signature],
    unstable: set[Signature],
) -> StrataPartition:
    """Merge each unstable stratum into its best stable sub-signature stratum.

    Unstable strata are processed from most to fewest tags (ties by
    signature).  The destination is the stable stratum whose tag set is a
    strict subset of the source's with the most tags, smallest population
    first; with no stable subset the rows land in the global no-tag stratum.
    """
    strata = {s.signature: np.array(s.row_ids) for s in partition.strata}
    stable_now = set(stable)
    for psig in sorted(unstable, key=lambda sig: (-len(sig), sig)):
        rows = strata.pop(psig)
        pset = set(psig)
        candidates = [
            q for q in stable_now if q in strata and set(q) < pset
        ]
        if candidates:
            best_len = max(len(q) for q in candidates)
            pool = [q for q in candidates if len(q) == best_len]
            pool.sort(key=lambda q: (len(strata[q]), q))
            target = pool[0]
        else:
            target = ()
            if target not in strata:
                strata[target] = np.array([], dtype=rows.dtype)
        strata[target] = np.sort(np.concatenate([strata[target], rows]))
    merged = [Stratum(sig, ids) for sig, ids in strata.items() if len(ids)]
    merged.sort(key=lambda s: s.signature)
    return StrataPartition(partition.selected, merged, partition.total_rows)


def unstable_mass(partition: StrataPartition, n: int) -> int:
    """Well-founded measure for the redistribution loop (strictly decreasing)."""
    base = len(partition.selected) + 2
    return sum(
        base ** len(s.signature)
        for s in partition.strata
        if not is_stable(s.signature, s.population, partition.total_rows, n)
    )


def fallback_redistribute(
    partition: StrataPartition,
    stable: set[Signature],
    unstable: set[Signature],
    n: int,
) -> StrataPartition:
    """Push unstable strata down into their one-fewer-tag children.

    Repeatedly takes the unstable stratum with the most tags (ties by
    signature) and deals its rows to the child signatures obtained by
    removing one tag, proportional to current child populations (largest
    remainder; equal shares when all children are empty).  Stability is
    re-evaluated every round; stops when no unstable stratum has a subset.
    """
    del stable, unstable  # membership is recomputed each round
    strata: dict[Signature, list[np.ndarray]] = {
        s.signature: [np.array(s.row_ids)] for s in partition.strata
    }
    sizes_now = {sig: len(chunks[0]) for sig, chunks in strata.items()}
    total = partition.total_rows

    def splittable(sig: Signature) -> bool:
        return (
            sig in strata
            and len(sig) >= 2
            and not is_stable(sig, sizes_now[sig], total, n)
        )

    # lazy max-heap on (tag count, signature); stale entries are re-checked
    heap = [(-len(sig), sig) for sig in strata if splittable(sig)]
    heapq.heapify(heap)
    while heap:
        _, psig = heapq.heappop(heap)
        if not splittable(psig):
            continue
        rows = np.concatenate(strata.pop(psig))
        sizes_now.pop(psig)
        children = sorted(
            make_signature(t for t in psig if t != dropped) for dropped in psig
        )
        shares = largest_remainder_split(
            len(rows), [sizes_now.get(c, 0) for c in children]
        )
        cursor = 0
        for child, share in zip(children, shares):
            if share == 0:
                continue
            chunk = rows[cursor : cursor + share]
            cursor += share
            if child in strata:
                strata[child].append(chunk)
                sizes_now[child] += share
            else:
                strata[child] = [chunk]
                sizes_now[child] = share
            if splittable(child):
                heapq.heappush(heap, (-len(child), child))
    result = [
        Stratum(sig, np.sort(np.concatenate(chunks)))
        for sig, chunks in strata.items()
        if sizes_now[sig]
    ]
    result.sort(key=lambda s: s.signature)
    return StrataPartition(partition.selected, result, partition.total_rows)


def largest_remainder_split(total: int, sizes: Sequence[int]) -> list[int]:
    """Split ``total`` proportionally to ``sizes``; shares sum exactly.

    All-zero sizes degrade to equal shares.
    """
    if not sizes:
        raise ValueError("nothing to split over")
    denom = sum(sizes)
    if denom == 0:
        sizes = [1] * len(sizes)
        denom = len(sizes)
    quotas = [Fraction(total * s, denom) for s in sizes]
    shares = [int(q) for q in quotas]
    leftovers = total - sum(shares)
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - shares[i]), i))
    for i in order[:leftovers]:
        shares[i] += 1
    return shares


def allocate(partition: StrataPartition, n: int) -> dict[Signature, int]:
    """Proportional per-stratum sample counts summing exactly to n.

    Largest-remainder rounding, then a repair pass guaranteeing at least one
    draw for every stratum whose population exceeds total/(2n).
    """
    total = partition.total_rows
    if n > total:
        raise AllocationError(f"sample size {n} exceeds population {total}")
    if n < 1:
        raise AllocationError("sample size must be at least 1")
    strata = sorted(partition.strata, key=lambda s: s.signature)
    quotas = [Fraction(n * s.population, total) for s in strata]
    counts = [int(q) for q in quotas]
    leftovers = n - sum(counts)
    order = sorted(
        range(len(strata)),
        key=lambda i: (-(quotas[i] - counts[i]), strata[i].signature),
    )
    for i in order[:leftovers]:
        counts[i] += 1

    required = [i for i, q in enumerate(quotas) if q > Fraction(1, 2)]
    if len(required) > n:
        raise AllocationError(
            f"{len(required)} strata require a draw but only {n} slots exist"
        )
    needy = [i for i in required if counts[i] == 0]
    required_set = set(required)
    while needy:
        donors = [
            i
            for i in range(len(strata))
            if counts[i] >= 2 or (counts[i] == 1 and i not in required_set)
        ]
        donors.sort(key=lambda i: (-counts[i], strata[i].signature))
        donor = donors[0]
        counts[donor] -= 1
        counts[needy.pop(0)] += 1
    return {s.signature: c for s, c in zip(strata, counts)}


def _gather_rows(dataset: Dataset, row_ids: np.ndarray) -> np.ndarray:
    cols = [dataset.column(j)[row_ids] for j in range(dataset.schema.num_features)]
    return np.stack(cols, axis=1)


def _assemble_sample(
    dataset: Dataset,
    picks: list[tuple[Signature, int, np.ndarray]],
    seed: int,
    method: str,
) -> Sample:
    specs = []
    chunks = []
    sid_chunks = []
    for sid, (sig, population, ids) in enumerate(picks):
        specs.append(StratumSpec(sid, sig, population, len(ids)))
        chunks.append(_gather_rows(dataset, ids))
        sid_chunks.append(np.full(len(ids), sid, dtype=np.int32))
    vectors = (
        np.concatenate(chunks)
        if chunks
        else np.empty((0, dataset.schema.num_features), dtype=np.uint8)
    )
    sids = np.concatenate(sid_chunks) if sid_chunks else np.empty(0, dtype=np.int32)
    return Sample(
        schema=dataset.schema,
        vectors=vectors,
        stratum_ids=sids,
        strata=specs,
        total_population=dataset.num_rows,
        seed=seed,
        method=method,
    )


def draw_stratified(
    dataset: Dataset,
    partition: StrataPartition,
    allocation: dict[Signature, int],
    seed: int,
    method: str = METHOD_FALLBACK,
) -> Sample:
    """Draw allocation[h] rows uniformly without replacement per stratum."""
    rng = np.random.default_rng(seed)
    by_sig = partition.by_signature()
    unknown = set(allocation) - set(by_sig)
    if unknown:
        raise ValueError(f"allocation names absent strata: {sorted(unknown)}")
    picks = []
    for sig in sorted(by_sig):
        n_h = allocation.get(sig, 0)
        stratum = by_sig[sig]
        if n_h > stratum.population:
            raise ValueError(
                f"stratum {sig}: cannot draw {n_h} of {stratum.population} rows"
            )
        if n_h == 0:
            continue
        ids = np.sort(rng.choice(stratum.row_ids, size=n_h, replace=False))
        picks.append((sig, stratum.population, ids))
    return _assemble_sample(dataset, picks, seed, method)


def draw_uniform(dataset: Dataset, n: int, seed: int) -> Sample:
    """Simple random sample without replacement; every weight is N/n."""
    total = dataset.num_rows
    if n > total:
        raise AllocationError(f"sample size {n} exceeds population {total}")
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(total, size=n, replace=False))
    return _assemble_sample(dataset, [((), total, ids)], seed, METHOD_UNIFORM)


def draw_simple_stratified(
    dataset: Dataset, n: int, selected: Sequence[int], seed: int
) -> Sample:
    """Stratified draw on the raw partition, skipping both fall-back steps."""
    partition = build_partition(dataset, selected)
    allocation = allocate(partition, n)
    return draw_stratified(dataset, partition, allocation, seed, METHOD_SIMPLE)


def draw_fallback_stratified(
    dataset: Dataset,
    n: int,
    selected: Sequence[int],
    seed: int,
    algorithm: str = "merge",
) -> Sample:
    """Full pipeline: partition, stabilize via fall-back, allocate, draw."""
    partition = build_partition(dataset, selected)
    stable, unstable = classify_stability(partition, n)
    if algorithm == "merge":
        partition = fallback_merge(partition, stable, unstable)
    elif algorithm == "redistribute":
        partition = fallback_redistribute(partition, stable, unstable, n)
    else:
        raise ValueError(f"unknown fall-back algorithm {algorithm!r}")
    allocation = allocate(partition, n)
    return draw_stratified(dataset, partition, allocation, seed, METHOD_FALLBACK)


def split_subsamples(sample: Sample, k: int, seed: int) -> list[Sample]:
    """Deal each stratum's rows round-robin into k disjoint sub-samples.

    Every stratum with at least k rows appears in all k sub-samples; smaller
    strata cover as many nodes as they have rows (duplication would skew the
    weights, so best-effort coverage is the rule).
    """
    if k < 1:
        raise ValueError("need at least one node")
    rng = np.random.default_rng(seed)
    assignments: list[list[int]] = [[] for _ in range(k)]
    for spec in sample.strata:
        rows = np.flatnonzero(sample.stratum_ids == spec.stratum_id)
        rng.shuffle(rows)
        start = spec.stratum_id % k
        for i, row in enumerate(rows):
            assignments[(start + i) % k].append(int(row))
    out = []
    for node, rows in enumerate(assignments):
        idx = np.array(sorted(rows), dtype=np.int64)
        present = {int(s) for s in sample.stratum_ids[idx]}
        out.append(
            Sample(
                schema=sample.schema,
                vectors=sample.vectors[idx] if len(idx) else sample.vectors[:0],
                stratum_ids=sample.stratum_ids[idx]
                if len(idx)
                else sample.stratum_ids[:0],
                strata=[s for s in sample.strata if s.stratum_id in present],
                total_population=sample.total_population,
                seed=sample.seed,
                method=sample.method,
                node_index=node,
            )
        )
    return out


def save_sample(sample: Sample, path: str) -> None:
    """SMP1 file: magic, JSON header, then (stratum id, vector) row records."""
    header = {
        "schema": [[n, m] for n, m in sample.schema.features],
        "total_population": sample.total_population,
        "num_rows": sample.num_rows,
        "seed": sample.seed,
        "method": sample.method,
        "node_index": sample.node_index,
        "strata": [
            {
                "id": s.stratum_id,
                "signature": [list(t) for t in s.signature],
                "population": s.population,
                "drawn": s.drawn,
            }
            for s in sample.strata
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        widths = [_column_dtype(m) for _, m in sample.schema.features]
        for i in range(sample.num_rows):
            fh.write(struct.pack("<I", int(sample.stratum_ids[i])))
            for j, dtype in enumerate(widths):
                fh.write(int(sample.vectors[i, j]).to_bytes(dtype.itemsize, "little"))


def load_sample(path: str) -> Sample:
    with open(path, "rb") as fh:
        if fh.read(4) != _SAMPLE_MAGIC:
            raise ValueError(f"{path}: bad magic, not a sample file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        schema = Schema(tuple((n, m) for n, m in header["schema"]))
        n = header["num_rows"]
        widths = [_column_dtype(m) for _, m in schema.features]
        vectors = np.zeros((n, schema.num_features), dtype=np.uint32)
        sids = np.zeros(n, dtype=np.int32)
        for i in range(n):
            (sids[i],) = struct.unpack("<I", fh.read(4))
            for j, dtype in enumerate(widths):
                vectors[i, j] = int.from_bytes(fh.read(dtype.itemsize), "little")
    strata = [
        StratumSpec(
            s["id"],
            make_signature((f, v) for f, v in s["signature"]),
            s["population"],
            s["drawn"],
        )
        for s in header["strata"]
    ]
    return Sample(
        schema=schema,
        vectors=vectors,
        stratum_ids=sids,
        strata=strata,
        total_population=header["total_population"],
        seed=header["seed"],
        method=header["method"],
        node_index=header.get("node_index"),
    )
