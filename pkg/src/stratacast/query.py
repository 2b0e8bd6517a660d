"""Conjunctive count queries: exact oracle, weighted estimation, the relative
error metric, and calculators for how (un)likely uniform sampling is to land
the proportional sample composition.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .datamodel import Dataset, Schema
from .strata import Sample

Z_95 = 1.96


@dataclass(frozen=True)
class Query:
    """Conjunction of per-feature value sets; absent feature = unconstrained."""

    constraints: tuple[tuple[int, frozenset[int]], ...]

    @classmethod
    def of(cls, mapping: dict[int, Sequence[int]]) -> "Query":
        items = []
        for j, values in sorted(mapping.items()):
            fs = frozenset(int(v) for v in values)
            if not fs:
                raise ValueError(f"feature {j}: empty value set")
            items.append((int(j), fs))
        return cls(tuple(items))

    def as_dict(self) -> dict[int, frozenset[int]]:
        return dict(self.constraints)

    def validate(self, schema: Schema) -> None:
        for j, values in self.constraints:
            if not 0 <= j < schema.num_features:
                raise ValueError(f"feature index {j} out of range")
            m = schema.cardinality(j)
            bad = [v for v in values if not 1 <= v <= m]
            if bad:
                raise ValueError(
                    f"feature {schema.names[j]!r}: values {sorted(bad)} out of range 1..{m}"
                )

    def canonical(self) -> tuple:
        return tuple((j, tuple(sorted(v))) for j, v in self.constraints)


def format_query(query: Query, schema: Schema) -> str:
    parts = []
    for j, values in query.constraints:
        vals = ",".join(str(v) for v in sorted(values))
        parts.append(f"{schema.names[j]} in {{{vals}}}")
    return ", ".join(parts) if parts else "*"


_CLAUSE = re.compile(r"([^,{}\s]+)\s+in\s+\{([^}]*)\}")


def parse_query(text: str, schema: Schema) -> Query:
    """Inverse of :func:`format_query`; '*' or blank means count-all."""
    text = text.strip()
    if text in ("", "*"):
        return Query.of({})
    mapping: dict[int, list[int]] = {}
    tail = text
    for m in _CLAUSE.finditer(text):
        name, body = m.group(1), m.group(2)
        j = schema.index(name)
        if j in mapping:
            raise ValueError(f"feature {name!r} constrained twice")
        mapping[j] = [int(v) for v in body.split(",") if v.strip()]
        tail = tail.replace(m.group(0), "", 1)
    if tail.strip(", \t") or not mapping:
        raise ValueError(f"malformed query text: {text!r}")
    query = Query.of(mapping)
    query.validate(schema)
    return query


@dataclass(frozen=True)
class CountEstimate:
    value: float
    margin: float
    fraction_scanned: float
    rows_matched: int


def _value_lut(values: frozenset[int], cardinality: int) -> np.ndarray:
    lut = np.zeros(cardinality + 1, dtype=bool)  # index 0 = missing, never matches
    lut[list(values)] = True
    return lut


def match_mask(matrix: np.ndarray, query: Query) -> np.ndarray:
    """Boolean match per row of an (n, K) value matrix; missing never matches."""
    mask = np.ones(len(matrix), dtype=bool)
    for j, values in query.constraints:
        col = matrix[:, j]
        size = max(int(col.max(initial=0)), max(values))
        mask &= _value_lut(values, size)[col]
    return mask


def exact_count(dataset: Dataset, query: Query) -> int:
    query.validate(dataset.schema)
    mask: np.ndarray | None = None
    for j, values in query.constraints:
        hit = _value_lut(values, dataset.schema.cardinality(j))[dataset.column(j)]
        mask = hit if mask is None else (mask & hit)
    if mask is None:
        return dataset.num_rows
    return int(mask.sum())


def scan_extrapolation(
    sum_y: float, sum_y_sq: float, rows_scanned: int, rows_total: int
) -> tuple[float, float]:
    """Estimate and variance for a sample total seen through a scan prefix.

    The prefix is a uniform draw of ``rows_scanned`` of ``rows_total`` rows
    (scan order is shuffled at load time), so the classic without-replacement
    estimator applies: the variance carries the (1 - s/R)/s factor and
    therefore vanishes when the scan completes.
    """
    if rows_scanned <= 0:
        return 0.0, 0.0
    estimate = (rows_total / rows_scanned) * sum_y
    if rows_scanned <= 1:
        var_y = 0.0
    else:
        var_y = max(0.0, (sum_y_sq - sum_y * sum_y / rows_scanned) / (rows_scanned - 1))
    variance = rows_total**2 * (1.0 - rows_scanned / rows_total) * var_y / rows_scanned
    return estimate, max(0.0, variance)


def estimate_count(sample: Sample, query: Query) -> CountEstimate:
    """Weighted count over a fully scanned sample.

    The value is assembled from per-stratum matched counts times the exact
    stratum weights, so equal samples give bit-identical estimates however
    their rows are ordered.  A full scan leaves no scan uncertainty, hence
    margin zero; distributed merges add their own inflation terms.
    """
    if sample.num_rows == 0:
        raise ValueError("sample is empty")
    query.validate(sample.schema)
    mask = match_mask(sample.vectors, query)
    matched = sample.stratum_ids[mask]
    weights = sample.weight_table()
    total = Fraction(0)
    for sid, cnt in zip(*np.unique(matched, return_counts=True)):
        total += weights[int(sid)] * int(cnt)
    return CountEstimate(
        value=float(total),
        margin=0.0,
        fraction_scanned=1.0,
        rows_matched=int(mask.sum()),
    )


@dataclass
class ErrorReport:
    per_query: list[float]
    max_error: float
    skipped: list[Query] = field(default_factory=list)


def error_metric(
    dataset: Dataset, sample: Sample, workload: Sequence[Query]
) -> ErrorReport:
    """Relative error |1 - estimate/exact| per query, worst case over the set.

    Queries with an exact count of zero cannot be scored relatively; they are
    excluded and reported.
    """
    errors = []
    skipped = []
    for query in workload:
        truth = exact_count(dataset, query)
        if truth == 0:
            skipped.append(query)
            continue
        estimate = estimate_count(sample, query).value
        errors.append(abs(1.0 - estimate / truth))
    return ErrorReport(errors, max(errors) if errors else 0.0, skipped)


def _round_half_up(q: Fraction) -> int:
    return int(q + Fraction(1, 2)) if q >= 0 else -int(-q + Fraction(1, 2))


def uniform_exact_probability(strata_sizes: Sequence[int], n: int) -> float:
    """Probability that a uniform draw hits the proportional composition.

    Computed with exact big-integer binomials: the product over strata of
    C(N_h, round(n N_h / N)) over C(N, n).
    """
    sizes = [int(s) for s in strata_sizes]
    if any(s < 0 for s in sizes) or not sizes:
        raise ValueError("strata sizes must be non-negative and non-empty")
    total = sum(sizes)
    if not 0 <= n <= total:
        raise ValueError(f"sample size {n} not in [0, {total}]")
    numer = 1
    for size in sizes:
        k = _round_half_up(Fraction(n * size, total))
        if k > size:
            raise ValueError(f"rounded draw {k} exceeds stratum size {size}")
        numer *= math.comb(size, k)
    return float(Fraction(numer, math.comb(total, n)))


def log_uniform_probability_bound(strata_sizes: Sequence[int], n: int) -> float:
    """Natural log of the normal-approximation upper bound on the above."""
    m = len(strata_sizes)
    total = sum(int(s) for s in strata_sizes)
    if n < m:
        raise ValueError(f"bound needs n >= number of strata ({n} < {m})")
    return (
        math.lgamma(total + 1)
        + n * (1.0 - math.log(n))
        - m * 0.5 * math.log(2.0 * math.pi)
        - math.log(n - m + 1)
    )


def uniform_probability_bound(strata_sizes: Sequence[int], n: int) -> float:
    """Upper bound on the exact probability; may overflow to inf for large N."""
    try:
        return math.exp(log_uniform_probability_bound(strata_sizes, n))
    except OverflowError:
        return math.inf


@dataclass
class WorkloadBin:
    target_size: int
    queries: list[Query]
    shortfall: int = 0


def save_workload(
    path: str,
    queries: Sequence[Query],
    schema: Schema,
    exact_counts: Sequence[int] | None = None,
) -> None:
    """One query per line in text form, tab-separated from its exact count."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, query in enumerate(queries):
            line = format_query(query, schema)
            if exact_counts is not None:
                line += f"\t{exact_counts[i]}"
            fh.write(line + "\n")


def load_workload(path: str, schema: Schema) -> list[tuple[Query, int | None]]:
    out: list[tuple[Query, int | None]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            text, _, count = line.partition("\t")
            out.append((parse_query(text, schema), int(count) if count else None))
    return out


def _seed_constraints(
    rng: np.random.Generator,
    schema: Schema,
    frac: float,
    feature_probs: np.ndarray | None = None,
) -> dict[int, set[int]]:
    """Random conjunction sized so its independent-case count is near frac."""
    k = schema.num_features
    nf = int(rng.integers(1, min(3, k) + 1))
    per_feature = min(1.0, max(frac, 1e-9)) ** (1.0 / nf)
    picks: dict[int, set[int]] = {}
    for j in rng.choice(k, size=nf, replace=False, p=feature_probs):
        m = schema.cardinality(int(j))
        want = int(np.clip(round(per_feature * m) + rng.integers(-1, 2), 1, m))
        picks[int(j)] = {int(v) + 1 for v in rng.choice(m, size=want, replace=False)}
    return picks


def _relax_step(
    rng: np.random.Generator,
    schema: Schema,
    picks: dict[int, set[int]],
    too_big: bool,
    feature_probs: np.ndarray | None = None,
) -> bool:
    """Nudge constraints one value toward a smaller (or larger) count."""
    if too_big:
        shrinkable = [j for j, v in picks.items() if len(v) > 1]
        if shrinkable:
            j = int(rng.choice(shrinkable))
            picks[j].discard(int(rng.choice(sorted(picks[j]))))
            return True
        free = [j for j in range(schema.num_features) if j not in picks]
        if free:
            if feature_probs is not None:
                p = feature_probs[free]
                j = int(rng.choice(free, p=p / p.sum()))
            else:
                j = int(rng.choice(free))
            m = schema.cardinality(j)
            picks[j] = {
                int(v) + 1 for v in rng.choice(m, size=max(1, m // 2), replace=False)
            }
            return True
        return False
    growable = [j for j, v in picks.items() if len(v) < schema.cardinality(j)]
    if growable:
        j = int(rng.choice(growable))
        missing = sorted(set(range(1, schema.cardinality(j) + 1)) - picks[j])
        picks[j].add(int(rng.choice(missing)))
        return True
    if picks:
        del picks[int(rng.choice(sorted(picks)))]
        return True
    return False


def generate_workload(
    dataset: Dataset,
    sizes: Sequence[int],
    per_size: int,
    seed: int,
    tolerance: float = 0.25,
    attempt_budget: int = 40,
    probe_rows: int = 50_000,
    feature_weights: Sequence[float] | None = None,
) -> list[WorkloadBin]:
    """Seeded queries whose exact counts land within ±tolerance of each target.

    Each candidate starts as a random conjunction sized for the target
    selectivity, then is tightened or relaxed one value at a time until its
    count lands in the band.  Search steps count against a fixed row probe
    for speed; only in-band candidates pay for a full verification.  The
    attempt budget bounds the search and unmet quotas surface as shortfall
    rather than an error.

    ``feature_weights`` skews which features get constrained, mirroring
    workloads that concentrate on a few key targeting dimensions; default is
    uniform.
    """
    rng = np.random.default_rng(seed)
    schema = dataset.schema
    n_rows = dataset.num_rows
    feature_probs = None
    if feature_weights is not None:
        if len(feature_weights) != schema.num_features:
            raise ValueError("feature_weights must cover every feature")
        feature_probs = np.asarray(feature_weights, dtype=float)
        feature_probs = feature_probs / feature_probs.sum()
    if n_rows > probe_rows:
        probe_idx = np.sort(rng.choice(n_rows, size=probe_rows, replace=False))
        probe = np.stack([dataset.column(j)[probe_idx] for j in range(schema.num_features)], axis=1)
        probe_scale = n_rows / probe_rows
    else:
        probe = np.stack([dataset.column(j) for j in range(schema.num_features)], axis=1)
        probe_scale = 1.0

    def probe_count(query: Query) -> float:
        return float(match_mask(probe, query).sum()) * probe_scale

    bins = []
    for target in sizes:
        lo, hi = target * (1 - tolerance), target * (1 + tolerance)
        chosen: list[Query] = []
        seen: set[tuple] = set()

        def consider(query: Query) -> bool:
            if query.canonical() in seen:
                return False
            if lo <= exact_count(dataset, query) <= hi:
                seen.add(query.canonical())
                chosen.append(query)
                return True
            return False

        if lo <= n_rows <= hi:
            consider(Query.of({}))
        attempts = 0
        while len(chosen) < per_size and attempts < attempt_budget * per_size:
            attempts += 1
            frac = target / max(n_rows, 1)
            picks = _seed_constraints(rng, schema, frac, feature_probs)
            for _ in range(24):
                if not picks:
                    break
                query = Query.of({j: sorted(v) for j, v in picks.items()})
                count = probe_count(query)
                if lo <= count <= hi:
                    consider(query)
                    break
                if not _relax_step(rng, schema, picks, count > hi, feature_probs):
                    break
        bins.append(WorkloadBin(int(target), chosen, per_size - len(chosen)))
    return bins
