import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from stratacast.datamodel import Schema, dataset_from_rows, generate_synthetic
from stratacast.query import (
    Query,
    error_metric,
    estimate_count,
    exact_count,
    format_query,
    generate_workload,
    log_uniform_probability_bound,
    parse_query,
    uniform_exact_probability,
    uniform_probability_bound,
)
from stratacast.strata import (
    Sample,
    StratumSpec,
    allocate,
    build_partition,
    draw_stratified,
    draw_uniform,
    make_signature,
)


def brute_force_count(dataset, query):
    """Row-at-a-time scan oracle, no vectorization shared with the library."""
    wanted = query.as_dict()
    hits = 0
    for row in dataset.iter_rows():
        if all(row[j] in values for j, values in wanted.items()):
            hits += 1
    return hits


class TestQueryForm:
    def test_parse_and_format_roundtrip(self, toy_schema):
        q = Query.of({0: [1], 1: [1, 2]})
        text = format_query(q, toy_schema)
        assert text == "color in {1}, device in {1,2}"
        assert parse_query(text, toy_schema) == q

    def test_count_all_form(self, toy_schema):
        assert parse_query("*", toy_schema) == Query.of({})

    def test_malformed_text_rejected(self, toy_schema):
        with pytest.raises(ValueError):
            parse_query("color = 1", toy_schema)

    def test_out_of_range_value_rejected(self, toy_schema):
        with pytest.raises(ValueError, match="out of range"):
            parse_query("color in {9}", toy_schema)


class TestExactCount:
    def test_empty_query_counts_all(self, toy_dataset):
        assert exact_count(toy_dataset, Query.of({})) == 100

    def test_toy_point_query(self, toy_dataset):
        assert exact_count(toy_dataset, Query.of({0: [1], 1: [1]})) == 20

    def test_matches_row_scan_oracle(self):
        schema = Schema((("a", 3), ("b", 4), ("c", 2)))
        ds = generate_synthetic(schema, [], 500, seed=20)
        rng = np.random.default_rng(21)
        for _ in range(25):
            constraints = {}
            for j in range(3):
                if rng.random() < 0.6:
                    m = schema.cardinality(j)
                    count = int(rng.integers(1, m + 1))
                    constraints[j] = list(rng.choice(m, size=count, replace=False) + 1)
            q = Query.of(constraints)
            assert exact_count(ds, q) == brute_force_count(ds, q)

    def test_adding_constraints_never_increases(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        sample = draw_stratified(toy_dataset, part, allocate(part, 20), seed=31)
        rng = np.random.default_rng(32)
        for _ in range(40):
            j = int(rng.integers(2))
            other = 1 - j
            base = Query.of({j: [int(rng.integers(1, 3))]})
            tighter = Query.of({**base.as_dict(), other: [int(rng.integers(1, 3))]})
            assert exact_count(toy_dataset, tighter) <= exact_count(toy_dataset, base)
            assert (
                estimate_count(sample, tighter).value
                <= estimate_count(sample, base).value
            )


class TestEstimateCount:
    def test_accurate_sample_recovers_truth_exactly(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        sample = draw_stratified(toy_dataset, part, allocate(part, 10), seed=22)
        est = estimate_count(sample, Query.of({0: [1], 1: [1]}))
        assert est.value == 20.0
        assert est.rows_matched == 2
        assert est.fraction_scanned == 1.0

    def test_full_sample_equals_exact_with_zero_margin(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        sample = draw_stratified(toy_dataset, part, allocate(part, 100), seed=23)
        for values in itertools.product([1, 2], repeat=2):
            q = Query.of({0: [values[0]], 1: [values[1]]})
            est = estimate_count(sample, q)
            assert est.value == exact_count(toy_dataset, q)
            assert est.margin == 0.0

    def test_uniform_sample_can_misestimate_the_toy(self, toy_dataset):
        truth = exact_count(toy_dataset, Query.of({0: [1], 1: [1]}))
        off = [
            seed
            for seed in range(40)
            if estimate_count(
                draw_uniform(toy_dataset, 10, seed=seed), Query.of({0: [1], 1: [1]})
            ).value
            != truth
        ]
        assert off, "every uniform draw hit the exact composition (improbable)"

    def test_unbiased_over_many_stratified_draws(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        alloc = allocate(part, 10)
        q = Query.of({1: [2]})
        truth = exact_count(toy_dataset, q)
        values = [
            estimate_count(
                draw_stratified(toy_dataset, part, alloc, seed=s), q
            ).value
            for s in range(2000)
        ]
        mean = float(np.mean(values))
        stderr = float(np.std(values) / math.sqrt(len(values))) or 1e-9
        assert abs(mean - truth) <= 3 * stderr


class TestErrorMetric:
    def test_perfect_sample_scores_zero(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        sample = draw_stratified(toy_dataset, part, allocate(part, 10), seed=24)
        workload = [
            Query.of({0: [a], 1: [b]}) for a, b in itertools.product([1, 2], repeat=2)
        ]
        report = error_metric(toy_dataset, sample, workload)
        assert report.per_query == [0.0] * 4
        assert report.max_error == 0.0

    def test_skewed_sample_matches_hand_computation(self, toy_dataset):
        # fabricate the inaccurate uniform draw: compositions 4/0/2/4
        rows = (
            [(1, 1)] * 4 + [(2, 1)] * 2 + [(2, 2)] * 4
        )
        sample = Sample(
            schema=toy_dataset.schema,
            vectors=np.array(rows, dtype=np.uint8),
            stratum_ids=np.zeros(10, dtype=np.int32),
            strata=[StratumSpec(0, (), 100, 10)],
            total_population=100,
            seed=0,
            method="uniform",
        )
        workload = [
            Query.of({0: [1], 1: [1]}),  # est 40 vs 20 -> 1.0
            Query.of({0: [1], 1: [2]}),  # est 0 vs 10 -> 1.0
            Query.of({0: [2], 1: [1]}),  # est 20 vs 30 -> 1/3
            Query.of({0: [2], 1: [2]}),  # est 40 vs 40 -> 0
        ]
        report = error_metric(toy_dataset, sample, workload)
        assert report.per_query == pytest.approx([1.0, 1.0, 1.0 / 3.0, 0.0])
        assert report.max_error == pytest.approx(1.0)

    def test_error_can_exceed_one_on_gross_overestimate(self, toy_dataset):
        rows = [(1, 2)] * 10  # every sampled row from the 10-row cell
        sample = Sample(
            schema=toy_dataset.schema,
            vectors=np.array(rows, dtype=np.uint8),
            stratum_ids=np.zeros(10, dtype=np.int32),
            strata=[StratumSpec(0, (), 100, 10)],
            total_population=100,
            seed=0,
            method="uniform",
        )
        report = error_metric(toy_dataset, sample, [Query.of({0: [1], 1: [2]})])
        assert report.per_query[0] == pytest.approx(9.0)

    def test_zero_truth_queries_are_reported_not_scored(self, toy_dataset):
        schema = Schema((("a", 3),))
        ds = dataset_from_rows(schema, [(1,)] * 10)
        part = build_partition(ds, [0])
        sample = draw_stratified(ds, part, allocate(part, 5), seed=1)
        report = error_metric(ds, sample, [Query.of({0: [2]})])
        assert report.per_query == []
        assert len(report.skipped) == 1


class TestUniformExactProbability:
    def test_toy_value_rounds_to_the_published_figure(self):
        p = uniform_exact_probability([10, 20, 30, 40], 10)
        assert round(p, 2) == 0.04

    def test_single_stratum_is_certain(self):
        assert uniform_exact_probability([60], 7) == 1.0

    def test_matches_exhaustive_enumeration_small_case(self):
        # N=6 split {2,4}, n=3: enumerate all 20 draws directly
        labels = [0, 0, 1, 1, 1, 1]
        want = {0: 1, 1: 2}
        hits = sum(
            1
            for combo in itertools.combinations(range(6), 3)
            if {g: sum(labels[i] == g for i in combo) for g in (0, 1)} == want
        )
        exact = uniform_exact_probability([2, 4], 3)
        assert Fraction(exact).limit_denominator(100) == Fraction(hits, 20)

    def test_random_small_cases_match_enumeration(self):
        rng = np.random.default_rng(25)
        checked = 0
        for _ in range(60):
            m = int(rng.integers(1, 4))
            sizes = [int(rng.integers(1, 5)) for _ in range(m)]
            total = sum(sizes)
            if total > 12:
                continue
            n = int(rng.integers(1, total + 1))
            want = {
                g: int(Fraction(n * sizes[g], total) + Fraction(1, 2))
                for g in range(m)
            }
            if sum(want.values()) != n:
                # the formula is only a draw probability when the rounded
                # composition is itself a feasible n-row draw
                continue
            checked += 1
            labels = [g for g, s in enumerate(sizes) for _ in range(s)]
            hits = sum(
                1
                for combo in itertools.combinations(range(total), n)
                if {g: sum(labels[i] == g for i in combo) for g in range(m)} == want
            )
            expected = hits / math.comb(total, n)
            got = uniform_exact_probability(sizes, n)
            assert got == pytest.approx(expected, abs=1e-12)
            assert 0.0 < got <= 1.0
        assert checked >= 10


class TestUniformProbabilityBound:
    def test_dominates_exact_on_toy(self):
        exact = uniform_exact_probability([10, 20, 30, 40], 10)
        bound = uniform_probability_bound([10, 20, 30, 40], 10)
        assert bound >= exact > 0.0
        assert math.isfinite(bound)

    def test_vanishes_as_strata_multiply(self):
        # fixed population and sample size, subdivided into ever more strata
        n = 24
        prev = math.inf
        for m in (2, 3, 4, 6, 8, 12, 16, 24):
            sizes = [48 // m] * m
            b = uniform_probability_bound(sizes, n)
            assert b < prev
            prev = b

    def test_log_space_matches_direct_arithmetic_at_tiny_sizes(self):
        for sizes, n in ([[4, 6], 4], [[3, 3, 3], 5], [[10, 10], 6]):
            m = len(sizes)
            total = sum(sizes)
            direct = (
                math.factorial(total)
                * (math.e / n) ** n
                / ((math.sqrt(2 * math.pi)) ** m * (n - m + 1))
            )
            via_log = math.exp(log_uniform_probability_bound(sizes, n))
            assert via_log == pytest.approx(direct, rel=1e-9)

    def test_requires_enough_draws(self):
        with pytest.raises(ValueError):
            uniform_probability_bound([5, 5, 5], 2)


class TestGenerateWorkload:
    def test_empty_constraint_hits_full_size(self, toy_dataset):
        bins = generate_workload(toy_dataset, [100], per_size=1, seed=1)
        assert bins[0].queries[0] == Query.of({})
        assert bins[0].shortfall == 0

    def test_single_tag_queries_hit_tag_sizes(self, toy_dataset):
        # tag histogram oracle: feature 0 value 1 covers 30 rows
        bins = generate_workload(toy_dataset, [30], per_size=3, seed=2)
        for q in bins[0].queries:
            assert 22.5 <= exact_count(toy_dataset, q) <= 37.5

    def test_deterministic_per_seed(self):
        schema = Schema((("a", 6), ("b", 5), ("c", 4)))
        ds = generate_synthetic(schema, [], 2000, seed=26)
        b1 = generate_workload(ds, [200, 600], per_size=5, seed=3)
        b2 = generate_workload(ds, [200, 600], per_size=5, seed=3)
        assert [q.canonical() for b in b1 for q in b.queries] == [
            q.canonical() for b in b2 for q in b.queries
        ]

    def test_budget_bounds_the_search_and_reports_shortfall(self):
        schema = Schema((("a", 2),))
        ds = dataset_from_rows(schema, [(1,)] * 10)
        bins = generate_workload(ds, [3], per_size=4, seed=4, attempt_budget=10)
        assert bins[0].shortfall >= 3  # only one distinct query can hit ~3
