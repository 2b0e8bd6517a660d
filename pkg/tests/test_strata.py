import itertools
from fractions import Fraction

import numpy as np
import pytest

from stratacast.datamodel import MISSING, Schema, dataset_from_rows
from stratacast.mrf import MrfGraph
from stratacast.query import uniform_exact_probability
from stratacast.strata import (
    AllocationError,
    StrataPartition,
    Stratum,
    allocate,
    approx_min_vertex_cover,
    build_partition,
    classify_stability,
    cover_is_valid,
    draw_fallback_stratified,
    draw_simple_stratified,
    draw_stratified,
    draw_uniform,
    fallback_merge,
    fallback_redistribute,
    largest_remainder_split,
    make_signature,
    split_subsamples,
    unstable_mass,
)


def graph_of(num_nodes, edge_pairs):
    edges = {(j, k): np.zeros((2, 2)) for j, k in edge_pairs}
    return MrfGraph(tuple([2] * num_nodes), edges)


def exact_min_cover_size(num_nodes, edge_pairs):
    """Exhaustive oracle: smallest vertex subset covering every edge."""
    for size in range(num_nodes + 1):
        for subset in itertools.combinations(range(num_nodes), size):
            chosen = set(subset)
            if all(j in chosen or k in chosen for j, k in edge_pairs):
                return size
    return num_nodes


def partition_of(sizes_by_sig, selected=(0, 1, 2)):
    """Fabricate a partition with given signature -> population map."""
    strata = []
    cursor = 0
    for sig, size in sorted(sizes_by_sig.items()):
        strata.append(Stratum(sig, np.arange(cursor, cursor + size)))
        cursor += size
    return StrataPartition(tuple(selected), strata, cursor)


class TestVertexCover:
    def test_edgeless_graph(self):
        assert approx_min_vertex_cover(graph_of(4, [])) == []

    def test_layered_graph_cover_is_valid(self):
        # hub A touching B1..B3, each B touching some C layer below
        edges = [(0, 1), (0, 2), (0, 3), (1, 4), (2, 5), (2, 6), (3, 7)]
        graph = graph_of(8, edges)
        cover = approx_min_vertex_cover(graph)
        assert cover_is_valid(graph, cover)

    def test_random_graphs_within_twice_optimum(self):
        rng = np.random.default_rng(10)
        for _ in range(60):
            num_nodes = int(rng.integers(2, 13))
            pairs = [
                (j, k)
                for j in range(num_nodes)
                for k in range(j + 1, num_nodes)
                if rng.random() < 0.3
            ]
            graph = graph_of(num_nodes, pairs)
            cover = approx_min_vertex_cover(graph)
            assert cover_is_valid(graph, cover)
            assert len(cover) <= 2 * exact_min_cover_size(num_nodes, pairs)

    def test_deterministic(self):
        pairs = [(0, 3), (1, 2), (2, 3), (0, 1)]
        covers = {tuple(approx_min_vertex_cover(graph_of(4, pairs))) for _ in range(5)}
        assert len(covers) == 1


class TestBuildPartition:
    def test_toy_populations(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        part.validate()
        pops = part.populations()
        assert pops[make_signature([(0, 1), (1, 1)])] == 20
        assert pops[make_signature([(0, 1), (1, 2)])] == 10
        assert pops[make_signature([(0, 2), (1, 1)])] == 30
        assert pops[make_signature([(0, 2), (1, 2)])] == 40

    def test_single_feature_constant_column(self):
        schema = Schema((("a", 3),))
        ds = dataset_from_rows(schema, [(2,)] * 7)
        part = build_partition(ds, [0])
        assert len(part.strata) == 1
        assert part.strata[0].population == 7

    def test_missing_value_drops_tag(self):
        schema = Schema((("a", 2), ("b", 2)))
        ds = dataset_from_rows(schema, [(1, 1), (1, MISSING), (1, 2)])
        part = build_partition(ds, [0, 1])
        part.validate()
        pops = part.populations()
        assert pops[make_signature([(0, 1)])] == 1
        assert pops[make_signature([(0, 1), (1, 1)])] == 1


class TestClassifyStability:
    def test_population_above_threshold(self):
        sig_big = make_signature([(0, 1), (1, 1)])
        sig_small = make_signature([(0, 2), (1, 2)])
        part = partition_of({sig_big: 6, sig_small: 94})
        stable, unstable = classify_stability(part, 10)
        assert sig_big in stable  # 6 > 100/20

    def test_single_tag_stratum_is_stable_even_if_tiny(self):
        sig_one = make_signature([(0, 1)])
        sig_rest = make_signature([(0, 2), (1, 2)])
        part = partition_of({sig_one: 1, sig_rest: 99})
        stable, _ = classify_stability(part, 10)
        assert sig_one in stable

    def test_boundary_is_strictly_greater(self):
        sig = make_signature([(0, 1), (1, 1)])
        part = partition_of({sig: 5, make_signature([(0, 2)]): 95})
        stable, unstable = classify_stability(part, 10)
        assert sig in unstable  # 5 > 100/20 is false


class TestFallbackMerge:
    def test_smallest_population_maximal_subset_wins(self):
        p = make_signature([(0, 1), (1, 2)])
        q1 = make_signature([(0, 1)])
        q2 = make_signature([(1, 2)])
        filler = make_signature([(2, 1)])
        part = partition_of({p: 3, q1: 40, q2: 30, filler: 27})
        stable, unstable = classify_stability(part, 10)
        assert p in unstable
        merged = fallback_merge(part, stable, unstable)
        merged.validate()
        pops = merged.populations()
        assert p not in pops
        assert pops[q2] == 33
        assert pops[q1] == 40

    def test_no_unstable_is_identity(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        stable, unstable = classify_stability(part, 10)
        assert not unstable
        merged = fallback_merge(part, stable, unstable)
        assert merged.populations() == part.populations()

    def test_three_feature_toy_destinations_by_hand(self):
        # hand-simulated rule on a 3-feature partition: N=100, n=10,
        # threshold 5.  P1 (3 tags, pop 2) falls into its largest-tag
        # stable subset with smallest population; P2 (2 tags, pop 4) has
        # no stable subset and lands in the global no-tag stratum.
        p1 = make_signature([(0, 1), (1, 1), (2, 1)])
        q_ab = make_signature([(0, 1), (1, 1)])
        q_a = make_signature([(0, 1)])
        p2 = make_signature([(1, 2), (2, 2)])
        filler = make_signature([(2, 3)])
        part = partition_of({p1: 2, q_ab: 10, q_a: 8, p2: 4, filler: 76})
        stable, unstable = classify_stability(part, 10)
        assert unstable == {p1, p2}
        merged = fallback_merge(part, stable, unstable)
        merged.validate()
        pops = merged.populations()
        assert pops[q_ab] == 12  # P1 -> {a,b} (2 tags beats 1 tag)
        assert pops[()] == 4  # P2 -> global fallback
        assert pops[q_a] == 8

    def test_processing_order_and_lexicographic_ties(self):
        # two-tag P with equally small stable subsets: lexicographic pick
        p = make_signature([(0, 1), (1, 1)])
        qa = make_signature([(0, 1)])
        qb = make_signature([(1, 1)])
        filler = make_signature([(2, 9)])
        part = partition_of({p: 2, qa: 30, qb: 30, filler: 38}, selected=(0, 1, 2))
        stable, unstable = classify_stability(part, 10)
        merged = fallback_merge(part, stable, unstable)
        pops = merged.populations()
        assert pops[qa] == 32  # (0,1) sorts before (1,1)
        assert pops[qb] == 30


class TestFallbackRedistribute:
    def test_proportional_split_example(self):
        p = make_signature([(0, 1), (1, 2), (2, 3)])
        c1 = make_signature([(0, 1), (1, 2)])
        c2 = make_signature([(0, 1), (2, 3)])
        filler = make_signature([(0, 9)])
        part = partition_of({p: 6, c1: 10, c2: 20, filler: 964}, selected=(0, 1, 2))
        stable, unstable = classify_stability(part, 60)  # threshold 1000/120
        assert p in unstable and c1 in stable and c2 in stable
        out = fallback_redistribute(part, stable, unstable, 60)
        out.validate()
        pops = out.populations()
        assert p not in pops
        assert pops[c1] == 12  # +6 * 10/30
        assert pops[c2] == 24  # +6 * 20/30
        assert make_signature([(1, 2), (2, 3)]) not in pops

    def test_all_stable_is_identity(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        stable, unstable = classify_stability(part, 10)
        out = fallback_redistribute(part, stable, unstable, 10)
        assert out.populations() == part.populations()

    def test_equal_split_when_all_children_empty(self):
        p = make_signature([(0, 1), (1, 1)])
        filler = make_signature([(2, 1)])
        part = partition_of({p: 4, filler: 996}, selected=(0, 1, 2))
        stable, unstable = classify_stability(part, 50)
        out = fallback_redistribute(part, stable, unstable, 50)
        pops = out.populations()
        assert pops[make_signature([(0, 1)])] == 2
        assert pops[make_signature([(1, 1)])] == 2

    def test_terminates_and_leaves_no_splittable_unstable(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            sizes = {}
            features = [0, 1, 2]
            for _ in range(int(rng.integers(3, 12))):
                tags = [
                    (f, int(rng.integers(1, 4)))
                    for f in features
                    if rng.random() < 0.6
                ]
                try:
                    sig = make_signature(tags)
                except ValueError:
                    continue
                sizes[sig] = sizes.get(sig, 0) + int(rng.integers(1, 40))
            if not sizes:
                continue
            part = partition_of(sizes)
            n = int(rng.integers(1, 20))
            before = unstable_mass(part, n)
            stable, unstable = classify_stability(part, n)
            out = fallback_redistribute(part, stable, unstable, n)
            out.validate()
            after = unstable_mass(out, n)
            if unstable_mass(part, n) > 0 and any(len(s) >= 2 for s in unstable):
                assert after < before
            for s in out.strata:
                from stratacast.strata import is_stable

                if not is_stable(s.signature, s.population, out.total_rows, n):
                    assert len(s.signature) < 2


class TestAllocate:
    def test_toy_allocation(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        alloc = allocate(part, 10)
        by_pop = {part.by_signature()[sig].population: c for sig, c in alloc.items()}
        assert by_pop == {20: 2, 10: 1, 30: 3, 40: 4}

    def test_single_stratum_takes_all(self):
        part = partition_of({make_signature([(0, 1)]): 50}, selected=(0,))
        assert allocate(part, 7) == {make_signature([(0, 1)]): 7}

    def test_largest_remainder_tie_case(self):
        sigs = [make_signature([(0, v)]) for v in (1, 2, 3)]
        part = partition_of(dict(zip(sigs, (3, 3, 4))), selected=(0,))
        alloc = allocate(part, 3)
        assert sorted(alloc.values()) == [1, 1, 1]

    def test_oversized_sample_rejected(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        with pytest.raises(AllocationError):
            allocate(part, 101)

    def test_major_strata_always_get_a_draw(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            m = int(rng.integers(2, 9))
            sizes = [int(rng.integers(1, 500)) for _ in range(m)]
            part = partition_of(
                {make_signature([(0, i + 1)]): s for i, s in enumerate(sizes)},
                selected=(0,),
            )
            total = sum(sizes)
            n = int(rng.integers(m, min(total, 40) + 1))
            alloc = allocate(part, n)
            assert sum(alloc.values()) == n
            for sig, count in alloc.items():
                pop = part.by_signature()[sig].population
                if 2 * n * pop > total:
                    assert count >= 1

    def test_split_helper_sums_exactly(self):
        assert largest_remainder_split(6, [10, 20, 0]) == [2, 4, 0]
        assert largest_remainder_split(4, [0, 0]) == [2, 2]
        assert sum(largest_remainder_split(17, [3, 9, 1, 5])) == 17


class TestDraws:
    def test_full_draw_has_unit_weights(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        alloc = allocate(part, 100)
        sample = draw_stratified(toy_dataset, part, alloc, seed=1)
        assert sample.num_rows == 100
        assert all(s.weight() == 1 for s in sample.strata)

    def test_toy_allocation_weights_are_ten(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        sample = draw_stratified(toy_dataset, part, allocate(part, 10), seed=2)
        assert sample.num_rows == 10
        assert all(s.weight() == 10 for s in sample.strata)

    def test_same_seed_same_sample(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        alloc = allocate(part, 10)
        s1 = draw_stratified(toy_dataset, part, alloc, seed=3)
        s2 = draw_stratified(toy_dataset, part, alloc, seed=3)
        assert np.array_equal(s1.vectors, s2.vectors)
        assert np.array_equal(s1.stratum_ids, s2.stratum_ids)

    def test_uniform_same_seed_deterministic(self, toy_dataset):
        s1 = draw_uniform(toy_dataset, 10, seed=4)
        s2 = draw_uniform(toy_dataset, 10, seed=4)
        assert np.array_equal(s1.vectors, s2.vectors)
        assert s1.method == "uniform"
        assert all(w == 10.0 for w in s1.weights)

    def test_uniform_hits_proportional_composition_rarely(self, toy_dataset):
        # cross-check the empirical rate against the exact calculator
        target = {(1, 1): 2, (1, 2): 1, (2, 1): 3, (2, 2): 4}
        hits = 0
        trials = 2000
        for seed in range(trials):
            sample = draw_uniform(toy_dataset, 10, seed=seed)
            comp: dict[tuple, int] = {}
            for row in sample.vectors:
                comp[tuple(int(v) for v in row)] = comp.get(tuple(int(v) for v in row), 0) + 1
            hits += comp == target
        exact = uniform_exact_probability([10, 20, 30, 40], 10)
        assert abs(hits / trials - exact) < 0.015

    def test_simple_stratified_equals_fallback_when_all_stable(self, toy_dataset):
        simple = draw_simple_stratified(toy_dataset, 10, [0, 1], seed=5)
        full = draw_fallback_stratified(toy_dataset, 10, [0, 1], seed=5)
        assert np.array_equal(simple.vectors, full.vectors)

    def test_simple_and_fallback_differ_on_unstable_strata(self):
        schema = Schema((("a", 2), ("b", 50)))
        rng = np.random.default_rng(14)
        rows = [(1, int(rng.integers(1, 51))) for _ in range(960)]
        rows += [(2, int(rng.integers(1, 51))) for _ in range(40)]
        ds = dataset_from_rows(schema, rows)
        simple = draw_simple_stratified(ds, 20, [0, 1], seed=6)
        full = draw_fallback_stratified(ds, 20, [0, 1], seed=6)
        assert len(simple.strata) != len(full.strata) or not np.array_equal(
            simple.vectors, full.vectors
        )


class TestSplitSubsamples:
    def test_single_node_identity(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        sample = draw_stratified(toy_dataset, part, allocate(part, 10), seed=7)
        subs = split_subsamples(sample, 1, seed=8)
        assert len(subs) == 1
        assert np.array_equal(np.sort(subs[0].vectors, axis=0), np.sort(sample.vectors, axis=0))

    def test_even_stratum_spreads_evenly(self):
        schema = Schema((("a", 2),))
        ds = dataset_from_rows(schema, [(1,)] * 100)
        part = build_partition(ds, [0])
        sample = draw_stratified(ds, part, allocate(part, 10), seed=9)
        subs = split_subsamples(sample, 5, seed=10)
        assert [s.num_rows for s in subs] == [2] * 5

    def test_small_stratum_covers_as_many_nodes_as_rows(self):
        schema = Schema((("a", 2),))
        ds = dataset_from_rows(schema, [(1,)] * 50 + [(2,)] * 2)
        part = build_partition(ds, [0])
        alloc = {make_signature([(0, 1)]): 8, make_signature([(0, 2)]): 2}
        sample = draw_stratified(ds, part, alloc, seed=11)
        subs = split_subsamples(sample, 5, seed=12)
        rare_sid = [s.stratum_id for s in sample.strata if s.population == 2][0]
        holders = [
            sub.node_index
            for sub in subs
            if any(int(x) == rare_sid for x in sub.stratum_ids)
        ]
        assert len(holders) == 2

    def test_disjoint_union_and_weight_mass_conserved(self, toy_dataset):
        part = build_partition(toy_dataset, [0, 1])
        sample = draw_stratified(toy_dataset, part, allocate(part, 10), seed=13)
        subs = split_subsamples(sample, 3, seed=14)
        assert sum(s.num_rows for s in subs) == sample.num_rows
        whole = sample.sample_info()
        merged_counts: dict[int, int] = {}
        total_weight = Fraction(0)
        for sub in subs:
            info = sub.sample_info()
            total_weight += info.total_weight
            for sid, c in info.stratum_counts.items():
                merged_counts[sid] = merged_counts.get(sid, 0) + c
        assert merged_counts == whole.stratum_counts
        assert total_weight == whole.total_weight
