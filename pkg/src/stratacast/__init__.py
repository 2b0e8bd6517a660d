"""Audience-count forecasting over categorical data.

Builds an MRF-guided stratified sample of a large categorical dataset and
answers conjunctive count queries against it, either locally or through a
distributed counter/aggregator cluster with progressive partial results.
"""

from .datamodel import (
    MISSING,
    Dataset,
    DatasetError,
    Schema,
    bucketize,
    dataset_from_rows,
    generate_synthetic,
    ingest_csv,
    load_dataset,
    save_dataset,
)
from .mrf import MrfGraph, conditional_distribution, edge_summaries, learn_structure
from .query import (
    CountEstimate,
    Query,
    error_metric,
    estimate_count,
    exact_count,
    generate_workload,
    uniform_exact_probability,
    uniform_probability_bound,
)
from .strata import (
    Sample,
    SampleInfo,
    StrataPartition,
    allocate,
    approx_min_vertex_cover,
    build_partition,
    classify_stability,
    draw_fallback_stratified,
    draw_simple_stratified,
    draw_stratified,
    draw_uniform,
    fallback_merge,
    fallback_redistribute,
    load_sample,
    save_sample,
    split_subsamples,
)

__version__ = "0.1.0"
