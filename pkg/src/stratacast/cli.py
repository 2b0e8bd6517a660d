"""Operator entry points: data generation, offline sample building, querying,
node servers, and the benchmark suites.

Every command prints a JSON metadata object carrying its fully resolved
configuration next to its outputs, so runs are reproducible from logs alone.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import time

import numpy as np

from . import __version__
from .aggregator import AggregatorConfig, AggregatorNode, HttpGateway
from .coordinator import CoordinatorConfig, CoordinatorNode
from .counter import CounterConfig, CounterNode
from .datamodel import (
    Schema,
    dataset_to_csv,
    generate_synthetic,
    ingest_csv,
    load_dataset,
    save_dataset,
)
from .harness import (
    SimConfig,
    experiment_distributed_overhead,
    experiment_error_ratio,
    experiment_fetch_interval,
)
from .mrf import learn_structure, load_graph, save_graph
from .query import estimate_count, exact_count, parse_query
from .runtime import TcpRuntime
from .strata import (
    allocate,
    approx_min_vertex_cover,
    build_partition,
    classify_stability,
    draw_stratified,
    fallback_merge,
    fallback_redistribute,
    load_sample,
    save_sample,
    split_subsamples,
)
from . import wire


def _parse_schema(spec: str) -> Schema:
    features = []
    for part in spec.split(","):
        name, _, card = part.strip().partition(":")
        if not card:
            raise SystemExit(f"schema entry {part!r} must look like name:cardinality")
        features.append((name, int(card)))
    return Schema(tuple(features))


def _coupling_matrix(m_j: int, m_k: int, strength: float) -> np.ndarray:
    """Attractive coupling: values agreeing modulo the smaller cardinality."""
    m = min(m_j, m_k)
    theta = np.full((m_j, m_k), strength)
    for t in range(m_j):
        for q in range(m_k):
            if t % m == q % m:
                theta[t, q] = 0.0
    return theta


def _emit(meta: dict) -> None:
    print(json.dumps(meta, sort_keys=True, default=str))


def cmd_gen_data(args) -> int:
    schema = _parse_schema(args.schema)
    edges = []
    for spec in args.couple or []:
        a, b, strength = spec.split(":")
        j, k = schema.index(a), schema.index(b)
        if j > k:
            j, k = k, j
        edges.append((j, k, _coupling_matrix(schema.cardinality(j), schema.cardinality(k), float(strength))))
    if args.edges:
        with open(args.edges, encoding="utf-8") as fh:
            for e in json.load(fh):
                edges.append((e["j"], e["k"], np.array(e["theta"], dtype=float)))
    dataset = generate_synthetic(schema, edges, args.rows, seed=args.seed, sweeps=args.sweeps)
    if args.csv:
        dataset_to_csv(dataset, args.out)
    else:
        save_dataset(dataset, args.out)
    _emit(
        {
            "command": "gen-data",
            "out": args.out,
            "rows": dataset.num_rows,
            "schema": args.schema,
            "seed": args.seed,
            "sweeps": args.sweeps,
            "couple": args.couple or [],
        }
    )
    return 0


def _load_any_dataset(path: str, schema_spec: str | None):
    if path.endswith(".csv"):
        if not schema_spec:
            raise SystemExit("CSV input needs --schema")
        return ingest_csv(path, _parse_schema(schema_spec))
    return load_dataset(path)


def cmd_learn_mrf(args) -> int:
    dataset = _load_any_dataset(args.data, args.schema)
    graph = learn_structure(dataset, args.mi_threshold)
    save_graph(graph, args.out)
    _emit(
        {
            "command": "learn-mrf",
            "data": args.data,
            "out": args.out,
            "mi_threshold": args.mi_threshold,
            "edges": [list(e) for e in graph.edge_list()],
        }
    )
    return 0


def cmd_build_sample(args) -> int:
    dataset = _load_any_dataset(args.data, args.schema)
    if args.graph:
        graph = load_graph(args.graph)
    else:
        graph = learn_structure(dataset, args.mi_threshold)
    selected = approx_min_vertex_cover(graph) or [0]
    partition = build_partition(dataset, selected)
    stable, unstable = classify_stability(partition, args.n)
    raw_strata = len(partition.strata)
    if args.fallback == "merge":
        final = fallback_merge(partition, stable, unstable)
        method = "fallback-stratified"
    elif args.fallback == "redistribute":
        final = fallback_redistribute(partition, stable, unstable, args.n)
        method = "fallback-stratified"
    elif args.fallback == "none":
        final = partition
        method = "simple-stratified"
    else:
        raise SystemExit(f"unknown --fallback {args.fallback!r}")
    allocation = allocate(final, args.n)
    sample = draw_stratified(dataset, final, allocation, seed=args.seed, method=method)
    save_sample(sample, args.out)
    report = {
        "command": "build-sample",
        "data": args.data,
        "out": args.out,
        "n": args.n,
        "seed": args.seed,
        "mi_threshold": args.mi_threshold,
        "fallback": args.fallback,
        "selected_features": [dataset.schema.names[j] for j in selected],
        "strata_raw": raw_strata,
        "strata_stable": len(stable),
        "strata_unstable": len(unstable),
        "strata_final": len(final.strata),
        "population_total": final.total_rows,
        "drawn_total": sample.num_rows,
    }
    with open(args.out + ".report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    _emit(report)
    return 0


def cmd_split(args) -> int:
    sample = load_sample(args.sample)
    subs = split_subsamples(sample, args.nodes, seed=args.seed)
    manifest = {}
    for sub in subs:
        path = f"{args.outdir}/part-{sub.node_index}.smp"
        save_sample(sub, path)
        manifest[f"{args.sample_id}:{sub.node_index}"] = {
            "path": path,
            "row_count": sub.num_rows,
        }
    manifest_path = f"{args.outdir}/manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "sample_id": args.sample_id,
                "version": args.version,
                "manifest": manifest,
                "schema": [[n, m] for n, m in sample.schema.features],
            },
            fh,
            indent=1,
        )
    _emit(
        {
            "command": "split",
            "sample": args.sample,
            "nodes": args.nodes,
            "seed": args.seed,
            "manifest": manifest_path,
        }
    )
    return 0


def cmd_query(args) -> int:
    sample = load_sample(args.sample)
    query = parse_query(args.query, sample.schema)
    estimate = estimate_count(sample, query)
    out = {
        "command": "query",
        "sample": args.sample,
        "query": args.query,
        "estimate": estimate.value,
        "margin": estimate.margin,
        "fraction_scanned": estimate.fraction_scanned,
        "rows_matched": estimate.rows_matched,
    }
    if args.data:
        dataset = _load_any_dataset(args.data, args.schema)
        truth = exact_count(dataset, query)
        out["exact"] = truth
        out["relative_error"] = abs(1.0 - estimate.value / truth) if truth else None
    _emit(out)
    return 0


def _serve_forever():
    stop = []
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    while not stop:
        time.sleep(0.2)


def cmd_serve_coordinator(args) -> int:
    runtime = TcpRuntime("coordinator", host=args.host, port=args.port)
    node = CoordinatorNode(
        runtime, CoordinatorConfig(aggregator_capacity=args.aggregator_capacity)
    )
    runtime.attach(node)
    _emit({"command": "serve-coordinator", "address": runtime.address})
    _serve_forever()
    runtime.close()
    return 0


def cmd_serve_counter(args) -> int:
    runtime = TcpRuntime(args.node_id, host=args.host, port=args.port)
    node = CounterNode(
        runtime,
        args.node_id,
        CounterConfig(
            coordinator_address=args.coordinator,
            push_interval_ms=args.push_interval_ms,
            pair_count=args.pairs,
        ),
    )
    runtime.attach(node)
    _emit({"command": "serve-counter", "node_id": args.node_id, "address": runtime.address})
    _serve_forever()
    runtime.close()
    return 0


def cmd_serve_aggregator(args) -> int:
    runtime = TcpRuntime(args.node_id, host=args.host, port=args.port)
    node = AggregatorNode(
        runtime,
        args.node_id,
        AggregatorConfig(
            coordinator_address=args.coordinator,
            default_sub_cluster=args.sub_cluster,
            default_push_interval_ms=args.push_interval_ms,
        ),
    )
    runtime.attach(node)
    gateway = HttpGateway(node, runtime, host=args.host, port=args.gateway_port)
    gateway.start()
    _emit(
        {
            "command": "serve-aggregator",
            "node_id": args.node_id,
            "address": runtime.address,
            "gateway": gateway.url,
        }
    )
    _serve_forever()
    gateway.close()
    runtime.close()
    return 0


def cmd_publish(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        doc = json.load(fh)
    schema_json = json.dumps({"features": doc.get("schema", [])})
    message = wire.PublishSample(
        sample_id=doc["sample_id"],
        version=doc.get("version", 1),
        manifest=doc["manifest"],
        schema_json=schema_json,
    )
    runtime = TcpRuntime("publisher")
    try:
        runtime.attach(type("Sink", (), {"on_message": staticmethod(lambda m: None)})())
        runtime.send(args.coordinator, message)
        time.sleep(0.2)
    finally:
        runtime.close()
    _emit({"command": "publish", "manifest": args.manifest, "coordinator": args.coordinator})
    return 0


def cmd_bench(args) -> int:
    if args.suite == "error-ratio":
        dataset = _load_any_dataset(args.data, args.schema)
        rows = experiment_error_ratio(
            dataset,
            n=args.n,
            sizes=[int(s) for s in args.sizes.split(",")],
            per_size=args.per_size,
            seeds=[int(s) for s in args.seeds.split(",")],
            mi_threshold=args.mi_threshold,
            csv_path=args.out,
        )
        _emit(
            {
                "command": "bench",
                "suite": "error-ratio",
                "out": args.out,
                "rows": [
                    {
                        "target_size": r.target_size,
                        "ratio_vs_uniform": r.ratio_vs_uniform,
                        "ratio_vs_simple": r.ratio_vs_simple,
                    }
                    for r in rows
                ],
            }
        )
        return 0
    sample = load_sample(args.sample)
    query = parse_query(args.query, sample.schema)
    config = SimConfig(
        sample=sample,
        counters=args.nodes,
        sub_cluster=args.sub_cluster or args.nodes,
        push_interval_ms=args.push_interval_ms,
        latency_ms=args.latency_ms,
        seed=args.seed,
        per_row_scan_cost_ms=args.per_row_scan_cost_ms,
    )
    if args.suite == "fetch-interval":
        rows = experiment_fetch_interval(
            config,
            query,
            [float(s) for s in args.intervals.split(",")],
            csv_path=args.out,
        )
        _emit({"command": "bench", "suite": "fetch-interval", "out": args.out, "rows": rows})
        return 0
    if args.suite == "overhead":
        out = experiment_distributed_overhead(config, query)
        _emit(
            {
                "command": "bench",
                "suite": "overhead",
                "counters": out["counters"],
                "ratio": out["ratio"],
                "distributed_load_ms": out["distributed_load_ms"],
                "direct_scan_ms": out["direct_scan_ms"],
                "note": "reported only; the published comparison is environment-dependent",
            }
        )
        return 0
    raise SystemExit(f"unknown bench suite {args.suite!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratacast",
        description="Stratified-sample audience count forecasting toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic categorical dataset")
    p.add_argument("out")
    p.add_argument("--schema", required=True, help="name:cardinality,comma separated")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweeps", type=int, default=60)
    p.add_argument("--couple", action="append", help="featA:featB:strength", default=None)
    p.add_argument("--edges", help="JSON file with explicit edge matrices")
    p.add_argument("--csv", action="store_true", help="write CSV instead of binary")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("learn-mrf", help="learn the feature dependency graph")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--schema", help="required for CSV inputs")
    p.add_argument("--mi-threshold", type=float, default=0.05)
    p.set_defaults(fn=cmd_learn_mrf)

    p = sub.add_parser("build-sample", help="learn, stratify, fall back, and draw")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--schema", help="required for CSV inputs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mi-threshold", type=float, default=0.05)
    p.add_argument("--graph", help="reuse a saved dependency graph")
    p.add_argument(
        "--fallback", choices=["merge", "redistribute", "none"], default="merge"
    )
    p.set_defaults(fn=cmd_build_sample)

    p = sub.add_parser("split", help="split a sample into per-node sub-samples")
    p.add_argument("sample")
    p.add_argument("outdir")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-id", default="sample-1")
    p.add_argument("--version", type=int, default=1)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("query", help="estimate a count against a sample file")
    p.add_argument("sample")
    p.add_argument("--query", required=True, help='e.g. "age in {2,3}, geo in {1}"')
    p.add_argument("--data", help="dataset for the exact count, optional")
    p.add_argument("--schema", help="required for CSV datasets")
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("serve-coordinator")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=4700)
    p.add_argument("--aggregator-capacity", type=int, default=4)
    p.set_defaults(fn=cmd_serve_coordinator)

    p = sub.add_parser("serve-counter")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--coordinator", required=True, help="host:port")
    p.add_argument("--node-id", default="counter-1")
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--push-interval-ms", type=float, default=200.0)
    p.set_defaults(fn=cmd_serve_counter)

    p = sub.add_parser("serve-aggregator")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--gateway-port", type=int, default=8080)
    p.add_argument("--coordinator", required=True, help="host:port")
    p.add_argument("--node-id", default="agg-1")
    p.add_argument("--sub-cluster", type=int, default=3)
    p.add_argument("--push-interval-ms", type=float, default=200.0)
    p.set_defaults(fn=cmd_serve_aggregator)

    p = sub.add_parser("publish", help="announce split sub-samples to the coordinator")
    p.add_argument("manifest")
    p.add_argument("--coordinator", required=True, help="host:port")
    p.set_defaults(fn=cmd_publish)

    p = sub.add_parser("bench", help="run an experiment suite")
    p.add_argument("suite", choices=["error-ratio", "fetch-interval", "overhead"])
    p.add_argument("--data", help="dataset (error-ratio)")
    p.add_argument("--schema")
    p.add_argument("--sample", help="sample file (fetch-interval, overhead)")
    p.add_argument("--query", default="*")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--sizes", default="10000,30000,100000,300000")
    p.add_argument("--per-size", type=int, default=200)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--mi-threshold", type=float, default=0.05)
    p.add_argument("--nodes", type=int, default=3)
    p.add_argument("--sub-cluster", type=int, default=0)
    p.add_argument("--push-interval-ms", type=float, default=100.0)
    p.add_argument("--latency-ms", type=float, default=1.0)
    p.add_argument("--per-row-scan-cost-ms", type=float, default=0.05)
    p.add_argument("--intervals", default="0,100,500,2000")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
