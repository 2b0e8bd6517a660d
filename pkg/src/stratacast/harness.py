"""Deterministic in-process simulation of the whole cluster, plus the two
experiment families: sampling-error ratios and distributed-system timing.

Everything runs on the virtual clock of :class:`SimNetwork`; a scenario is a
pure function of its config.  Timing is modelled as total load, not wall
time: scan cost is per-row, message cost is per-hop latency, and merge cost
is charged per merge operation on the aggregator.
"""

from __future__ import annotations

import csv as _csv
import json
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import wire
from .aggregator import AggregatorConfig, AggregatorNode
from .coordinator import CoordinatorConfig, CoordinatorNode
from .counter import CounterConfig, CounterNode
from .datamodel import Dataset, Schema, generate_synthetic
from .mrf import learn_structure
from .query import Query, estimate_count, exact_count, generate_workload
from .runtime import NetLogRecord, SimNetwork
from .strata import (
    METHOD_FALLBACK,
    METHOD_SIMPLE,
    Sample,
    allocate,
    approx_min_vertex_cover,
    build_partition,
    classify_stability,
    draw_stratified,
    draw_uniform,
    fallback_merge,
    fallback_redistribute,
    split_subsamples,
)


@dataclass
class SimConfig:
    sample: Sample
    counters: int = 3
    sub_cluster: int = 3
    push_interval_ms: float = 100.0
    fetch_interval_ms: float = 0.0  # 0 = never fetch until completion
    latency_ms: float = 1.0
    drop_probability: float = 0.0
    kill_at_ms: dict = field(default_factory=dict)  # node id -> virtual ms
    seed: int = 0
    per_row_scan_cost_ms: float = 0.05
    scan_chunk_rows: int = 64
    merge_cost_ms: float = 0.5
    lease_duration_ms: float = 2_000.0
    renew_interval_ms: float = 500.0
    liveness_timeout_ms: float = 2_500.0
    stall_timeout_ms: float = 4_000.0
    maintenance_interval_ms: float = 250.0
    deadline_ms: float = 600_000.0


@dataclass
class TimingBreakdown:
    """Per-report load: distribute, scan, communicate, merge (virtual ms)."""

    t_d: float
    t_s: float
    t_c: float
    t_m: float

    @property
    def total(self) -> float:
        return self.t_d + self.t_s + self.t_c + self.t_m


@dataclass
class ReportOutcome:
    report_id: str
    envelope: wire.ResultEnvelope
    timing: TimingBreakdown
    initiated_at_ms: float
    done_at_ms: float
    history: list[tuple[float, wire.ResultEnvelope]]

    @property
    def total_report_time_ms(self) -> float:
        """Completion latency plus the merge work the report caused."""
        return (self.done_at_ms - self.initiated_at_ms) + self.timing.t_m


class ClientNode:
    """Pseudo-node the harness uses to drive the wire protocol."""

    def __init__(self):
        self.runtime = None
        self.acks: list[tuple[float, wire.InitiateAck]] = []
        self.envelopes: dict[str, wire.ResultEnvelope] = {}
        self.history: dict[str, list[tuple[float, wire.ResultEnvelope]]] = {}
        self.errors: list[tuple[float, wire.ErrorReply]] = []

    def on_message(self, message: wire.Message) -> None:
        now = self.runtime.now_ms()
        if isinstance(message, wire.InitiateAck):
            self.acks.append((now, message))
        elif isinstance(message, wire.ResultEnvelope):
            self.envelopes[message.report_id] = message
            self.history.setdefault(message.report_id, []).append((now, message))
        elif isinstance(message, wire.ErrorReply):
            self.errors.append((now, message))


class SimCluster:
    """Coordinator + counters + one aggregator + a scripted client."""

    COORD = "coord"
    AGG = "agg-0"
    CLIENT = "client"

    def __init__(self, config: SimConfig):
        self.config = config
        self.net = SimNetwork(
            seed=config.seed,
            latency_ms=config.latency_ms,
            drop_probability=config.drop_probability,
        )
        self.store: dict[str, Sample] = {}
        self._publish_seq = 0

        coord_rt = self.net.add_node(self.COORD, None)
        self.coordinator = CoordinatorNode(
            coord_rt,
            CoordinatorConfig(
                lease_duration_ms=config.lease_duration_ms,
                liveness_timeout_ms=config.liveness_timeout_ms,
                maintenance_interval_ms=config.maintenance_interval_ms,
            ),
        )
        self.net.bind(self.COORD, self.coordinator)

        self.counters: list[CounterNode] = []
        for i in range(config.counters):
            node_id = f"counter-{i}"
            rt = self.net.add_node(node_id, None)
            node = CounterNode(
                rt,
                node_id,
                CounterConfig(
                    coordinator_address=self.COORD,
                    push_interval_ms=config.push_interval_ms,
                    pair_count=4,
                    scan_chunk_rows=config.scan_chunk_rows,
                    per_row_scan_cost_ms=config.per_row_scan_cost_ms,
                    renew_interval_ms=config.renew_interval_ms,
                    maintenance_interval_ms=config.maintenance_interval_ms,
                    sample_loader=self.store.__getitem__,
                ),
            )
            self.net.bind(node_id, node)
            self.counters.append(node)

        agg_rt = self.net.add_node(self.AGG, None)
        self.aggregator = AggregatorNode(
            agg_rt,
            self.AGG,
            AggregatorConfig(
                coordinator_address=self.COORD,
                default_push_interval_ms=config.push_interval_ms,
                default_sub_cluster=config.sub_cluster,
                stall_timeout_ms=config.stall_timeout_ms,
                maintenance_interval_ms=config.maintenance_interval_ms,
                merge_cost_ms=config.merge_cost_ms,
            ),
        )
        self.net.bind(self.AGG, self.aggregator)

        self.client = ClientNode()
        self.client.runtime = self.net.add_node(self.CLIENT, self.client)

        for node_id, when in config.kill_at_ms.items():
            self.net.at(when, lambda nid=node_id: self.net.kill(nid))

    # -- lifecycle

    def publish(self, sample: Sample | None = None) -> str:
        sample = sample if sample is not None else self.config.sample
        self._publish_seq += 1
        sample_id = f"sample-{self._publish_seq}"
        subs = split_subsamples(sample, self.config.counters, seed=self.config.seed + 77)
        manifest = {}
        for sub in subs:
            path = f"{sample_id}/part-{sub.node_index}"
            self.store[path] = sub
            manifest[f"{sample_id}:{sub.node_index}"] = {
                "path": path,
                "row_count": sub.num_rows,
            }
        self.coordinator.publish_sample(
            sample_id, self._publish_seq, manifest, sample.schema.to_json()
        )
        return sample_id

    def run_until(self, predicate: Callable[[], bool], step_ms: float = 20.0) -> None:
        while not predicate():
            if self.net.now_ms() > self.config.deadline_ms:
                raise TimeoutError("scenario exceeded its virtual deadline")
            self.net.run(until_ms=self.net.now_ms() + step_ms)

    def start(self) -> None:
        self.publish()
        self.run_until(
            lambda: all(c.state == "serving" for c in self.counters if self.net.is_alive(c.node_id))
            and any(c.state == "serving" for c in self.counters)
        )

    def submit(self, query: Query, threshold: float = 0.0) -> str:
        before = len(self.client.acks)
        self.client.runtime.send(
            self.AGG,
            wire.InitiateReport(
                report_id="client-request",
                query=query,
                error_threshold=threshold,
                fetch_hints={"sub_cluster_size": self.config.sub_cluster},
                reply_to=self.CLIENT,
            ),
        )
        self.run_until(lambda: len(self.client.acks) > before)
        ack = self.client.acks[-1][1]
        if not ack.accepted:
            raise RuntimeError(f"report rejected: {ack.reason}")
        if self.config.fetch_interval_ms > 0:
            self._arm_fetch(ack.report_id)
        return ack.report_id

    def _arm_fetch(self, report_id: str):
        interval = self.config.fetch_interval_ms

        def tick():
            collector = self.aggregator._find(report_id)
            if collector is None or collector.status != "running":
                return
            self.client.runtime.send(
                self.AGG, wire.FetchResult(report_id=report_id, reply_to=self.CLIENT)
            )
            self.net.at(self.net.now_ms() + interval, tick)

        self.net.at(self.net.now_ms() + interval, tick)

    def await_report(self, report_id: str) -> ReportOutcome:
        self.run_until(
            lambda: (c := self.aggregator._find(report_id)) is not None
            and c.status != "running"
        )
        self.client.runtime.send(
            self.AGG, wire.FetchResult(report_id=report_id, reply_to=self.CLIENT)
        )
        self.run_until(
            lambda: report_id in self.client.envelopes
            and self.client.envelopes[report_id].status != "running"
        )
        collector = self.aggregator._find(report_id)
        return ReportOutcome(
            report_id=report_id,
            envelope=self.client.envelopes[report_id],
            timing=self.timing_for(report_id),
            initiated_at_ms=collector.created_ms,
            done_at_ms=collector.done_at_ms,
            history=list(self.client.history.get(report_id, [])),
        )

    # -- metrics

    def timing_for(self, report_id: str) -> TimingBreakdown:
        t_d = t_c = 0.0
        for rec in self.net.log:
            if rec.event != "send" or rec.tag != report_id:
                continue
            if rec.msg_type == "distribute_request":
                t_d += rec.latency_ms
            elif rec.msg_type in (
                "partial_result",
                "fetch_result",
                "result_envelope",
                "cancel",
                "distribute_ack",
            ):
                t_c += rec.latency_ms
        t_s = sum(c.scan_ms_by_report.get(report_id, 0.0) for c in self.counters)
        t_m = self.aggregator.merge_ms_by_report.get(report_id, 0.0)
        return TimingBreakdown(t_d=t_d, t_s=t_s, t_c=t_c, t_m=t_m)


def run_report(
    config: SimConfig, query: Query, threshold: float = 0.0
) -> tuple[ReportOutcome, SimCluster]:
    """One report end to end; returns the outcome and the cluster for inspection."""
    cluster = SimCluster(config)
    cluster.start()
    report_id = cluster.submit(query, threshold)
    return cluster.await_report(report_id), cluster


def save_scenario(config: SimConfig, path: str, sample_path: str) -> None:
    """Scenario file: every knob except the sample, referenced by path."""
    fields = {k: v for k, v in config.__dict__.items() if k != "sample"}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"sample_path": sample_path, **fields}, fh, indent=1, sort_keys=True)


def load_scenario(path: str) -> SimConfig:
    from .strata import load_sample

    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    sample = load_sample(doc.pop("sample_path"))
    return SimConfig(sample=sample, **doc)


def save_event_log(log: list[NetLogRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def load_event_log(path: str) -> list[NetLogRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            out.append(NetLogRecord(**json.loads(line)))
    return out


# --- experiment family 1: sampling error ratios -------------------------------


def correlated_benchmark_dataset(
    n_rows: int, seed: int = 42, sweeps: int = 10, hub_cardinality: int = 16
) -> Dataset:
    """Synthetic audience table with a known dependency structure.

    Two hub features each drive twelve 6-ary satellite features (a satellite
    copies its hub modulo 6 with ~92% fidelity); four features are free.
    The structure gives the learner a crisp graph, the cover a small feature
    set, and the raw partition a long tail of small strata to exercise the
    fall-back step.
    """
    features = [("hub_a", hub_cardinality), ("hub_b", hub_cardinality)]
    features += [(f"sat_a{i}", 6) for i in range(12)]
    features += [(f"sat_b{i}", 6) for i in range(12)]
    features += [(f"free{i}", 6) for i in range(4)]
    schema = Schema(tuple(features))
    strength = 4.052  # ~92% chance a satellite agrees with its hub mod 6
    theta = np.full((hub_cardinality, 6), strength)
    for t in range(hub_cardinality):
        theta[t, t % 6] = 0.0
    edges = [(0, 2 + i, theta) for i in range(12)]
    edges += [(1, 14 + i, theta) for i in range(12)]
    return generate_synthetic(schema, edges, n_rows, seed=seed, sweeps=sweeps)


def targeting_feature_weights(
    schema, emphasized: list[int], emphasis: float = 30.0
) -> list[float]:
    """Workload weights modelling targeting concentrated on key dimensions."""
    weights = [1.0] * schema.num_features
    for j in emphasized:
        weights[j] = emphasis
    return weights


@dataclass
class ErrorRatioRow:
    target_size: int
    queries: int
    err_fallback: float
    err_simple: float
    err_uniform: float

    @property
    def ratio_vs_uniform(self) -> float:
        return self.err_fallback / self.err_uniform if self.err_uniform else 1.0

    @property
    def ratio_vs_simple(self) -> float:
        return self.err_fallback / self.err_simple if self.err_simple else 1.0


def experiment_error_ratio(
    dataset: Dataset,
    n: int,
    sizes: list[int],
    per_size: int,
    seeds: list[int],
    mi_threshold: float = 0.05,
    fallback: str = "merge",
    workload_seed: int = 1,
    workload_feature_weights=None,
    csv_path: str | None = None,
) -> list[ErrorRatioRow]:
    """Mean relative error of the three sampling methods per query-size bin.

    A degenerate n equal to the dataset size yields zero error everywhere and
    ratios of one by convention.
    """
    graph = learn_structure(dataset, mi_threshold)
    selected = approx_min_vertex_cover(graph)
    if not selected:
        selected = [0]
    bins = generate_workload(
        dataset,
        sizes,
        per_size,
        seed=workload_seed,
        feature_weights=workload_feature_weights,
    )
    raw = build_partition(dataset, selected)
    stable, unstable = classify_stability(raw, n)
    if fallback == "merge":
        stabilized = fallback_merge(raw, stable, unstable)
    else:
        stabilized = fallback_redistribute(raw, stable, unstable, n)
    alloc_fallback = allocate(stabilized, n)
    alloc_simple = allocate(raw, n)
    samples_by_seed = {
        seed: {
            "fallback": draw_stratified(
                dataset, stabilized, alloc_fallback, seed=seed, method=METHOD_FALLBACK
            ),
            "simple": draw_stratified(
                dataset, raw, alloc_simple, seed=seed, method=METHOD_SIMPLE
            ),
            "uniform": draw_uniform(dataset, n, seed=seed),
        }
        for seed in seeds
    }
    rows = []
    for target, wbin in zip(sizes, bins):
        truths = [exact_count(dataset, q) for q in wbin.queries]
        errs = {"fallback": [], "simple": [], "uniform": []}
        for seed in seeds:
            for name, sample in samples_by_seed[seed].items():
                for query, truth in zip(wbin.queries, truths):
                    if truth == 0:
                        continue
                    estimate = estimate_count(sample, query).value
                    errs[name].append(abs(1.0 - estimate / truth))
        mean = {k: float(np.mean(v)) if v else 0.0 for k, v in errs.items()}
        if all(m == 0.0 for m in mean.values()):
            mean = {k: 1.0 for k in mean}  # degenerate run: ratios are 1
        rows.append(
            ErrorRatioRow(
                target_size=target,
                queries=len(wbin.queries),
                err_fallback=mean["fallback"],
                err_simple=mean["simple"],
                err_uniform=mean["uniform"],
            )
        )
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(
                [
                    "target_size",
                    "queries",
                    "err_fallback",
                    "err_simple",
                    "err_uniform",
                    "ratio_vs_uniform",
                    "ratio_vs_simple",
                ]
            )
            for row in rows:
                writer.writerow(
                    [
                        row.target_size,
                        row.queries,
                        f"{row.err_fallback:.6f}",
                        f"{row.err_simple:.6f}",
                        f"{row.err_uniform:.6f}",
                        f"{row.ratio_vs_uniform:.4f}",
                        f"{row.ratio_vs_simple:.4f}",
                    ]
                )
    return rows


# --- experiment family 2: distributed timing ----------------------------------


def experiment_fetch_interval(
    config: SimConfig, query: Query, intervals: list[float], csv_path: str | None = None
) -> list[dict]:
    """Total report time versus fetch frequency, relative to a no-fetch run."""
    rows = []
    baseline = None
    for interval in intervals:
        cfg = SimConfig(**{**config.__dict__, "fetch_interval_ms": interval})
        outcome, _ = run_report(cfg, query)
        total = outcome.total_report_time_ms
        if baseline is None:
            baseline = total  # first interval is the reference (use 0 first)
        rows.append(
            {
                "fetch_interval_ms": interval,
                "total_ms": total,
                "deviation": (total - baseline) / baseline if baseline else 0.0,
            }
        )
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["fetch_interval_ms", "total_ms", "deviation"])
            for row in rows:
                writer.writerow(
                    [row["fetch_interval_ms"], f"{row['total_ms']:.3f}", f"{row['deviation']:.4f}"]
                )
    return rows


def experiment_distributed_overhead(config: SimConfig, query: Query) -> dict:
    """Total distributed load versus a single-machine scan of the same sample.

    Reported, never asserted: the published comparison figure depends on the
    deployment environment.
    """
    outcome, cluster = run_report(config, query)
    direct_ms = config.sample.num_rows * config.per_row_scan_cost_ms
    load = outcome.timing.total
    return {
        "counters": config.counters,
        "distributed_load_ms": load,
        "direct_scan_ms": direct_ms,
        "ratio": load / direct_ms if direct_ms else float("inf"),
        "timing": outcome.timing,
    }
