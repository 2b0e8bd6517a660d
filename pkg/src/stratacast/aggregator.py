"""Aggregator node: distributes reports to a counter sub-cluster, merges
cumulative partials with snapshot-frozen scaling, serves progressive fetches,
cancels on threshold, and exposes an HTTP gateway.

Scaling uses the sample information captured when the report started; later
broadcasts update the registry but never an in-flight report.  Estimates are
merged in exact rational arithmetic so a report split across k counters is
bit-identical to the same sample scanned by one counter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from threading import Thread
from typing import Optional

from . import wire
from .datamodel import Schema
from .query import CountEstimate, Query, scan_extrapolation, Z_95
from .runtime import Runtime, TcpRuntime

RUNNING = "running"
DONE = "done"
CANCELLED = "cancelled"


class ClusterUnavailable(Exception):
    """No live counter with sample information is known to the registry."""


@dataclass
class AggregatorConfig:
    coordinator_address: str
    default_push_interval_ms: float = 200.0
    default_sub_cluster: int = 3
    cache_retention_ms: float = 300_000.0
    idle_window_ms: float = 120_000.0
    stall_timeout_ms: float = 8_000.0
    maintenance_interval_ms: float = 1_000.0
    heartbeat_interval_ms: float = 2_000.0
    merge_cost_ms: float = 0.0  # virtual bookkeeping cost per merge


@dataclass
class RegistryEntry:
    node_id: str
    kind: str
    address: str
    alive: bool = True
    sample_id: str = ""
    version: int = 0
    row_count: int = 0
    total_weight: Fraction = Fraction(0)
    has_info: bool = False


@dataclass
class Participant:
    node_id: str
    address: str
    total_weight: Fraction
    info_version: int
    last_partial: Optional[wire.PartialResult] = None
    last_progress_ms: float = 0.0
    down: bool = False


@dataclass
class AggregatorCollector:
    report_id: str
    query: Query
    threshold: float
    push_interval_ms: float
    created_ms: float
    participants: dict[str, Participant] = field(default_factory=dict)
    # weight of every live counter's slice at initiation; lets a small
    # sub-cluster still answer at population scale
    cluster_weight: Fraction = Fraction(0)
    status: str = RUNNING
    last_fetch_ms: float = 0.0
    done_at_ms: float = 0.0
    merge_count: int = 0
    cancel_sent: bool = False
    final: Optional[CountEstimate] = None

    def snapshot_weight(self) -> Fraction:
        return sum((p.total_weight for p in self.participants.values()), Fraction(0))

    def scale_base(self) -> Fraction:
        return self.cluster_weight if self.cluster_weight > 0 else self.snapshot_weight()

    def terminal(self, p: Participant) -> bool:
        if p.down:
            return True
        lp = p.last_partial
        return lp is not None and lp.rows_scanned >= lp.rows_total


class AggregatorNode:
    def __init__(self, runtime: Runtime, node_id: str, config: AggregatorConfig):
        self.runtime = runtime
        self.node_id = node_id
        self.config = config
        self.registry: dict[str, RegistryEntry] = {}
        self.queue: dict[str, AggregatorCollector] = {}
        self.cache: dict[str, tuple[AggregatorCollector, float]] = {}
        self.schema: Schema | None = None
        self.slot_granted = True
        self.merge_ms_by_report: dict[str, float] = {}
        self._report_seq = 0
        self.runtime.send(
            config.coordinator_address,
            wire.Register(node_id=node_id, kind="aggregator", address=runtime.address),
        )
        self.runtime.send(config.coordinator_address, wire.SlotRequest(node_id=node_id))
        self.runtime.schedule(config.heartbeat_interval_ms, self._heartbeat)
        self.runtime.schedule(config.maintenance_interval_ms, self._maintenance)

    def _heartbeat(self):
        self.runtime.send(
            self.config.coordinator_address, wire.Heartbeat(node_id=self.node_id)
        )
        self.runtime.schedule(self.config.heartbeat_interval_ms, self._heartbeat)

    # -- registry upkeep

    def _entry(self, node_id: str) -> RegistryEntry:
        if node_id not in self.registry:
            self.registry[node_id] = RegistryEntry(node_id, "counter", "")
        return self.registry[node_id]

    def _absorb_members(self, members: dict):
        for node_id, rec in members.items():
            entry = self._entry(node_id)
            entry.kind = rec["kind"]
            entry.address = rec["address"]
            entry.alive = True

    def _absorb_info(
        self, node_id: str, sample_id: str, version: int, row_count: int, total_weight: Fraction
    ):
        entry = self._entry(node_id)
        if version < entry.version:
            return
        entry.sample_id = sample_id
        entry.version = version
        entry.row_count = row_count
        entry.total_weight = total_weight
        entry.has_info = True

    def live_counters(self) -> list[str]:
        return sorted(
            n
            for n, e in self.registry.items()
            if e.kind == "counter" and e.alive and e.has_info and e.address
        )

    # -- report lifecycle

    def initiate_report(
        self, query: Query, threshold: float, sub_cluster: int | None = None
    ) -> str:
        live = self.live_counters()
        if not live:
            raise ClusterUnavailable("no live counter with a loaded sub-sample")
        want = sub_cluster or self.config.default_sub_cluster
        size = max(1, min(want, len(live)))
        chosen = self.runtime.rng().sample(live, size)
        self._report_seq += 1
        report_id = f"{self.node_id}-r{self._report_seq}"
        collector = AggregatorCollector(
            report_id=report_id,
            query=query,
            threshold=threshold,
            push_interval_ms=self.config.default_push_interval_ms,
            created_ms=self.runtime.now_ms(),
            cluster_weight=sum(
                (self.registry[n].total_weight for n in live), Fraction(0)
            ),
        )
        for node_id in chosen:
            self._add_participant(collector, node_id)
        self.queue[report_id] = collector
        return report_id

    def _add_participant(self, collector: AggregatorCollector, node_id: str):
        entry = self.registry[node_id]
        collector.participants[node_id] = Participant(
            node_id=node_id,
            address=entry.address,
            total_weight=entry.total_weight,
            info_version=entry.version,
            last_progress_ms=self.runtime.now_ms(),
        )
        self.runtime.send(
            entry.address,
            wire.DistributeRequest(
                report_id=collector.report_id,
                query=collector.query,
                aggregator_address=self.runtime.address,
                push_interval_ms=collector.push_interval_ms,
                error_threshold=collector.threshold,
            ),
        )

    def _replace_participant(self, collector: AggregatorCollector, busy_node: str):
        collector.participants.pop(busy_node, None)
        candidates = [n for n in self.live_counters() if n not in collector.participants]
        if candidates:
            self._add_participant(collector, self.runtime.rng().choice(candidates))
        self._check_completion(collector)

    # -- merging

    def merge(self, collector: AggregatorCollector) -> CountEstimate:
        """Merge the latest partial per counter into one scaled estimate.

        Counters mid-scan contribute their extrapolated totals; counters that
        never responded contribute their snapshot weight to the scale-up
        factor and, conservatively (a match rate of at most one), to the
        margin.
        """
        collector.merge_count += 1
        self.merge_ms_by_report[collector.report_id] = (
            self.merge_ms_by_report.get(collector.report_id, 0.0) + self.config.merge_cost_ms
        )
        snapshot = collector.snapshot_weight()
        responding = [
            p
            for p in collector.participants.values()
            if p.last_partial is not None and p.last_partial.rows_scanned > 0
        ]
        if not responding:
            return CountEstimate(0.0, float(snapshot), 0.0, 0)
        resp_weight = sum((p.total_weight for p in responding), Fraction(0))
        missing = max(snapshot - resp_weight, Fraction(0))
        scale = collector.scale_base() / resp_weight if resp_weight else Fraction(1)
        exact = Fraction(0)
        variance = 0.0
        scanned = 0
        total = 0
        matched = 0
        for p in responding:
            lp = p.last_partial
            exact += Fraction(lp.rows_total, lp.rows_scanned) * lp.matched_weight
            variance += scan_extrapolation(
                float(lp.matched_weight),
                lp.matched_weight_sq,
                lp.rows_scanned,
                lp.rows_total,
            )[1]
            scanned += lp.rows_scanned
            total += lp.rows_total
            matched += lp.rows_matched
        estimate = float(scale * exact)
        margin = Z_95 * (float(scale) ** 2 * variance) ** 0.5 + float(missing)
        fraction = scanned / total if total else 0.0
        return CountEstimate(estimate, margin, fraction, matched)

    def _check_threshold(self, collector: AggregatorCollector):
        if collector.threshold <= 0 or collector.status != RUNNING:
            return
        estimate = self.merge(collector)
        if estimate.value > 0 and estimate.margin / estimate.value <= collector.threshold:
            self._finish(collector, DONE, estimate)
            self._broadcast_cancel(collector, "error threshold reached")

    def _broadcast_cancel(self, collector: AggregatorCollector, reason: str):
        if collector.cancel_sent:
            return
        collector.cancel_sent = True
        for p in collector.participants.values():
            if not p.down:
                self.runtime.send(
                    p.address, wire.Cancel(report_id=collector.report_id, reason=reason)
                )

    def _check_completion(self, collector: AggregatorCollector):
        if collector.status != RUNNING:
            return
        if all(collector.terminal(p) for p in collector.participants.values()):
            self._finish(collector, DONE, self.merge(collector))

    def _finish(self, collector: AggregatorCollector, status: str, estimate: CountEstimate):
        if collector.status != RUNNING:
            return
        collector.status = status
        collector.final = estimate
        collector.done_at_ms = self.runtime.now_ms()
        self.queue.pop(collector.report_id, None)
        self.cache[collector.report_id] = (collector, collector.done_at_ms)

    # -- fetch surface

    def _find(self, report_id: str) -> Optional[AggregatorCollector]:
        if report_id in self.queue:
            return self.queue[report_id]
        if report_id in self.cache:
            return self.cache[report_id][0]
        return None

    def fetch(self, report_id: str) -> Optional[wire.ResultEnvelope]:
        collector = self._find(report_id)
        if collector is None:
            return None
        collector.last_fetch_ms = self.runtime.now_ms()
        estimate = collector.final if collector.final is not None else self.merge(collector)
        return wire.ResultEnvelope(
            report_id=report_id,
            value=estimate.value,
            margin=estimate.margin,
            fraction_scanned=estimate.fraction_scanned,
            rows_matched=estimate.rows_matched,
            status=collector.status,
        )

    def cluster_summary(self) -> dict:
        return {
            "aggregator": self.node_id,
            "counters": [
                {
                    "nodeId": e.node_id,
                    "alive": e.alive,
                    "sampleId": e.sample_id,
                    "version": e.version,
                    "rowCount": e.row_count,
                    "totalWeight": float(e.total_weight),
                }
                for e in sorted(self.registry.values(), key=lambda e: e.node_id)
                if e.kind == "counter"
            ],
            "reportsRunning": len(self.queue),
            "reportsCached": len(self.cache),
        }

    # -- message handling

    def on_message(self, message: wire.Message) -> None:
        if isinstance(message, wire.RegisterAck):
            self._absorb_members(message.members)
            for node_id, payload in message.sample_infos.items():
                self._absorb_info(
                    node_id,
                    payload["sample_id"],
                    payload["version"],
                    payload["row_count"],
                    payload["total_weight"],
                )
            if message.schema_json:
                self.schema = Schema.from_json(message.schema_json)
        elif isinstance(message, wire.MemberEvent):
            entry = self._entry(message.node_id)
            entry.kind = message.kind
            entry.address = message.address
            entry.alive = message.alive
            if not message.alive:
                for collector in list(self.queue.values()):
                    p = collector.participants.get(message.node_id)
                    if p is not None and not p.down:
                        p.down = True
                        self._check_completion(collector)
        elif isinstance(message, wire.SampleInformation):
            self._absorb_info(
                message.node_id,
                message.sample_id,
                message.version,
                message.row_count,
                message.total_weight,
            )
        elif isinstance(message, wire.SampleEvent):
            if message.schema_json:
                self.schema = Schema.from_json(message.schema_json)
        elif isinstance(message, wire.SlotDecision):
            self.slot_granted = message.granted
        elif isinstance(message, wire.DistributeAck):
            collector = self.queue.get(message.report_id)
            if collector is not None and not message.accepted:
                self._replace_participant(collector, message.node_id)
        elif isinstance(message, wire.PartialResult):
            self._on_partial(message)
        elif isinstance(message, wire.InitiateReport):
            self._on_initiate(message)
        elif isinstance(message, wire.FetchResult):
            envelope = self.fetch(message.report_id)
            if envelope is None:
                self.runtime.send(
                    message.reply_to,
                    wire.ErrorReply(
                        request_type="fetch_result",
                        message=f"unknown report {message.report_id}",
                    ),
                )
            else:
                self.runtime.send(message.reply_to, envelope)

    def _on_initiate(self, message: wire.InitiateReport):
        if not self.slot_granted:
            self.runtime.send(
                message.reply_to,
                wire.InitiateAck(
                    report_id=message.report_id, accepted=False, reason="standby aggregator"
                ),
            )
            return
        try:
            sub_cluster = int(message.fetch_hints.get("sub_cluster_size", 0)) or None
            report_id = self.initiate_report(message.query, message.error_threshold, sub_cluster)
        except ClusterUnavailable as exc:
            self.runtime.send(
                message.reply_to,
                wire.InitiateAck(report_id=message.report_id, accepted=False, reason=str(exc)),
            )
            return
        self.runtime.send(
            message.reply_to,
            wire.InitiateAck(report_id=report_id, accepted=True, reason=""),
        )

    def _on_partial(self, message: wire.PartialResult):
        collector = self._find(message.report_id)
        if collector is None or collector.status != RUNNING:
            return
        p = collector.participants.get(message.node_id)
        if p is None or message.sample_info_version != p.info_version:
            return
        if p.last_partial is not None and message.rows_scanned < p.last_partial.rows_scanned:
            return  # cumulative totals: an older push can never roll us back
        p.last_partial = message
        p.last_progress_ms = self.runtime.now_ms()
        self._check_threshold(collector)
        self._check_completion(collector)

    def _maintenance(self):
        now = self.runtime.now_ms()
        for collector in list(self.queue.values()):
            for p in collector.participants.values():
                if not p.down and not collector.terminal(p):
                    if now - p.last_progress_ms > self.config.stall_timeout_ms:
                        p.down = True
            self._check_completion(collector)
            idle_for = now - max(collector.created_ms, collector.last_fetch_ms)
            if collector.status == RUNNING and idle_for > self.config.idle_window_ms:
                self._finish(collector, CANCELLED, self.merge(collector))
                self._broadcast_cancel(collector, "report idle")
        for report_id, (collector, done_at) in list(self.cache.items()):
            if now - done_at > self.config.cache_retention_ms:
                del self.cache[report_id]
        self.runtime.schedule(self.config.maintenance_interval_ms, self._maintenance)


# --- HTTP gateway ------------------------------------------------------------


class HttpGateway:
    """JSON-over-HTTP front door for clients and the web console.

    POST /reports {query, threshold, subClusterSize} -> {reportId}
    GET  /reports/{id} -> {estimate, margin, fractionScanned, rowsMatched, status}
    GET  /cluster -> registry summary
    GET  /schema -> feature names and cardinalities for pickers
    """

    def __init__(
        self,
        node: AggregatorNode,
        runtime: TcpRuntime,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.node = node
        self.runtime = runtime
        gateway = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, code: int, payload: dict):
                body = json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header(
                    "Access-Control-Allow-Headers", "Content-Type"
                )
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_OPTIONS(self):
                self.send_response(204)
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
                self.send_header("Access-Control-Allow-Headers", "Content-Type")
                self.end_headers()

            def do_GET(self):
                gateway._handle_get(self)

            def do_POST(self):
                gateway._handle_post(self)

        class Server(ThreadingHTTPServer):
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.port = self._server.server_address[1]
        self.url = f"http://{host}:{self.port}"
        self._thread = Thread(target=self._server.serve_forever, daemon=True)

    def start(self):
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._server.server_close()

    def _parse_query(self, raw: dict) -> Query:
        schema = self.node.schema
        if schema is None:
            raise ValueError("no schema published yet")
        mapping: dict[int, list[int]] = {}
        for key, values in raw.items():
            try:
                j = schema.index(key) if not key.isdigit() else int(key)
            except KeyError:
                raise ValueError(f"unknown feature {key!r}") from None
            if not isinstance(values, list) or not values:
                raise ValueError(f"feature {key!r}: expected a non-empty value list")
            mapping[j] = [int(v) for v in values]
        query = Query.of(mapping)
        query.validate(schema)
        return query

    def _handle_post(self, handler):
        if handler.path.rstrip("/") != "/reports":
            handler._reply(404, {"error": "unknown endpoint"})
            return
        try:
            length = int(handler.headers.get("Content-Length", "0"))
            body = json.loads(handler.rfile.read(length).decode("utf-8") or "{}")
            if not isinstance(body, dict) or not isinstance(body.get("query", None), dict):
                raise ValueError("body must be an object with a 'query' object")
            query = self._parse_query(body["query"])
            threshold = float(body.get("threshold", 0.0))
            sub_cluster = int(body.get("subClusterSize", 0)) or None
        except (ValueError, json.JSONDecodeError) as exc:
            handler._reply(400, {"error": str(exc)})
            return
        try:
            report_id = self.runtime.call_locked(
                lambda: self.node.initiate_report(query, threshold, sub_cluster)
            )
        except ClusterUnavailable as exc:
            handler._reply(503, {"error": str(exc)})
            return
        handler._reply(200, {"reportId": report_id})

    def _handle_get(self, handler):
        path = handler.path.rstrip("/")
        if path == "/cluster":
            handler._reply(200, self.runtime.call_locked(self.node.cluster_summary))
            return
        if path == "/schema":
            schema = self.node.schema
            if schema is None:
                handler._reply(503, {"error": "no schema published yet"})
                return
            handler._reply(
                200,
                {
                    "features": [
                        {"name": n, "cardinality": m} for n, m in schema.features
                    ]
                },
            )
            return
        if path.startswith("/reports/"):
            report_id = path[len("/reports/") :]
            envelope = self.runtime.call_locked(lambda: self.node.fetch(report_id))
            if envelope is None:
                handler._reply(404, {"error": f"unknown report {report_id}"})
                return
            handler._reply(
                200,
                {
                    "reportId": envelope.report_id,
                    "estimate": envelope.value,
                    "margin": envelope.margin,
                    "fractionScanned": envelope.fraction_scanned,
                    "rowsMatched": envelope.rows_matched,
                    "status": envelope.status,
                },
            )
            return
        handler._reply(404, {"error": "unknown endpoint"})
