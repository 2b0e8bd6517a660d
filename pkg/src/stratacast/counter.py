"""Counter node: holds one leased sub-sample in memory and scans it for
every report in its queue, pushing cumulative partial results.

Scan order is a load-time seeded shuffle, so any scan prefix is a uniform
draw of the node's rows and the partial-result margin formula stays honest.
Scanning is split across symmetric pairs that own disjoint row ranges and
integer accumulators; merging happens only when a partial result is built,
which makes pair-count choices invisible in the totals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import wire
from .query import Query, match_mask, scan_extrapolation, Z_95
from .runtime import Runtime, Timer
from .strata import Sample, SampleInfo, load_sample

RUNNING = "running"
DONE_FULL_SCAN = "done-full-scan"
DONE_THRESHOLD = "done-threshold"
DONE_IDLE = "done-idle"
CANCELLED = "cancelled"
_TERMINAL = (DONE_FULL_SCAN, DONE_THRESHOLD, DONE_IDLE, CANCELLED)


@dataclass
class CounterConfig:
    coordinator_address: str
    push_interval_ms: float = 200.0
    idle_window_ms: float = 120_000.0
    cache_retention_ms: float = 300_000.0
    pair_count: int = 4
    scan_chunk_rows: int = 512
    per_row_scan_cost_ms: float = 0.0
    renew_interval_ms: float = 3_000.0
    maintenance_interval_ms: float = 1_000.0
    retry_ms: float = 1_000.0
    sample_loader: Callable[[str], Sample] = load_sample


@dataclass
class ScanPair:
    """One consumer/processor pair owning a contiguous slice of scan order."""

    lo: int
    hi: int
    cursor: int
    matched_by_stratum: dict[int, int] = field(default_factory=dict)
    rows_matched: int = 0

    @property
    def scanned(self) -> int:
        return self.cursor - self.lo

    @property
    def exhausted(self) -> bool:
        return self.cursor >= self.hi


@dataclass
class LoadedSubsample:
    subsample_id: str
    sample_id: str
    epoch: int
    version: int  # node-local, strictly increasing across loads
    sample: Sample
    order: np.ndarray
    info: SampleInfo
    weights: dict[int, Fraction]


class CounterCollector:
    def __init__(
        self,
        report_id: str,
        query: Query,
        threshold: float,
        aggregator_address: str,
        push_interval_ms: float,
        loaded: LoadedSubsample,
        created_ms: float,
        pair_count: int,
    ):
        self.report_id = report_id
        self.query = query
        self.threshold = threshold
        self.aggregator_address = aggregator_address
        self.push_interval_ms = push_interval_ms
        self.loaded = loaded
        self.created_ms = created_ms
        self.last_fetch_ms = created_ms
        self.status = RUNNING
        self.rows_total = len(loaded.order)
        self.pairs: list[ScanPair] = []
        pair_count = max(1, min(pair_count, self.rows_total or 1))
        bounds = np.linspace(0, self.rows_total, pair_count + 1).astype(int)
        for i in range(pair_count):
            self.pairs.append(ScanPair(int(bounds[i]), int(bounds[i + 1]), int(bounds[i])))
        self.push_timer: Timer | None = None
        self.scan_timer: Timer | None = None

    def finish(self, status: str) -> bool:
        """One-way transition out of RUNNING; returns True if it happened."""
        if self.status != RUNNING:
            return False
        self.status = status
        return True

    @property
    def done(self) -> bool:
        return self.status in _TERMINAL

    def advance(self, chunk_rows: int) -> int:
        """Scan up to ``chunk_rows`` rows spread across the pairs."""
        live = [p for p in self.pairs if not p.exhausted]
        if not live:
            return 0
        per_pair = max(1, chunk_rows // len(live))
        sample = self.loaded.sample
        processed = 0
        for pair in live:
            take = min(per_pair, pair.hi - pair.cursor)
            if take <= 0:
                continue
            rows = self.loaded.order[pair.cursor : pair.cursor + take]
            mask = match_mask(sample.vectors[rows], self.query)
            if mask.any():
                sids, counts = np.unique(sample.stratum_ids[rows][mask], return_counts=True)
                for sid, cnt in zip(sids, counts):
                    key = int(sid)
                    pair.matched_by_stratum[key] = pair.matched_by_stratum.get(key, 0) + int(cnt)
                pair.rows_matched += int(mask.sum())
            pair.cursor += take
            processed += take
        return processed

    @property
    def complete(self) -> bool:
        return all(p.exhausted for p in self.pairs)

    def totals(self) -> tuple[Fraction, float, int, int]:
        """Merge pair accumulators: (weight sum, squared sum, matched, scanned)."""
        counts: dict[int, int] = {}
        matched = 0
        scanned = 0
        for pair in self.pairs:
            scanned += pair.scanned
            matched += pair.rows_matched
            for sid, cnt in pair.matched_by_stratum.items():
                counts[sid] = counts.get(sid, 0) + cnt
        weight = Fraction(0)
        weight_sq = 0.0
        for sid in sorted(counts):
            w = self.loaded.weights[sid]
            weight += counts[sid] * w
            weight_sq += counts[sid] * float(w) ** 2
        return weight, weight_sq, matched, scanned

    def local_estimate(self) -> tuple[float, float, float, int]:
        """(estimate, margin, fraction scanned, rows matched) for this node."""
        weight, weight_sq, matched, scanned = self.totals()
        estimate, variance = scan_extrapolation(
            float(weight), weight_sq, scanned, self.rows_total
        )
        fraction = scanned / self.rows_total if self.rows_total else 1.0
        return estimate, Z_95 * variance**0.5, fraction, matched


class CounterNode:
    def __init__(self, runtime: Runtime, node_id: str, config: CounterConfig):
        self.runtime = runtime
        self.node_id = node_id
        self.config = config
        self.state = "acquiring"
        self.loaded: LoadedSubsample | None = None
        self.queue: dict[str, CounterCollector] = {}
        self.cache: dict[str, tuple[CounterCollector, float]] = {}
        self.peer_weights: dict[str, tuple[int, Fraction]] = {}
        self.info_version = 0
        self.pending_sample_version = 0
        self.seen_sample_version = 0
        self.holds_permit = False
        self.resident_rows = 0
        self.peak_resident_rows = 0
        self.scan_ms_by_report: dict[str, float] = {}
        self.rows_scanned_total = 0
        self.runtime.send(
            config.coordinator_address,
            wire.Register(node_id=node_id, kind="counter", address=runtime.address),
        )
        self.runtime.schedule(config.renew_interval_ms, self._renew_tick)
        self.runtime.schedule(config.maintenance_interval_ms, self._maintenance)

    # -- lease and sample lifecycle

    def _acquire(self):
        self.runtime.send(
            self.config.coordinator_address, wire.AcquireLease(node_id=self.node_id)
        )

    def _renew_tick(self):
        if self.loaded is not None:
            self.runtime.send(
                self.config.coordinator_address,
                wire.RenewLease(
                    node_id=self.node_id,
                    subsample_id=self.loaded.subsample_id,
                    epoch=self.loaded.epoch,
                ),
            )
        else:
            self.runtime.send(
                self.config.coordinator_address, wire.Heartbeat(node_id=self.node_id)
            )
        self.runtime.schedule(self.config.renew_interval_ms, self._renew_tick)

    def _load(self, grant: wire.LeaseGrant):
        try:
            sample = self.config.sample_loader(grant.path)
        except Exception:
            self.runtime.send(
                self.config.coordinator_address,
                wire.ReleaseLease(
                    node_id=self.node_id, subsample_id=grant.subsample_id, epoch=grant.epoch
                ),
            )
            self.state = "acquiring"
            self.runtime.schedule(self.config.retry_ms, self._acquire)
            return
        order = np.arange(sample.num_rows)
        self.runtime.rng().shuffle(order)
        self.info_version += 1
        info = sample.sample_info()
        self.loaded = LoadedSubsample(
            subsample_id=grant.subsample_id,
            sample_id=grant.sample_id,
            epoch=grant.epoch,
            version=self.info_version,
            sample=sample,
            order=order,
            info=info,
            weights=sample.weight_table(),
        )
        self.resident_rows += sample.num_rows
        self.peak_resident_rows = max(self.peak_resident_rows, self.resident_rows)
        self.seen_sample_version = max(self.seen_sample_version, grant.sample_version)
        self.state = "serving"
        if self.holds_permit:
            self.holds_permit = False
            self.runtime.send(
                self.config.coordinator_address, wire.PermitRelease(node_id=self.node_id)
            )
        self._broadcast_info()

    def _unload(self):
        if self.loaded is None:
            return
        self.runtime.send(
            self.config.coordinator_address,
            wire.ReleaseLease(
                node_id=self.node_id,
                subsample_id=self.loaded.subsample_id,
                epoch=self.loaded.epoch,
            ),
        )
        self.resident_rows -= self.loaded.sample.num_rows
        self.loaded = None

    def _broadcast_info(self):
        assert self.loaded is not None
        info = self.loaded.info
        self.runtime.send(
            self.config.coordinator_address,
            wire.SampleInformation(
                node_id=self.node_id,
                sample_id=self.loaded.sample_id,
                version=self.loaded.version,
                row_count=info.row_count,
                stratum_counts={str(k): v for k, v in info.stratum_counts.items()},
                total_weight=info.total_weight,
            ),
        )

    def _begin_drain(self):
        self.state = "draining"
        self._check_drained()

    def _check_drained(self):
        if self.state != "draining":
            return
        if any(not c.done for c in self.queue.values()):
            return
        # old and new sub-samples are never resident together
        self._unload()
        self.state = "reloading"
        self._acquire()

    # -- message handling

    def _record_peer(self, node_id: str, version: int, total_weight: Fraction):
        if node_id == self.node_id:
            return
        prior = self.peer_weights.get(node_id)
        if prior is None or prior[0] <= version:
            self.peer_weights[node_id] = (version, total_weight)

    def known_cluster_weight(self) -> Fraction:
        """Own slice plus every peer slice heard about over broadcasts."""
        total = self.loaded.info.total_weight if self.loaded else Fraction(0)
        for _, weight in self.peer_weights.values():
            total += weight
        return total

    def on_message(self, message: wire.Message) -> None:
        if isinstance(message, wire.RegisterAck):
            for node_id, payload in message.sample_infos.items():
                self._record_peer(node_id, payload["version"], payload["total_weight"])
            if message.current_sample and self.loaded is None:
                self.pending_sample_version = message.current_sample["version"]
                self._acquire()
        elif isinstance(message, wire.SampleInformation):
            self._record_peer(message.node_id, message.version, message.total_weight)
        elif isinstance(message, wire.MemberEvent):
            if not message.alive:
                self.peer_weights.pop(message.node_id, None)
        elif isinstance(message, wire.SampleEvent):
            self._on_sample_event(message)
        elif isinstance(message, wire.LeaseGrant):
            self._on_lease_grant(message)
        elif isinstance(message, wire.LeaseNone):
            if self.loaded is None:
                self.runtime.schedule(max(message.retry_after_ms, 1.0), self._acquire)
        elif isinstance(message, wire.LeaseDenied):
            self._on_lease_denied()
        elif isinstance(message, wire.DistributeRequest):
            self._on_distribute(message)
        elif isinstance(message, wire.InitiateReport):
            self._on_initiate(message)
        elif isinstance(message, wire.FetchResult):
            self._on_fetch(message)
        elif isinstance(message, wire.Cancel):
            self._on_cancel(message)
        elif isinstance(message, wire.PermitGrant):
            self.holds_permit = True
            self._begin_drain()

    def _on_sample_event(self, message: wire.SampleEvent):
        self.pending_sample_version = max(self.pending_sample_version, message.version)
        if self.loaded is None:
            if self.state == "acquiring":
                self._acquire()
            return
        if message.version <= self.seen_sample_version:
            return
        # keep serving from the superseded sample until a permit arrives
        if self.state == "serving":
            self.runtime.send(
                self.config.coordinator_address, wire.PermitRequest(node_id=self.node_id)
            )

    def _on_lease_grant(self, grant: wire.LeaseGrant):
        if self.loaded is not None and grant.subsample_id == self.loaded.subsample_id:
            self.loaded.epoch = grant.epoch  # renewal
            return
        if self.loaded is None and self.state in ("acquiring", "reloading"):
            self._load(grant)

    def _on_lease_denied(self):
        if self.loaded is None:
            return
        # lease lost: stop serving this sub-sample so nobody double-counts it
        for collector in list(self.queue.values()):
            self._finish(collector, CANCELLED)
        self.resident_rows -= self.loaded.sample.num_rows
        self.loaded = None
        self.state = "acquiring"
        self._acquire()

    def _on_distribute(self, message: wire.DistributeRequest):
        if message.report_id in self.queue or message.report_id in self.cache:
            self.runtime.send(
                message.aggregator_address,
                wire.DistributeAck(
                    report_id=message.report_id,
                    node_id=self.node_id,
                    accepted=True,
                    reason="duplicate",
                ),
            )
            return
        if self.state != "serving" or self.loaded is None:
            self.runtime.send(
                message.aggregator_address,
                wire.DistributeAck(
                    report_id=message.report_id,
                    node_id=self.node_id,
                    accepted=False,
                    reason=self.state,
                ),
            )
            return
        self._start_collector(
            message.report_id,
            message.query,
            message.error_threshold,
            message.aggregator_address,
            message.push_interval_ms,
        )
        self.runtime.send(
            message.aggregator_address,
            wire.DistributeAck(
                report_id=message.report_id, node_id=self.node_id, accepted=True, reason=""
            ),
        )

    def _on_initiate(self, message: wire.InitiateReport):
        """Standalone mode: a counter can serve a report all by itself."""
        if self.state != "serving" or self.loaded is None:
            self.runtime.send(
                message.reply_to,
                wire.InitiateAck(report_id=message.report_id, accepted=False, reason=self.state),
            )
            return
        if message.report_id not in self.queue and message.report_id not in self.cache:
            push_interval = float(message.fetch_hints.get("push_interval_ms", 0.0))
            self._start_collector(
                message.report_id, message.query, message.error_threshold, "", push_interval
            )
        self.runtime.send(
            message.reply_to,
            wire.InitiateAck(report_id=message.report_id, accepted=True, reason=""),
        )

    def _start_collector(
        self,
        report_id: str,
        query: Query,
        threshold: float,
        aggregator_address: str,
        push_interval_ms: float,
    ):
        assert self.loaded is not None
        collector = CounterCollector(
            report_id=report_id,
            query=query,
            threshold=threshold,
            aggregator_address=aggregator_address,
            push_interval_ms=push_interval_ms,
            loaded=self.loaded,
            created_ms=self.runtime.now_ms(),
            pair_count=self.config.pair_count,
        )
        self.queue[report_id] = collector
        collector.scan_timer = self.runtime.schedule(0.0, lambda: self._scan_tick(report_id))
        if aggregator_address and push_interval_ms > 0:
            collector.push_timer = self.runtime.schedule(
                push_interval_ms, lambda: self._push_tick(report_id)
            )

    def _scan_tick(self, report_id: str):
        collector = self.queue.get(report_id)
        if collector is None or collector.status != RUNNING:
            return
        processed = collector.advance(self.config.scan_chunk_rows)
        cost = processed * self.config.per_row_scan_cost_ms
        self.scan_ms_by_report[report_id] = self.scan_ms_by_report.get(report_id, 0.0) + cost
        self.rows_scanned_total += processed
        if collector.threshold > 0:
            estimate, margin, _, _ = collector.local_estimate()
            if estimate > 0 and margin / estimate <= collector.threshold:
                self._finish(collector, DONE_THRESHOLD)
                return
        if collector.complete:
            self._finish(collector, DONE_FULL_SCAN)
            return
        collector.scan_timer = self.runtime.schedule(
            cost, lambda: self._scan_tick(report_id)
        )

    def _push_tick(self, report_id: str):
        collector = self.queue.get(report_id)
        if collector is None or collector.status != RUNNING:
            return
        self._push_partial(collector)
        collector.push_timer = self.runtime.schedule(
            collector.push_interval_ms, lambda: self._push_tick(report_id)
        )

    def _push_partial(self, collector: CounterCollector):
        if not collector.aggregator_address:
            return
        weight, weight_sq, matched, scanned = collector.totals()
        self.runtime.send(
            collector.aggregator_address,
            wire.PartialResult(
                report_id=collector.report_id,
                node_id=self.node_id,
                matched_weight=weight,
                matched_weight_sq=weight_sq,
                rows_matched=matched,
                rows_scanned=scanned,
                rows_total=collector.rows_total,
                sample_info_version=collector.loaded.version,
            ),
        )

    def _finish(self, collector: CounterCollector, status: str):
        if not collector.finish(status):
            return
        if collector.push_timer is not None:
            collector.push_timer.cancel()
        if collector.scan_timer is not None:
            collector.scan_timer.cancel()
        self._push_partial(collector)  # cumulative, so the final push says it all
        self.queue.pop(collector.report_id, None)
        self.cache[collector.report_id] = (collector, self.runtime.now_ms())
        self._check_drained()

    def _on_fetch(self, message: wire.FetchResult):
        collector = self.queue.get(message.report_id)
        if collector is None and message.report_id in self.cache:
            collector = self.cache[message.report_id][0]
        if collector is None:
            self.runtime.send(
                message.reply_to,
                wire.ErrorReply(
                    request_type="fetch_result",
                    message=f"unknown report {message.report_id}",
                ),
            )
            return
        collector.last_fetch_ms = self.runtime.now_ms()
        estimate, margin, fraction, matched = collector.local_estimate()
        own = collector.loaded.info.total_weight
        if own > 0:
            # scale the node-local slice up to the whole cluster's sample
            scale = float(self.known_cluster_weight() / own)
            estimate *= scale
            margin *= scale
        status = RUNNING if collector.status == RUNNING else (
            CANCELLED if collector.status == CANCELLED else "done"
        )
        self.runtime.send(
            message.reply_to,
            wire.ResultEnvelope(
                report_id=message.report_id,
                value=estimate,
                margin=margin,
                fraction_scanned=fraction,
                rows_matched=matched,
                status=status,
            ),
        )

    def _on_cancel(self, message: wire.Cancel):
        collector = self.queue.get(message.report_id)
        if collector is not None:
            self._finish(collector, CANCELLED)

    def _maintenance(self):
        now = self.runtime.now_ms()
        for collector in list(self.queue.values()):
            pull_mode = not collector.aggregator_address or collector.push_interval_ms <= 0
            idle_for = now - max(collector.created_ms, collector.last_fetch_ms)
            if pull_mode and collector.status == RUNNING and idle_for > self.config.idle_window_ms:
                self._finish(collector, DONE_IDLE)
        for report_id, (collector, done_at) in list(self.cache.items()):
            if now - done_at > self.config.cache_retention_ms:
                del self.cache[report_id]
        self.runtime.schedule(self.config.maintenance_interval_ms, self._maintenance)
