"""Coordination service: sub-sample leases, staggered-reload permits, the
aggregator-count semaphore, membership, and new-sample notifications.

``CoordinatorState`` is a pure, clock-explicit core (the safety suite drives
it directly); ``CoordinatorNode`` wraps it behind the framed protocol.  The
coordinator is a single process and a declared single point of failure:
replicating it is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from . import wire
from .runtime import Runtime

Effect = tuple[str, wire.Message]  # destination node id, message


@dataclass
class CoordinatorConfig:
    lease_duration_ms: float = 10_000.0
    liveness_timeout_ms: float = 12_000.0
    maintenance_interval_ms: float = 1_000.0
    aggregator_capacity: int = 4
    retry_after_ms: float = 2_000.0


@dataclass
class Lease:
    subsample_id: str
    holder: str
    epoch: int
    expires_at_ms: float
    sample_id: str
    sample_version: int
    superseded: bool = False


@dataclass
class NodeRecord:
    node_id: str
    kind: str  # counter | aggregator
    address: str
    last_seen_ms: float
    alive: bool = True


class CoordinatorState:
    """All coordination decisions, totally ordered by the caller."""

    def __init__(self, config: CoordinatorConfig | None = None):
        self.config = config or CoordinatorConfig()
        self.nodes: dict[str, NodeRecord] = {}
        self.leases: dict[str, Lease] = {}
        self._epochs: dict[str, int] = {}
        self.permit_holders: set[str] = set()
        self.permit_waiters: list[str] = []
        self.slot_holders: set[str] = set()
        self.slot_waiters: list[str] = []
        self.sample_id: str | None = None
        self.sample_version: int = 0
        self.manifest: dict[str, dict] = {}
        self.schema_json: str = ""
        self.sample_infos: dict[str, dict] = {}

    # -- membership

    def live_counters(self) -> list[str]:
        return sorted(
            n for n, rec in self.nodes.items() if rec.kind == "counter" and rec.alive
        )

    def members_payload(self) -> dict:
        return {
            n: {"kind": r.kind, "address": r.address}
            for n, r in self.nodes.items()
            if r.alive
        }

    def register(self, now: float, node_id: str, kind: str, address: str) -> list[Effect]:
        fresh = node_id not in self.nodes or not self.nodes[node_id].alive
        self.nodes[node_id] = NodeRecord(node_id, kind, address, now)
        effects: list[Effect] = [
            (
                node_id,
                wire.RegisterAck(
                    members=self.members_payload(),
                    sample_infos=dict(self.sample_infos),
                    current_sample=self._current_sample_payload(),
                    schema_json=self.schema_json,
                ),
            )
        ]
        if fresh:
            event = wire.MemberEvent(node_id=node_id, kind=kind, address=address, alive=True)
            effects += [(n, event) for n in self._others(node_id)]
        effects += self._promote_permits()
        return effects

    def touch(self, now: float, node_id: str) -> None:
        rec = self.nodes.get(node_id)
        if rec is not None:
            rec.last_seen_ms = now
            rec.alive = True

    def _others(self, node_id: str) -> list[str]:
        return sorted(n for n, r in self.nodes.items() if r.alive and n != node_id)

    # -- sample publication

    def _current_sample_payload(self) -> dict:
        if self.sample_id is None:
            return {}
        return {
            "sample_id": self.sample_id,
            "version": self.sample_version,
            "manifest": self.manifest,
        }

    def publish(
        self, now: float, sample_id: str, version: int, manifest: dict, schema_json: str
    ) -> list[Effect]:
        if sample_id == self.sample_id:
            return []  # double-publish of the same sample is idempotent
        self.sample_id = sample_id
        self.sample_version = version if version > self.sample_version else self.sample_version + 1
        self.manifest = dict(manifest)
        if schema_json:
            self.schema_json = schema_json
        for lease in self.leases.values():
            if lease.sample_version < self.sample_version:
                lease.superseded = True
        event = wire.SampleEvent(
            sample_id=sample_id, version=self.sample_version, schema_json=self.schema_json
        )
        return [(n, event) for n in sorted(self.nodes) if self.nodes[n].alive]

    # -- leases

    def _unexpired(self, now: float, lease: Lease) -> bool:
        return lease.expires_at_ms > now

    def acquire_lease(self, now: float, node_id: str) -> list[Effect]:
        self.touch(now, node_id)
        self.expire(now)
        if self.sample_id is None:
            return [(node_id, wire.LeaseNone(node_id=node_id, retry_after_ms=self.config.retry_after_ms))]
        held = [
            l
            for l in self.leases.values()
            if l.holder == node_id
            and self._unexpired(now, l)
            and l.sample_version == self.sample_version
        ]
        if held:
            lease = held[0]  # re-request by the holder renews idempotently
            lease.expires_at_ms = now + self.config.lease_duration_ms
            return [(node_id, self._grant_message(node_id, lease))]
        for sid in sorted(self.manifest):
            current = self.leases.get(sid)
            if current is not None and self._unexpired(now, current):
                continue
            epoch = self._epochs.get(sid, 0) + 1
            self._epochs[sid] = epoch
            lease = Lease(
                subsample_id=sid,
                holder=node_id,
                epoch=epoch,
                expires_at_ms=now + self.config.lease_duration_ms,
                sample_id=self.sample_id,
                sample_version=self.sample_version,
            )
            self.leases[sid] = lease
            return [(node_id, self._grant_message(node_id, lease))]
        return [(node_id, wire.LeaseNone(node_id=node_id, retry_after_ms=self.config.retry_after_ms))]

    def _grant_message(self, node_id: str, lease: Lease) -> wire.LeaseGrant:
        return wire.LeaseGrant(
            node_id=node_id,
            subsample_id=lease.subsample_id,
            path=self.manifest.get(lease.subsample_id, {}).get("path", ""),
            sample_id=lease.sample_id,
            sample_version=lease.sample_version,
            epoch=lease.epoch,
            expires_at_ms=lease.expires_at_ms,
        )

    def renew_lease(self, now: float, node_id: str, subsample_id: str, epoch: int) -> list[Effect]:
        self.touch(now, node_id)
        lease = self.leases.get(subsample_id)
        if (
            lease is None
            or lease.holder != node_id
            or lease.epoch != epoch
            or not self._unexpired(now, lease)
        ):
            return [
                (
                    node_id,
                    wire.LeaseDenied(
                        node_id=node_id, subsample_id=subsample_id, reason="lease lost"
                    ),
                )
            ]
        lease.expires_at_ms = now + self.config.lease_duration_ms
        return [(node_id, self._grant_message(node_id, lease))]

    def release_lease(self, now: float, node_id: str, subsample_id: str, epoch: int) -> list[Effect]:
        self.touch(now, node_id)
        lease = self.leases.get(subsample_id)
        if lease is not None and lease.holder == node_id and lease.epoch == epoch:
            del self.leases[subsample_id]
        return []

    # -- reload permits (staggered loading)

    def permit_cap(self) -> int:
        k = len(self.live_counters())
        return max(1, k // 2)

    def request_permit(self, now: float, node_id: str) -> list[Effect]:
        self.touch(now, node_id)
        if node_id in self.permit_holders:
            return [(node_id, wire.PermitGrant(node_id=node_id))]
        if len(self.permit_holders) < self.permit_cap():
            self.permit_holders.add(node_id)
            return [(node_id, wire.PermitGrant(node_id=node_id))]
        if node_id not in self.permit_waiters:
            self.permit_waiters.append(node_id)
        return []

    def release_permit(self, now: float, node_id: str) -> list[Effect]:
        self.touch(now, node_id)
        self.permit_holders.discard(node_id)
        return self._promote_permits()

    def _promote_permits(self) -> list[Effect]:
        effects: list[Effect] = []
        while self.permit_waiters and len(self.permit_holders) < self.permit_cap():
            nxt = self.permit_waiters.pop(0)
            self.permit_holders.add(nxt)
            effects.append((nxt, wire.PermitGrant(node_id=nxt)))
        return effects

    # -- aggregator slots

    def request_slot(self, now: float, node_id: str) -> list[Effect]:
        self.touch(now, node_id)
        if node_id in self.slot_holders:
            return [(node_id, wire.SlotDecision(node_id=node_id, granted=True))]
        if len(self.slot_holders) < self.config.aggregator_capacity:
            self.slot_holders.add(node_id)
            return [(node_id, wire.SlotDecision(node_id=node_id, granted=True))]
        if node_id not in self.slot_waiters:
            self.slot_waiters.append(node_id)
        return [(node_id, wire.SlotDecision(node_id=node_id, granted=False))]

    def _promote_slots(self) -> list[Effect]:
        effects: list[Effect] = []
        while self.slot_waiters and len(self.slot_holders) < self.config.aggregator_capacity:
            nxt = self.slot_waiters.pop(0)
            if not (self.nodes.get(nxt) and self.nodes[nxt].alive):
                continue
            self.slot_holders.add(nxt)
            effects.append((nxt, wire.SlotDecision(node_id=nxt, granted=True)))
        return effects

    # -- sample information relay

    def record_sample_info(self, now: float, info: wire.SampleInformation) -> list[Effect]:
        self.touch(now, info.node_id)
        prior = self.sample_infos.get(info.node_id)
        if prior is not None and prior["version"] >= info.version:
            return []
        self.sample_infos[info.node_id] = {
            "sample_id": info.sample_id,
            "version": info.version,
            "row_count": info.row_count,
            "stratum_counts": dict(info.stratum_counts),
            "total_weight": info.total_weight,
        }
        return [(n, info) for n in self._others(info.node_id)]

    # -- failure detection

    def expire(self, now: float) -> list[Effect]:
        effects: list[Effect] = []
        for sid, lease in list(self.leases.items()):
            if not self._unexpired(now, lease):
                del self.leases[sid]
        for node_id, rec in sorted(self.nodes.items()):
            if rec.alive and now - rec.last_seen_ms > self.config.liveness_timeout_ms:
                rec.alive = False
                self.permit_holders.discard(node_id)
                if node_id in self.permit_waiters:
                    self.permit_waiters.remove(node_id)
                self.slot_holders.discard(node_id)
                if node_id in self.slot_waiters:
                    self.slot_waiters.remove(node_id)
                self.sample_infos.pop(node_id, None)
                for sid, lease in list(self.leases.items()):
                    if lease.holder == node_id:
                        del self.leases[sid]
                event = wire.MemberEvent(
                    node_id=node_id, kind=rec.kind, address=rec.address, alive=False
                )
                effects += [(n, event) for n in self._others(node_id)]
        effects += self._promote_permits()
        effects += self._promote_slots()
        return effects

    # -- invariants used by the model-check suite

    def check_invariants(self, now: float) -> None:
        holders: dict[str, list[str]] = {}
        for sid, lease in self.leases.items():
            if self._unexpired(now, lease):
                holders.setdefault(sid, []).append(lease.holder)
        for sid, hs in holders.items():
            if len(hs) > 1:
                raise AssertionError(f"double lease on {sid}: {hs}")
        if len(self.permit_holders) > max(1, self.permit_cap()):
            raise AssertionError(
                f"permit cap exceeded: {len(self.permit_holders)} > {self.permit_cap()}"
            )
        if len(self.slot_holders) > self.config.aggregator_capacity:
            raise AssertionError("aggregator slot capacity exceeded")


class CoordinatorNode:
    """Framed-protocol wrapper; every request is serialized through here."""

    def __init__(self, runtime: Runtime, config: CoordinatorConfig | None = None):
        self.runtime = runtime
        self.state = CoordinatorState(config)
        self._maintenance()

    def _maintenance(self):
        self._emit(self.state.expire(self.runtime.now_ms()))
        self.runtime.schedule(self.state.config.maintenance_interval_ms, self._maintenance)

    def _emit(self, effects: Iterable[Effect]) -> None:
        for node_id, message in effects:
            rec = self.state.nodes.get(node_id)
            if rec is not None:
                self.runtime.send(rec.address, message)

    def publish_sample(self, sample_id: str, version: int, manifest: dict, schema_json: str = "") -> None:
        """Local entry point used by the CLI and the harness."""
        self._emit(self.state.publish(self.runtime.now_ms(), sample_id, version, manifest, schema_json))

    def on_message(self, message: wire.Message) -> None:
        now = self.runtime.now_ms()
        state = self.state
        if isinstance(message, wire.Register):
            effects = state.register(now, message.node_id, message.kind, message.address)
        elif isinstance(message, wire.AcquireLease):
            effects = state.acquire_lease(now, message.node_id)
        elif isinstance(message, wire.RenewLease):
            effects = state.renew_lease(now, message.node_id, message.subsample_id, message.epoch)
        elif isinstance(message, wire.ReleaseLease):
            effects = state.release_lease(now, message.node_id, message.subsample_id, message.epoch)
        elif isinstance(message, wire.PermitRequest):
            effects = state.request_permit(now, message.node_id)
        elif isinstance(message, wire.PermitRelease):
            effects = state.release_permit(now, message.node_id)
        elif isinstance(message, wire.SlotRequest):
            effects = state.request_slot(now, message.node_id)
        elif isinstance(message, wire.SampleInformation):
            effects = state.record_sample_info(now, message)
        elif isinstance(message, wire.PublishSample):
            effects = state.publish(
                now, message.sample_id, message.version, message.manifest, message.schema_json
            )
        elif isinstance(message, wire.Heartbeat):
            state.touch(now, message.node_id)
            effects = []
        else:
            effects = []
        self._emit(effects)
