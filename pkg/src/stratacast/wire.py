"""Message vocabulary and framing for counter/aggregator/coordinator traffic.

Frames are a 4-byte big-endian length prefix followed by a canonical JSON
object (sorted keys, no whitespace) carrying a ``type`` discriminator. Exact
rationals ride as ``{"$frac": [num, den]}`` so weight sums merge without
floating-point drift; queries ride as ``{"$query": {...}}``.

Partial results always carry cumulative totals, never deltas: losing any one
push is harmless as long as a later one lands.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Any, ClassVar, Iterator

from .query import Query


class ProtocolError(Exception):
    """Malformed frame or unknown message type."""


class NeedMoreBytes(Exception):
    """The buffer does not yet hold a complete frame."""


_REGISTRY: dict[str, type["Message"]] = {}


@dataclass(frozen=True)
class Message:
    TYPE: ClassVar[str] = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.TYPE:
            _REGISTRY[cls.TYPE] = cls


def _encode_value(value: Any) -> Any:
    if isinstance(value, Fraction):
        return {"$frac": [value.numerator, value.denominator]}
    if isinstance(value, Query):
        return {"$query": {str(j): sorted(v) for j, v in value.constraints}}
    if isinstance(value, dict):
        return {str(k): _encode_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode_value(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    raise ProtocolError(f"cannot encode value of type {type(value).__name__}")


def _decode_value(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"$frac"}:
            num, den = value["$frac"]
            return Fraction(int(num), int(den))
        if set(value) == {"$query"}:
            return Query.of({int(j): v for j, v in value["$query"].items()})
        return {k: _decode_value(v) for k, v in value.items()}

    if isinstance(value, list):
        return [_decode_value(v) for v in value]
    return value


def encode(message: Message) -> bytes:
    payload: dict[str, Any] = {"type": message.TYPE}
    for f in fields(message):
        payload[f.name] = _encode_value(getattr(message, f.name))
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def decode(buffer: bytes) -> Message:
    """Decode one complete frame; raises NeedMoreBytes on a short buffer."""
    message, _ = decode_frame(buffer)
    return message


def decode_frame(buffer: bytes) -> tuple[Message, int]:
    """Decode the first frame in ``buffer``; returns (message, bytes used)."""
    if len(buffer) < 4:
        raise NeedMoreBytes(f"have {len(buffer)} bytes, need 4 for the prefix")
    (length,) = struct.unpack(">I", buffer[:4])
    if len(buffer) < 4 + length:
        raise NeedMoreBytes(f"have {len(buffer) - 4} payload bytes, need {length}")
    try:
        payload = json.loads(buffer[4 : 4 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame payload: {exc}") from exc
    if not isinstance(payload, dict) or "type" not in payload:
        raise ProtocolError("frame payload lacks a type discriminator")
    type_name = payload.pop("type")
    cls = _REGISTRY.get(type_name)
    if cls is None:
        raise ProtocolError(f"unknown message type {type_name!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in payload:
            raise ProtocolError(f"{type_name}: missing field {f.name!r}")
        kwargs[f.name] = _decode_value(payload[f.name])
    try:
        return cls(**kwargs), 4 + length
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"{type_name}: bad payload: {exc}") from exc


def iter_frames(buffer: bytes) -> Iterator[Message]:
    """Decode a concatenation of complete frames."""
    offset = 0
    view = memoryview(buffer)
    while offset < len(buffer):
        message, used = decode_frame(bytes(view[offset:]))
        offset += used
        yield message


class FrameReader:
    """Incremental decoder for a stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            try:
                message, used = decode_frame(bytes(self._buf))
            except NeedMoreBytes:
                return out
            del self._buf[:used]
            out.append(message)


# --- report traffic -------------------------------------------------------


@dataclass(frozen=True)
class InitiateReport(Message):
    TYPE = "initiate_report"
    report_id: str
    query: Query
    error_threshold: float
    fetch_hints: dict
    reply_to: str


@dataclass(frozen=True)
class DistributeRequest(Message):
    TYPE = "distribute_request"
    report_id: str
    query: Query
    aggregator_address: str
    push_interval_ms: float
    error_threshold: float


@dataclass(frozen=True)
class DistributeAck(Message):
    TYPE = "distribute_ack"
    report_id: str
    node_id: str
    accepted: bool
    reason: str


@dataclass(frozen=True)
class PartialResult(Message):
    TYPE = "partial_result"
    report_id: str
    node_id: str
    matched_weight: Fraction
    matched_weight_sq: float
    rows_matched: int
    rows_scanned: int
    rows_total: int
    sample_info_version: int


@dataclass(frozen=True)
class FetchResult(Message):
    TYPE = "fetch_result"
    report_id: str
    reply_to: str


@dataclass(frozen=True)
class ResultEnvelope(Message):
    TYPE = "result_envelope"
    report_id: str
    value: float
    margin: float
    fraction_scanned: float
    rows_matched: int
    status: str  # running | done | cancelled


@dataclass(frozen=True)
class SampleInformation(Message):
    TYPE = "sample_information"
    node_id: str
    sample_id: str
    version: int
    row_count: int
    stratum_counts: dict  # stratum id (str) -> row count
    total_weight: Fraction


@dataclass(frozen=True)
class Cancel(Message):
    TYPE = "cancel"
    report_id: str
    reason: str


@dataclass(frozen=True)
class ErrorReply(Message):
    TYPE = "error_reply"
    request_type: str
    message: str


@dataclass(frozen=True)
class InitiateAck(Message):
    TYPE = "initiate_ack"
    report_id: str
    accepted: bool
    reason: str


# --- coordination traffic ---------------------------------------------------


@dataclass(frozen=True)
class Register(Message):
    TYPE = "register"
    node_id: str
    kind: str  # counter | aggregator
    address: str


@dataclass(frozen=True)
class RegisterAck(Message):
    TYPE = "register_ack"
    members: dict  # node id -> {kind, address}
    sample_infos: dict  # node id -> sample information payload
    current_sample: dict  # {} until a sample has been published
    schema_json: str


@dataclass(frozen=True)
class MemberEvent(Message):
    TYPE = "member_event"
    node_id: str
    kind: str
    address: str
    alive: bool


@dataclass(frozen=True)
class AcquireLease(Message):
    TYPE = "acquire_lease"
    node_id: str


@dataclass(frozen=True)
class LeaseGrant(Message):
    TYPE = "lease_grant"
    node_id: str
    subsample_id: str
    path: str
    sample_id: str
    sample_version: int
    epoch: int
    expires_at_ms: float


@dataclass(frozen=True)
class LeaseNone(Message):
    TYPE = "lease_none"
    node_id: str
    retry_after_ms: float


@dataclass(frozen=True)
class RenewLease(Message):
    TYPE = "renew_lease"
    node_id: str
    subsample_id: str
    epoch: int


@dataclass(frozen=True)
class LeaseDenied(Message):
    TYPE = "lease_denied"
    node_id: str
    subsample_id: str
    reason: str


@dataclass(frozen=True)
class ReleaseLease(Message):
    TYPE = "release_lease"
    node_id: str
    subsample_id: str
    epoch: int


@dataclass(frozen=True)
class PermitRequest(Message):
    TYPE = "permit_request"
    node_id: str


@dataclass(frozen=True)
class PermitGrant(Message):
    TYPE = "permit_grant"
    node_id: str


@dataclass(frozen=True)
class PermitRelease(Message):
    TYPE = "permit_release"
    node_id: str


@dataclass(frozen=True)
class SlotRequest(Message):
    TYPE = "slot_request"
    node_id: str


@dataclass(frozen=True)
class SlotDecision(Message):
    TYPE = "slot_decision"
    node_id: str
    granted: bool


@dataclass(frozen=True)
class PublishSample(Message):
    TYPE = "publish_sample"
    sample_id: str
    version: int
    manifest: dict  # subsample id -> {path, row_count}
    schema_json: str


@dataclass(frozen=True)
class SampleEvent(Message):
    TYPE = "sample_event"
    sample_id: str
    version: int
    schema_json: str


@dataclass(frozen=True)
class Heartbeat(Message):
    TYPE = "heartbeat"
    node_id: str
