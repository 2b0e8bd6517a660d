"""Transport and clock abstraction so node code runs unmodified under the
deterministic single-threaded simulator and under real TCP.

Nodes address each other by opaque strings: the node id itself under
simulation, ``host:port`` on the wire.  All replies route through addresses
carried inside messages, never transport-level peers.
"""

from __future__ import annotations

import heapq
import random
import socket
import socketserver
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Protocol

from . import wire


class Node(Protocol):
    def on_message(self, message: wire.Message) -> None: ...


class Timer:
    __slots__ = ("cancelled", "_impl")

    def __init__(self, impl=None):
        self.cancelled = False
        self._impl = impl

    def cancel(self):
        self.cancelled = True
        if self._impl is not None:
            self._impl.cancel()


class Runtime(Protocol):
    """What a node may ask of its host environment."""

    address: str

    def now_ms(self) -> float: ...

    def send(self, dest: str, message: wire.Message) -> None: ...

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> Timer: ...

    def rng(self) -> random.Random: ...


# --- deterministic simulation ------------------------------------------------


@dataclass
class NetLogRecord:
    at_ms: float
    event: str  # send | deliver | drop | dead-drop
    src: str
    dst: str
    msg_type: str
    latency_ms: float = 0.0
    tag: str = ""  # report id when the message carries one


@dataclass
class SimNetwork:
    """Single-threaded event loop with per-message latency and fault injection."""

    seed: int = 0
    latency_ms: float = 1.0
    drop_probability: float = 0.0
    log: list[NetLogRecord] = field(default_factory=list)
    keep_log: bool = True

    def __post_init__(self):
        self._now = 0.0
        self._seq = 0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._nodes: dict[str, Node] = {}
        self._alive: dict[str, bool] = {}
        self._drop_rng = random.Random(self.seed ^ 0x5EED)
        self.drop_filter: Callable[[str, str, wire.Message], bool] | None = None

    # -- wiring

    def add_node(self, address: str, node: Node | None = None) -> "SimRuntime":
        """Reserve an address; bind the node now or later via :meth:`bind`."""
        if address in self._nodes:
            raise ValueError(f"address {address!r} already in use")
        self._nodes[address] = node
        self._alive[address] = True
        return SimRuntime(self, address)

    def bind(self, address: str, node: Node) -> None:
        self._nodes[address] = node

    def kill(self, address: str) -> None:
        self._alive[address] = False

    def revive(self, address: str) -> None:
        self._alive[address] = True

    def is_alive(self, address: str) -> bool:
        return self._alive.get(address, False)

    # -- clock and scheduling

    def now_ms(self) -> float:
        return self._now

    def at(self, when_ms: float, fn: Callable[[], None]) -> Timer:
        timer = Timer()

        def guarded():
            if not timer.cancelled:
                fn()

        self._seq += 1
        heapq.heappush(self._heap, (max(when_ms, self._now), self._seq, guarded))
        return timer

    def send(self, src: str, dest: str, message: wire.Message) -> None:
        # encode/decode on every hop keeps the sim honest about the wire format
        frame = wire.encode(message)
        if not self._alive.get(src, False):
            return
        record = NetLogRecord(
            self._now,
            "send",
            src,
            dest,
            message.TYPE,
            self.latency_ms,
            tag=str(getattr(message, "report_id", "")),
        )
        dropped = self._drop_rng.random() < self.drop_probability
        if self.drop_filter is not None and self.drop_filter(src, dest, message):
            dropped = True
        if dropped:
            record.event = "drop"
            if self.keep_log:
                self.log.append(record)
            return
        if self.keep_log:
            self.log.append(record)

        def deliver():
            node = self._nodes.get(dest)
            if node is None or not self._alive.get(dest, False):
                if self.keep_log:
                    self.log.append(
                        NetLogRecord(self._now, "dead-drop", src, dest, message.TYPE)
                    )
                return
            if self.keep_log:
                self.log.append(
                    NetLogRecord(self._now, "deliver", src, dest, message.TYPE)
                )
            node.on_message(wire.decode(frame))

        self.at(self._now + self.latency_ms, deliver)

    def run(self, until_ms: float | None = None, max_events: int = 2_000_000) -> float:
        """Drain events in (time, sequence) order; returns the final clock."""
        events = 0
        while self._heap:
            when, _, fn = self._heap[0]
            if until_ms is not None and when > until_ms:
                break
            heapq.heappop(self._heap)
            self._now = max(self._now, when)
            fn()
            events += 1
            if events > max_events:
                raise RuntimeError(f"simulation exceeded {max_events} events")
        if until_ms is not None:
            self._now = max(self._now, until_ms)
        return self._now

    def idle(self) -> bool:
        return not self._heap


class SimRuntime:
    def __init__(self, network: SimNetwork, address: str):
        self.network = network
        self.address = address
        self._rng = random.Random(network.seed ^ zlib.crc32(address.encode()))

    def now_ms(self) -> float:
        return self.network.now_ms()

    def send(self, dest: str, message: wire.Message) -> None:
        self.network.send(self.address, dest, message)

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> Timer:
        address = self.address

        def if_alive():
            if self.network.is_alive(address):
                fn()

        return self.network.at(self.network.now_ms() + delay_ms, if_alive)

    def rng(self) -> random.Random:
        return self._rng


# --- real TCP transport -------------------------------------------------------


class TcpRuntime:
    """Thread-per-connection server; node handlers run under one node lock."""

    def __init__(self, node_id: str, host: str = "127.0.0.1", port: int = 0):
        self.node_id = node_id
        self._node: Node | None = None
        self._lock = threading.RLock()
        self._rng = random.Random(zlib.crc32(node_id.encode()))
        self._epoch = time.monotonic()
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                reader = wire.FrameReader()
                while True:
                    try:
                        data = self.request.recv(65536)
                    except OSError:
                        return
                    if not data:
                        return
                    for message in reader.feed(data):
                        outer._dispatch(message)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.address = "%s:%d" % self._server.server_address
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"{node_id}-server", daemon=True
        )
        self._timers: set[threading.Timer] = set()
        self._closed = False

    def attach(self, node: Node) -> None:
        self._node = node
        self._thread.start()

    def _dispatch(self, message: wire.Message) -> None:
        if self._node is None or self._closed:
            return
        with self._lock:
            self._node.on_message(message)

    def now_ms(self) -> float:
        return (time.monotonic() - self._epoch) * 1000.0

    def send(self, dest: str, message: wire.Message) -> None:
        host, _, port = dest.rpartition(":")
        try:
            with socket.create_connection((host, int(port)), timeout=5.0) as conn:
                conn.sendall(wire.encode(message))
        except OSError:
            # unreachable peers are business as usual; cumulative partials
            # and lease expiry absorb the loss
            pass

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> Timer:
        impl = None

        def locked():
            self._timers.discard(impl)
            if not self._closed:
                with self._lock:
                    fn()

        impl = threading.Timer(delay_ms / 1000.0, locked)
        impl.daemon = True
        impl.start()
        self._timers.add(impl)
        return Timer(impl)

    def rng(self) -> random.Random:
        return self._rng

    def call_locked(self, fn: Callable[[], object]):
        """Run a function under the node lock (gateway and CLI entry point)."""
        with self._lock:
            return fn()

    def close(self) -> None:
        self._closed = True
        for t in list(self._timers):
            t.cancel()
        self._server.shutdown()
        self._server.server_close()
