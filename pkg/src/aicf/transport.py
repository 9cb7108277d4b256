"""Clocks, schedulers and client links.

Framework components (Register service, control engine, node agent) are
written against two small seams so that they run unchanged on real sockets
and inside the simulator:

* a *scheduler* with ``now_us()`` and ``call_later(delay_us, fn, *args)``;
* a *link* to one broker with ``send``/``publish``/``subscribe`` and two
  callbacks, ``on_envelope`` and ``on_connect``.

:class:`LocalNetwork` carries frames between in-process links and brokers.
Frames are encoded and decoded byte-for-byte exactly as on TCP; delivery is
a FIFO trampoline so nested sends never recurse.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import logging
import time
from collections import deque
from typing import Callable, Protocol

from .broker import Broker, Connection
from .errors import CodecError
from .message import HEADER, MAX_FRAME, Envelope, MsgType, decode, encode

log = logging.getLogger(__name__)


class Scheduler(Protocol):
    def now_us(self) -> int: ...

    def call_later(self, delay_us: int, fn: Callable, *args): ...


class _Handle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class ManualScheduler:
    """Virtual-time scheduler advanced explicitly; used by tests."""

    def __init__(self, start_us: int = 0):
        self._now = start_us
        self._heap: list = []
        self._ids = itertools.count()

    def now_us(self) -> int:
        return self._now

    def call_later(self, delay_us: int, fn: Callable, *args) -> _Handle:
        h = _Handle()
        heapq.heappush(self._heap, (self._now + max(0, int(delay_us)), next(self._ids), h, fn, args))
        return h

    def advance(self, delta_us: int) -> None:
        self.run_until(self._now + delta_us)

    def run_until(self, t_us: int) -> None:
        while self._heap and self._heap[0][0] <= t_us:
            when, _, h, fn, args = heapq.heappop(self._heap)
            self._now = when
            if not h.cancelled:
                fn(*args)
        self._now = max(self._now, t_us)


class AsyncioScheduler:
    """Wall-clock scheduler on the running asyncio loop."""

    def __init__(self, loop: asyncio.AbstractEventLoop | None = None):
        self._loop = loop

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        return self._loop or asyncio.get_event_loop()

    def now_us(self) -> int:
        return time.time_ns() // 1000

    def call_later(self, delay_us: int, fn: Callable, *args):
        return self.loop.call_later(max(0, delay_us) / 1e6, fn, *args)


# --- links ------------------------------------------------------------------

class BaseLink:
    """Envelope construction, sequence numbering and inbound dispatch."""

    def __init__(self, client_id: str, clock: Callable[[], int]):
        self.client_id = client_id
        self.clock = clock
        self._seq = itertools.count()
        self.on_envelope: Callable[[Envelope], None] | None = None
        self.on_connect: Callable[[], None] | None = None
        self.sent = 0
        self.received = 0
        self.decode_errors = 0

    @property
    def connected(self) -> bool:
        raise NotImplementedError

    def make(self, msg_type: MsgType, payload: dict | None = None,
             topic: str | None = None) -> Envelope:
        return Envelope(msg_type, self.client_id, topic, self.clock(), next(self._seq),
                        payload if payload is not None else {})

    def send(self, msg_type: MsgType, payload: dict | None = None,
             topic: str | None = None) -> Envelope:
        env = self.make(msg_type, payload, topic)
        self.forward(env)
        return env

    def publish(self, topic: str, payload: dict) -> Envelope:
        return self.send(MsgType.PUBLISH, payload, topic)

    def subscribe(self, filter_text: str) -> Envelope:
        return self.send(MsgType.SUBSCRIBE, {}, filter_text)

    def unsubscribe(self, filter_text: str) -> Envelope:
        return self.send(MsgType.UNSUBSCRIBE, {}, filter_text)

    def forward(self, env: Envelope) -> None:
        """Write an already-built envelope (used to relay unmodified)."""
        frame = encode(env)
        if self.connected:
            self.sent += 1
            self._write(frame)

    def _write(self, frame: bytes) -> None:
        raise NotImplementedError

    def _dispatch(self, env: Envelope) -> None:
        self.received += 1
        if self.on_envelope is not None:
            self.on_envelope(env)

    def _hello(self) -> None:
        self.send(MsgType.HEARTBEAT, {})
        if self.on_connect is not None:
            self.on_connect()


class LocalNetwork:
    """In-process frame switch between links and named broker endpoints."""

    def __init__(self, auto_pump: bool = True):
        self.brokers: dict[str, Broker] = {}
        self.auto_pump = auto_pump
        self._ready: deque[tuple[Connection, "LocalLink"]] = deque()
        self._pumping = False
        self.frames = 0
        self.bytes = 0

    def add_broker(self, endpoint: str, broker: Broker) -> Broker:
        self.brokers[endpoint] = broker
        return broker

    def link(self, endpoint: str, client_id: str, clock: Callable[[], int]) -> "LocalLink":
        return LocalLink(self, endpoint, client_id, clock)

    def _submit(self, link: "LocalLink", frame: bytes) -> None:
        self.frames += 1
        self.bytes += len(frame)
        link.broker.receive(link.conn, frame)
        if self.auto_pump:
            self.pump()

    def pump(self) -> int:
        """Deliver queued frames in global FIFO order until quiescent."""
        if self._pumping:
            return 0
        self._pumping = True
        n = 0
        try:
            while self._ready:
                conn, link = self._ready.popleft()
                frame = conn.pop()
                if frame is None or conn.closed:
                    continue
                n += 1
                link._on_frame(frame)
        finally:
            self._pumping = False
        return n


class LocalLink(BaseLink):
    def __init__(self, net: LocalNetwork, endpoint: str, client_id: str, clock: Callable[[], int]):
        super().__init__(client_id, clock)
        self.net = net
        self.endpoint = endpoint
        self.broker: Broker | None = None
        self.conn: Connection | None = None

    @property
    def connected(self) -> bool:
        return self.conn is not None and not self.conn.closed

    def start(self) -> None:
        broker = self.net.brokers.get(self.endpoint)
        if broker is None:
            raise ConnectionError(f"no broker at {self.endpoint!r}")
        self.broker = broker
        self.conn = broker.open(notify=lambda c: self.net._ready.append((c, self)))
        self._hello()

    def _write(self, frame: bytes) -> None:
        self.net._submit(self, frame)

    def _on_frame(self, frame: bytes) -> None:
        try:
            env, _ = decode(frame)
        except CodecError:
            self.decode_errors += 1
            return
        self._dispatch(env)

    def close(self) -> None:
        if self.conn is not None:
            self.broker.close(self.conn)


class TcpLink(BaseLink):
    """Asyncio TCP client link with reconnect and exponential backoff.

    ``max_attempts`` bounds consecutive failed connection attempts; when it
    is exhausted ``on_failure`` is called and the link stops.
    """

    def __init__(self, client_id: str, host: str, port: int,
                 clock: Callable[[], int] | None = None,
                 backoff_base: float = 0.2, backoff_cap: float = 5.0,
                 max_attempts: int | None = None):
        super().__init__(client_id, clock or (lambda: time.time_ns() // 1000))
        self.host = host
        self.port = port
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.max_attempts = max_attempts
        self.on_failure: Callable[[Exception], None] | None = None
        self.attempts = 0
        self.failed: Exception | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._task: asyncio.Task | None = None
        self._connected_evt: asyncio.Event | None = None
        self._closing = False

    @property
    def connected(self) -> bool:
        return self._writer is not None and not self._writer.is_closing()

    def start(self) -> None:
        self._connected_evt = asyncio.Event()
        self._task = asyncio.ensure_future(self._run())

    async def wait_connected(self, timeout: float = 5.0) -> None:
        await asyncio.wait_for(self._connected_evt.wait(), timeout)

    async def _run(self) -> None:
        delay = self.backoff_base
        failures = 0
        while not self._closing:
            self.attempts += 1
            try:
                reader, writer = await asyncio.open_connection(self.host, self.port)
            except OSError as exc:
                failures += 1
                if self.max_attempts is not None and failures >= self.max_attempts:
                    self.failed = exc
                    if self.on_failure is not None:
                        self.on_failure(exc)
                    return
                log.debug("%s: connect to %s:%s failed (%s); retry in %.2fs",
                          self.client_id, self.host, self.port, exc, delay)
                await asyncio.sleep(delay)
                delay = min(self.backoff_cap, delay * 2)
                continue
            failures = 0
            delay = self.backoff_base
            self._writer = writer
            self._connected_evt.set()
            try:
                self._hello()
                await self._read_loop(reader)
            finally:
                self._writer = None
                self._connected_evt.clear()
                writer.close()
            if not self._closing:
                log.info("%s: connection lost; reconnecting", self.client_id)
                await asyncio.sleep(delay)

    async def _read_loop(self, reader: asyncio.StreamReader) -> None:
        while True:
            try:
                header = await reader.readexactly(HEADER.size)
                (n,) = HEADER.unpack(header)
                if n > MAX_FRAME:
                    log.warning("%s: oversize frame from broker; dropping connection", self.client_id)
                    return
                body = await reader.readexactly(n)
            except (asyncio.IncompleteReadError, ConnectionError):
                return
            try:
                env, _ = decode(header + body)
            except CodecError:
                self.decode_errors += 1
                continue
            self._dispatch(env)

    def _write(self, frame: bytes) -> None:
        self._writer.write(frame)

    async def close(self) -> None:
        self._closing = True
        if self._writer is not None:
            self._writer.close()
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, Exception):
                pass
