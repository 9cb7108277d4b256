"""Publish-subscribe broker engine.

The same :class:`Broker` serves as the Local/Node broker (north-south,
namespace ``node``) and the Inter-AI broker (east-west, namespace
``interai``). It is transport agnostic: a transport opens a
:class:`Connection`, feeds it raw frames with :meth:`Broker.receive` and
drains outbound frames from the connection queue when notified.

Delivery is at-most-once. Each connection has a bounded outbound queue;
when it is full further deliveries to that client are dropped and counted.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .errors import BrokerError, CodecError
from .message import (
    Envelope,
    MsgType,
    TopicFilter,
    decode,
    encode,
    inbox_topic,
    reply_topic,
    topic_matches,
)

log = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 1024

REGISTER_NODE_TOPIC = "register/node"
REGISTER_APP_TOPIC = "register/app"
REGISTER_QUERY_TOPIC = "register/query"


class BrokerRole(str, enum.Enum):
    node_broker = "node_broker"
    inter_ai_broker = "inter_ai_broker"

    @property
    def namespace_prefix(self) -> str:
        return "node" if self is BrokerRole.node_broker else "interai"

    @classmethod
    def from_cli(cls, text: str) -> "BrokerRole":
        try:
            return {"node": cls.node_broker, "interai": cls.inter_ai_broker}[text]
        except KeyError:
            raise ValueError(f"unknown broker role {text!r}") from None


def wall_clock_us() -> int:
    return time.time_ns() // 1000


@dataclass(frozen=True)
class Subscription:
    client_id: str
    filter: TopicFilter
    created_seq: int


class Connection:
    """One client connection as seen by the broker."""

    def __init__(self, capacity: int, notify: Callable[["Connection"], None] | None = None):
        self.client_id: str | None = None
        self.capacity = capacity
        self.queue: deque[bytes] = deque()
        self.notify = notify
        self.closed = False
        self.delivered = 0
        self.dropped = 0

    def _push(self, frame: bytes, force: bool = False) -> bool:
        if self.closed:
            return False
        if not force and len(self.queue) >= self.capacity:
            return False
        self.queue.append(frame)
        if self.notify is not None:
            self.notify(self)
        return True

    def pop(self) -> bytes | None:
        return self.queue.popleft() if self.queue else None

    def drain(self) -> list[bytes]:
        out = list(self.queue)
        self.queue.clear()
        return out

    def __repr__(self) -> str:
        return f"<Connection {self.client_id!r} queued={len(self.queue)}>"


class Broker:
    def __init__(self, role: BrokerRole = BrokerRole.node_broker,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
                 clock: Callable[[], int] = wall_clock_us,
                 name: str | None = None):
        self.role = role
        self.queue_capacity = queue_capacity
        self.clock = clock
        self.name = name or f"broker-{role.namespace_prefix}"
        self._lock = threading.Lock()
        self._clients: dict[str, Connection] = {}
        # client_id -> tuple of subscriptions; replaced wholesale on mutation
        self._table: dict[str, tuple[Subscription, ...]] = {}
        self._sub_seq = itertools.count()
        self._out_seq = itertools.count()
        self.published_total = 0
        self.delivered_total = 0
        self.dropped_total = 0
        self.malformed_total = 0
        self.tap: Callable[[Connection, Envelope], None] | None = None

    # -- connection lifecycle ------------------------------------------------

    def open(self, notify: Callable[[Connection], None] | None = None,
             capacity: int | None = None) -> Connection:
        return Connection(capacity or self.queue_capacity, notify)

    def _bind(self, conn: Connection, client_id: str) -> None:
        with self._lock:
            old = self._clients.get(client_id)
            if old is not None and old is not conn:
                old.closed = True
                old.queue.clear()
                log.info("client %s reconnected; replacing previous connection", client_id)
            conn.client_id = client_id
            self._clients[client_id] = conn
            table = dict(self._table)
            table.pop(client_id, None)
            self._table = table

    def close(self, conn: Connection) -> None:
        conn.closed = True
        with self._lock:
            if conn.client_id is not None and self._clients.get(conn.client_id) is conn:
                del self._clients[conn.client_id]
                table = dict(self._table)
                table.pop(conn.client_id, None)
                self._table = table

    # -- inbound -------------------------------------------------------------

    def receive(self, conn: Connection, frame: bytes) -> None:
        """Handle one complete frame received on ``conn``."""
        try:
            env, _ = decode(frame)
        except CodecError as exc:
            self.malformed_total += 1
            self._reply(conn, MsgType.EXCEPTION, {"code": exc.code, "detail": exc.detail})
            return
        self.handle(conn, env)

    def handle(self, conn: Connection, env: Envelope) -> None:
        if conn.closed:
            return
        if conn.client_id is None:
            self._bind(conn, env.sender)
        if self.tap is not None:
            self.tap(conn, env)
        t = env.msg_type
        try:
            if t is MsgType.HEARTBEAT:
                self._heartbeat(conn, env)
            elif t is MsgType.SUBSCRIBE:
                self.subscribe(conn, env.topic)
                self._reply(conn, MsgType.REGISTER_ACK,
                            {"op": "SUBSCRIBE", "filter": env.topic, "ref_seq": env.seq})
            elif t is MsgType.UNSUBSCRIBE:
                self.unsubscribe(conn, env.topic)
                self._reply(conn, MsgType.REGISTER_ACK,
                            {"op": "UNSUBSCRIBE", "filter": env.topic, "ref_seq": env.seq})
            elif t is MsgType.PUBLISH:
                self.check_namespace(env.topic)
                self.route(env, env.topic)
            else:
                self.route(env, self._implicit_topic(env))
        except BrokerError as exc:
            self._reply(conn, MsgType.EXCEPTION,
                        {"code": exc.code, "detail": exc.detail, "ref_seq": env.seq})

    def _implicit_topic(self, env: Envelope) -> str:
        """Topic-less envelope types are routed through reserved topics."""
        t = env.msg_type
        p = env.payload
        if t is MsgType.INTER_AI:
            if self.role is not BrokerRole.inter_ai_broker:
                raise BrokerError("WRONG_NAMESPACE", "INTER_AI only accepted by the inter-AI broker")
            to = p.get("to")
            if not isinstance(to, str) or not to:
                raise BrokerError("MALFORMED", "INTER_AI payload needs a 'to' controller id")
            return inbox_topic(to)
        if self.role is not BrokerRole.node_broker:
            raise BrokerError("WRONG_NAMESPACE", f"{t.value} only accepted by the node broker")
        if t is MsgType.REGISTER_NODE:
            return REGISTER_NODE_TOPIC
        if t is MsgType.REGISTER_APP:
            return REGISTER_APP_TOPIC
        if t is MsgType.DEREGISTER:
            return REGISTER_NODE_TOPIC if p.get("kind") == "node" else REGISTER_APP_TOPIC
        # REGISTER_ACK / EXCEPTION originating from a client (the Register)
        to = p.get("reply_to")
        if not isinstance(to, str) or not to:
            raise BrokerError("MALFORMED", f"{t.value} needs 'reply_to'")
        return reply_topic(to)

    def _heartbeat(self, conn: Connection, env: Envelope) -> None:
        if "ping" in env.payload:
            self._reply(conn, MsgType.HEARTBEAT, {"pong": env.payload["ping"]})
        if env.payload.get("stats"):
            self._reply(conn, MsgType.HEARTBEAT, {"stats": self.stats()})

    def _reply(self, conn: Connection, msg_type: MsgType, payload: dict) -> None:
        env = Envelope(msg_type, self.name, None, self.clock(), next(self._out_seq), payload)
        conn._push(encode(env), force=True)

    # -- routing -------------------------------------------------------------

    def _allowed(self, first: str) -> bool:
        if first == self.role.namespace_prefix:
            return True
        return self.role is BrokerRole.node_broker and first == "register"

    def check_namespace(self, topic: str) -> None:
        first = topic.split("/", 1)[0]
        if not self._allowed(first):
            raise BrokerError("WRONG_NAMESPACE",
                              f"{topic!r} outside namespace {self.role.namespace_prefix!r}")

    def subscribe(self, conn: Connection, filter_text: str) -> Subscription:
        try:
            filt = TopicFilter.parse(filter_text)
        except ValueError as exc:
            raise BrokerError("MALFORMED", str(exc)) from None
        if not self._allowed(filt.segments[0]):
            raise BrokerError("WRONG_NAMESPACE",
                              f"{filter_text!r} outside namespace {self.role.namespace_prefix!r}")
        with self._lock:
            subs = self._table.get(conn.client_id, ())
            for s in subs:
                if s.filter == filt:
                    return s
            sub = Subscription(conn.client_id, filt, next(self._sub_seq))
            table = dict(self._table)
            table[conn.client_id] = subs + (sub,)
            self._table = table
            return sub

    def unsubscribe(self, conn: Connection, filter_text: str) -> None:
        try:
            filt = TopicFilter.parse(filter_text)
        except ValueError as exc:
            raise BrokerError("MALFORMED", str(exc)) from None
        with self._lock:
            subs = self._table.get(conn.client_id, ())
            kept = tuple(s for s in subs if s.filter != filt)
            table = dict(self._table)
            if kept:
                table[conn.client_id] = kept
            else:
                table.pop(conn.client_id, None)
            self._table = table

    def route(self, env: Envelope, topic: str) -> int:
        """Forward ``env`` unmodified to every client with a matching filter."""
        frame = encode(env)
        table = self._table  # immutable snapshot; readers never lock
        clients = self._clients
        self.published_total += 1
        n = 0
        for client_id, subs in table.items():
            if not any(topic_matches(s.filter, topic) for s in subs):
                continue
            conn = clients.get(client_id)
            if conn is None:
                continue
            if conn._push(frame):
                conn.delivered += 1
                self.delivered_total += 1
                n += 1
            else:
                if conn.dropped == 0 or conn.dropped % 1000 == 0:
                    log.warning("SLOW_CONSUMER %s: dropping (queue capacity %d)",
                                client_id, conn.capacity)
                conn.dropped += 1
                self.dropped_total += 1
        return n

    # -- introspection ------------------------------------------------------

    def subscriptions(self, client_id: str | None = None) -> list[Subscription]:
        table = self._table
        if client_id is not None:
            return list(table.get(client_id, ()))
        return [s for subs in table.values() for s in subs]

    def stats(self) -> dict:
        return {
            "connected_clients": len(self._clients),
            "subscriptions": sum(len(s) for s in self._table.values()),
            "published_total": self.published_total,
            "delivered_total": self.delivered_total,
            "dropped_total": self.dropped_total,
        }
