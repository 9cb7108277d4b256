"""Protocol translation for east-west traffic with non-native controllers.

Native peers (same framework) exchange unmodified INTER_AI envelopes through
each other's Inter-AI broker and never touch a translator. Foreign peers go
through a :class:`Translator` registered for their ``kind``. One reference
foreign format ships, ``legacy-sdn-v0``: a single text line

    LSDN0|<sender>|<ts_us>|<seq>|<base64 of canonical JSON payload>\\n
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import dataclasses
import json
import logging
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Protocol

from .errors import TranslationError
from .message import U64_MAX, Envelope, MsgType

log = logging.getLogger(__name__)


class Translator(Protocol):
    foreign_kind: str

    def translate_in(self, data: bytes) -> Envelope: ...

    def translate_out(self, env: Envelope) -> bytes: ...


class LegacySdnV0Translator:
    foreign_kind = "legacy-sdn-v0"
    MAGIC = "LSDN0"

    def translate_out(self, env: Envelope) -> bytes:
        if env.msg_type is not MsgType.INTER_AI:
            raise TranslationError("TRANSLATION_FAILED", f"{env.msg_type.value} is not east-west traffic")
        if not env.sender or any(c in env.sender for c in "|\r\n"):
            raise TranslationError("TRANSLATION_FAILED", f"sender {env.sender!r} not representable")
        try:
            doc = json.dumps(env.payload, sort_keys=True, separators=(",", ":"),
                             ensure_ascii=False, allow_nan=False)
        except (TypeError, ValueError) as exc:
            raise TranslationError("TRANSLATION_FAILED", str(exc)) from None
        b64 = base64.b64encode(doc.encode("utf-8")).decode("ascii")
        return f"{self.MAGIC}|{env.sender}|{env.ts_us}|{env.seq}|{b64}\n".encode("utf-8")

    def translate_in(self, data: bytes) -> Envelope:
        try:
            line = data.decode("utf-8")
        except UnicodeDecodeError:
            raise TranslationError("TRANSLATION_FAILED", "line is not UTF-8") from None
        if line.endswith("\n"):
            line = line[:-1]
        fields = line.split("|")
        if len(fields) != 5:
            raise TranslationError("TRANSLATION_FAILED", f"expected 5 fields, got {len(fields)}")
        magic, sender, ts, seq, b64 = fields
        if magic != self.MAGIC:
            raise TranslationError("TRANSLATION_FAILED", f"bad magic {magic!r}")
        if not sender or "\r" in sender:
            raise TranslationError("TRANSLATION_FAILED", "empty sender")
        nums = []
        for text in (ts, seq):
            if not text.isdigit() or int(text) > U64_MAX:
                raise TranslationError("TRANSLATION_FAILED", f"bad integer {text!r}")
            nums.append(int(text))
        try:
            payload = json.loads(base64.b64decode(b64, validate=True).decode("utf-8"))
        except (binascii.Error, UnicodeDecodeError, ValueError) as exc:
            raise TranslationError("TRANSLATION_FAILED", f"bad payload: {exc}") from None
        if not isinstance(payload, dict):
            raise TranslationError("TRANSLATION_FAILED", "payload is not an object")
        return Envelope(MsgType.INTER_AI, sender, None, nums[0], nums[1], payload)


class TranslatorRegistry:
    """Translators by foreign kind, with per-kind call and failure counters."""

    def __init__(self):
        self._translators: dict[str, Translator] = {}
        self.calls: dict[str, int] = {}
        self.failures: dict[str, int] = {}

    def register_translator(self, kind: str, translator: Translator) -> None:
        self._translators[kind] = translator
        self.calls.setdefault(kind, 0)
        self.failures.setdefault(kind, 0)

    def kinds(self) -> list[str]:
        return list(self._translators)

    def translate(self, kind: str, direction: str, data):
        tr = self._translators.get(kind)
        if tr is None:
            raise TranslationError("UNKNOWN_KIND", f"no translator for {kind!r}")
        self.calls[kind] += 1
        try:
            if direction == "in":
                return tr.translate_in(data)
            if direction == "out":
                return tr.translate_out(data)
        except TranslationError:
            self.failures[kind] += 1
            raise
        raise ValueError(f"direction must be 'in' or 'out', not {direction!r}")

    def total_calls(self) -> int:
        return sum(self.calls.values())


def default_translators() -> TranslatorRegistry:
    reg = TranslatorRegistry()
    reg.register_translator(LegacySdnV0Translator.foreign_kind, LegacySdnV0Translator())
    return reg


# --- peers ------------------------------------------------------------------

@dataclass(frozen=True)
class PeerLink:
    peer_controller_id: str
    endpoint: tuple[str, int] | str
    native: bool = True
    kind: str = LegacySdnV0Translator.foreign_kind

    @classmethod
    def from_dict(cls, d: dict) -> "PeerLink":
        ep = d["endpoint"]
        if isinstance(ep, list):
            ep = (ep[0], int(ep[1]))
        return cls(d["peer_controller_id"], ep, bool(d.get("native", True)),
                   d.get("kind", LegacySdnV0Translator.foreign_kind))


def peer_unreachable(peer: str, why: str = "") -> TranslationError:
    return TranslationError("PEER_UNREACHABLE", f"{peer}: {why}" if why else peer)


class PeerChannel:
    """Outbox in front of a peer transport; items queue until it is ready."""

    def __init__(self, peer_id: str):
        self.peer_id = peer_id
        self.ready = False
        self.failed: Exception | None = None
        self._outbox: deque = deque()
        self.delivered = 0

    def submit(self, item) -> Future:
        fut: Future = Future()
        if self.failed is not None:
            fut.set_exception(peer_unreachable(self.peer_id, str(self.failed)))
        elif self.ready:
            self._deliver(item)
            self.delivered += 1
            fut.set_result(True)
        else:
            self._outbox.append((item, fut))
        return fut

    def _set_ready(self) -> None:
        self.ready = True
        while self._outbox and self.ready:
            item, fut = self._outbox.popleft()
            self._deliver(item)
            self.delivered += 1
            fut.set_result(True)

    def _set_failed(self, exc: Exception) -> None:
        self.ready = False
        self.failed = exc
        while self._outbox:
            _, fut = self._outbox.popleft()
            fut.set_exception(peer_unreachable(self.peer_id, str(exc)))

    def _deliver(self, item) -> None:
        raise NotImplementedError


class NativeChannel(PeerChannel):
    """Publishes INTER_AI payloads on a native peer's Inter-AI broker."""

    def __init__(self, peer_id: str, link):
        super().__init__(peer_id)
        self.link = link
        link.on_connect = self._set_ready
        if hasattr(link, "on_failure"):
            link.on_failure = self._set_failed
        link.on_envelope = self._on_envelope

    def start(self) -> None:
        self.link.start()

    def _on_envelope(self, env: Envelope) -> None:
        if env.msg_type is MsgType.EXCEPTION:
            log.warning("peer broker %s rejected a message: %s", self.peer_id, env.payload)

    def _deliver(self, payload: dict) -> None:
        self.link.send(MsgType.INTER_AI, payload)


class MemoryForeignChannel(PeerChannel):
    """Collects translated bytes in memory (in-process peers, tests)."""

    def __init__(self, peer_id: str, sink=None):
        super().__init__(peer_id)
        self.wire: list[bytes] = []
        self.sink = sink
        self._set_ready()

    def start(self) -> None:
        pass

    def _deliver(self, data: bytes) -> None:
        self.wire.append(data)
        if self.sink is not None:
            self.sink(data)


class TcpForeignChannel(PeerChannel):
    """Writes translated lines to a foreign controller's TCP endpoint."""

    def __init__(self, peer_id: str, host: str, port: int, retries: int = 3, backoff: float = 0.2):
        super().__init__(peer_id)
        self.host, self.port = host, port
        self.retries = retries
        self.backoff = backoff
        self._writer: asyncio.StreamWriter | None = None

    def start(self) -> None:
        asyncio.ensure_future(self._connect())

    async def _connect(self) -> None:
        delay = self.backoff
        for attempt in range(self.retries):
            try:
                _, self._writer = await asyncio.open_connection(self.host, self.port)
            except OSError as exc:
                last = exc
                if attempt + 1 < self.retries:
                    await asyncio.sleep(delay)
                    delay = min(5.0, delay * 2)
                continue
            self._set_ready()
            return
        self._set_failed(last)

    def _deliver(self, data: bytes) -> None:
        self._writer.write(data)

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()


class Router:
    """Chooses the native or translated path for outbound INTER_AI traffic."""

    def __init__(self, translators: TranslatorRegistry | None = None):
        self.translators = translators or default_translators()
        self.peers: dict[str, tuple[PeerLink, PeerChannel]] = {}
        self.native_sent = 0
        self.foreign_sent = 0

    def add_peer(self, link: PeerLink, channel: PeerChannel) -> None:
        self.peers[link.peer_controller_id] = (link, channel)

    def route(self, env: Envelope) -> Future:
        """Send ``env`` (INTER_AI, payload ``to`` = peer id) to its peer."""
        peer_id = env.payload.get("to")
        entry = self.peers.get(peer_id)
        if entry is None:
            raise TranslationError("UNKNOWN_PEER", f"no peer link for {peer_id!r}")
        link, channel = entry
        if link.native:
            self.native_sent += 1
            return channel.submit(env.payload)
        data = self.translators.translate(link.kind, "out", env)
        self.foreign_sent += 1
        return channel.submit(data)

    def path(self, peer_id: str) -> str:
        entry = self.peers.get(peer_id)
        if entry is None:
            raise TranslationError("UNKNOWN_PEER", f"no peer link for {peer_id!r}")
        return "native_path" if entry[0].native else "translated_path"


class TranslationGateway:
    """Inbound side: foreign lines become INTER_AI envelopes on the local broker.

    ``local_link`` is a link to the local Inter-AI broker. Foreign payloads
    without a ``to`` field are addressed to ``local_controller_id``.
    """

    def __init__(self, translators: TranslatorRegistry, kind: str, local_link,
                 local_controller_id: str):
        if kind not in translators.kinds():
            raise TranslationError("UNKNOWN_KIND", f"no translator for {kind!r}")
        self.translators = translators
        self.kind = kind
        self.local_link = local_link
        self.local_controller_id = local_controller_id
        self.accepted = 0
        self.failed = 0
        self._server: asyncio.base_events.Server | None = None
        self.port: int | None = None

    def ingest(self, data: bytes) -> Envelope | None:
        try:
            env = self.translators.translate(self.kind, "in", data)
        except TranslationError as exc:
            self.failed += 1
            log.warning("gateway %s dropped a frame: %s", self.kind, exc.detail)
            return None
        if "to" not in env.payload:
            env = dataclasses.replace(env, payload={**env.payload, "to": self.local_controller_id})
        self.accepted += 1
        self.local_link.forward(env)
        return env

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> "TranslationGateway":
        self._server = await asyncio.start_server(self._serve, host, port, limit=4 * 1024 * 1024)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                line = await reader.readline()
                if not line:
                    return
                self.ingest(line)
        except (ConnectionError, asyncio.LimitOverrunError, ValueError) as exc:
            log.warning("gateway %s connection error: %s", self.kind, exc)
        finally:
            writer.close()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
