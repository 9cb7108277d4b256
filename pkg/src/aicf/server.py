"""Asyncio TCP front end for :class:`aicf.broker.Broker`."""

from __future__ import annotations

import asyncio
import errno
import logging

from .broker import Broker, Connection
from .errors import BrokerError
from .message import HEADER, MAX_FRAME

log = logging.getLogger(__name__)


class BrokerServer:
    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0):
        self.broker = broker
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None
        self._conns: set[asyncio.Task] = set()
        self._writers: set[asyncio.StreamWriter] = set()

    async def start(self) -> "BrokerServer":
        try:
            self._server = await asyncio.start_server(self._serve, self.host, self.port)
        except OSError as exc:
            raise BrokerError("BIND_FAILED", f"{self.host}:{self.port}: {exc.strerror or exc}") from None
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("%s listening on %s:%d", self.broker.name, self.host, self.port)
        return self

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.host, self.port

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        wake = asyncio.Event()
        conn = self.broker.open(notify=lambda c: wake.set())
        sender = asyncio.ensure_future(self._pump_out(conn, writer, wake))
        self._conns.add(sender)
        self._writers.add(writer)
        try:
            while not conn.closed:
                try:
                    header = await reader.readexactly(HEADER.size)
                    (n,) = HEADER.unpack(header)
                    if n > MAX_FRAME:
                        log.warning("oversize frame (%d bytes) from %s; closing", n, conn.client_id)
                        break
                    body = await reader.readexactly(n)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                self.broker.receive(conn, header + body)
        finally:
            self.broker.close(conn)
            wake.set()
            try:
                await asyncio.wait_for(sender, 2.0)
            except (asyncio.TimeoutError, Exception):
                sender.cancel()
            self._conns.discard(sender)
            self._writers.discard(writer)
            writer.close()

    async def _pump_out(self, conn: Connection, writer: asyncio.StreamWriter, wake: asyncio.Event) -> None:
        try:
            while True:
                await wake.wait()
                wake.clear()
                frames = conn.drain()
                if frames:
                    writer.write(b"".join(frames))
                    await writer.drain()
                if conn.closed:
                    return
        except (ConnectionError, OSError) as exc:
            if getattr(exc, "errno", None) not in (errno.EPIPE, errno.ECONNRESET, None):
                log.warning("write to %s failed: %s", conn.client_id, exc)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for w in list(self._writers):
            w.close()
        for t in list(self._conns):
            t.cancel()
