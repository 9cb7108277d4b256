"""The AI-powered control engine.

Hosts :class:`ControlApp` plugins, registers them with the Register over the
node broker, fans measurements in, publishes control values out (only for
claimed parameters) and exchanges INTER_AI messages with peer controllers.

Application callbacks are queued per app and never overlap: a callback that
triggers another event for the same app (for example an emitted control whose
confirmation comes straight back in-process) sees it after it returns.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
import time
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import EngineError, RegistryError, TranslationError
from .message import (
    AppDescriptor,
    Envelope,
    MsgType,
    ParamSpec,
    ctrl_topic,
    inbox_topic,
    pm_topic,
    reply_topic,
    split_topic,
)
from .translation import NativeChannel, PeerChannel, PeerLink, Router

log = logging.getLogger(__name__)

DEFAULT_BUDGET_MS = 10.0
DEFAULT_TICK_MS = 100.0


class ControlApp:
    """Base class for control applications. Override the callbacks you need.

    ``descriptor`` states what the app reads and which parameters it wants
    to own. ``tick_period_ms`` sets the ``on_tick`` period (0 disables it).
    """

    descriptor: AppDescriptor
    tick_period_ms: float = DEFAULT_TICK_MS

    def on_start(self, ctx: "EngineContext") -> None:
        pass

    def on_measurement(self, ctx: "EngineContext", node_id: str, metric: str,
                       value: Any, ts_us: int) -> None:
        pass

    def on_tick(self, ctx: "EngineContext", now_us: int) -> None:
        pass

    def on_interai(self, ctx: "EngineContext", peer_id: str, payload: dict) -> None:
        pass

    def on_revoked(self, ctx: "EngineContext", node_id: str, param: str) -> None:
        pass

    def on_stop(self, ctx: "EngineContext") -> None:
        pass


class AppState(str, enum.Enum):
    LOADED = "LOADED"
    REGISTERING = "REGISTERING"
    RUNNING = "RUNNING"
    STOPPED = "STOPPED"


class EngineContext:
    """The only handle an app has on the outside world."""

    def __init__(self, engine: "ControlEngine", app_id: str, store: dict | None = None):
        self._engine = engine
        self.app_id = app_id
        self.store: dict = store if store is not None else {}

    @property
    def now_us(self) -> int:
        return self._engine.scheduler.now_us()

    def emit_control(self, node_id: str, param: str, value: Any) -> Envelope:
        return self._engine.emit_control(self.app_id, node_id, param, value)

    def send_interai(self, peer_controller_id: str, payload: dict, app: str | None = None) -> Future:
        return self._engine.send_interai(peer_controller_id, payload, app=app, src_app=self.app_id)

    def query_register(self, query: str, ident: str | None = None) -> Future:
        return self._engine.query_register(query, ident)


@dataclass
class _AppRecord:
    app: ControlApp
    ctx: EngineContext
    state: AppState = AppState.LOADED
    claims: set = field(default_factory=set)
    specs: dict = field(default_factory=dict)
    mailbox: deque = field(default_factory=deque)
    lock: threading.Lock = field(default_factory=threading.Lock)
    busy: bool = False
    calls: int = 0
    overruns: int = 0
    errors: int = 0
    tick_handle: Any = None

    @property
    def app_id(self) -> str:
        return self.app.descriptor.app_id


class ControlEngine:
    """Control engine bound to a node-broker link and an Inter-AI broker link.

    ``channel_factory(peer_link)`` builds the transport used by
    :meth:`federate`; it defaults to nothing, so callers that federate must
    supply one (the CLI wires TCP, the simulator and tests wire in-process).
    """

    def __init__(self, engine_id: str, node_link, interai_link, scheduler,
                 callback_budget_ms: float = DEFAULT_BUDGET_MS,
                 router: Router | None = None,
                 channel_factory: Callable[[PeerLink], PeerChannel] | None = None,
                 state_dir: str | None = None):
        self.engine_id = engine_id
        self.node_link = node_link
        self.interai_link = interai_link
        self.scheduler = scheduler
        self.budget_s = callback_budget_ms / 1000.0
        self.router = router or Router()
        self.channel_factory = channel_factory
        self.state_dir = state_dir
        self.apps: dict[str, _AppRecord] = {}
        self._measure_subs: dict[str, set[str]] = {}
        self._pending: dict[int, tuple[Callable, tuple]] = {}
        self._lock = threading.RLock()
        self.controls_emitted = 0
        self.controls_refused = 0
        self.malformed_measurements = 0
        self.interai_received = 0
        self.on_ctrl_publish: Callable[[Envelope], None] | None = None
        node_link.on_envelope = self._on_node_envelope
        node_link.on_connect = self._on_node_connect
        if interai_link is not None:
            interai_link.on_envelope = self._on_interai_envelope
            interai_link.on_connect = self._on_interai_connect

    # -- startup -------------------------------------------------------------

    def start(self) -> None:
        self.node_link.start()
        if self.interai_link is not None:
            self.interai_link.start()

    def _on_node_connect(self) -> None:
        self.node_link.subscribe(reply_topic(self.engine_id))
        for topic in self._measure_subs:
            self.node_link.subscribe(topic)

    def _on_interai_connect(self) -> None:
        self.interai_link.subscribe(inbox_topic(self.engine_id))

    def _request(self, msg_type: MsgType, payload: dict, handler: Callable, *args,
                 topic: str | None = None) -> Envelope:
        env = self.node_link.make(msg_type, payload, topic)
        self._pending[env.seq] = (handler, args)
        self.node_link.forward(env)
        return env

    # -- app lifecycle -------------------------------------------------------

    def load_app(self, app: ControlApp) -> Future:
        """Register ``app`` and start it. The future resolves to RUNNING or
        raises the Register's :class:`RegistryError` unchanged."""
        desc = app.descriptor
        with self._lock:
            rec = self.apps.get(desc.app_id)
            if rec is not None and rec.state is not AppState.LOADED:
                raise EngineError("DUPLICATE_APP", f"app {desc.app_id} already loaded")
            rec = _AppRecord(app, EngineContext(self, desc.app_id, self._load_store(desc.app_id)))
            self.apps[desc.app_id] = rec
            rec.state = AppState.REGISTERING
        fut: Future = Future()
        self._request(MsgType.REGISTER_APP, desc.to_dict(), self._app_registered, rec, fut)
        return fut

    def _app_registered(self, env: Envelope, rec: _AppRecord, fut: Future) -> None:
        if env.msg_type is MsgType.EXCEPTION:
            rec.state = AppState.LOADED
            fut.set_exception(RegistryError.from_payload(env.payload))
            return
        p = env.payload
        with self._lock:
            rec.claims = {tuple(c) for c in p.get("claims", ())}
            rec.specs = {(n, s["name"]): ParamSpec.from_dict(s) for n, s in p.get("param_specs", ())}
            rec.state = AppState.RUNNING
            for node_id, metric in rec.app.descriptor.required_measurements:
                self._add_measure_sub(pm_topic(node_id, metric), rec.app_id)
        self._invoke(rec, "on_start")
        period = getattr(rec.app, "tick_period_ms", DEFAULT_TICK_MS)
        if period and period > 0:
            rec.tick_handle = self.scheduler.call_later(int(period * 1000), self._tick, rec)
        log.info("app %s RUNNING (%d claims)", rec.app_id, len(rec.claims))
        fut.set_result(rec.state)

    def _add_measure_sub(self, topic: str, app_id: str) -> None:
        users = self._measure_subs.setdefault(topic, set())
        if not users:
            self.node_link.subscribe(topic)
        users.add(app_id)

    def _drop_measure_sub(self, topic: str, app_id: str) -> None:
        users = self._measure_subs.get(topic)
        if users is None:
            return
        users.discard(app_id)
        if not users:
            del self._measure_subs[topic]
            self.node_link.unsubscribe(topic)

    def subscriptions(self) -> set[str]:
        """Measurement topics currently subscribed on behalf of apps."""
        return set(self._measure_subs)

    def unload_app(self, app_id: str) -> Future:
        with self._lock:
            rec = self.apps.get(app_id)
            if rec is None or rec.state is not AppState.RUNNING:
                raise EngineError("UNKNOWN_APP", f"no running app {app_id!r}")
        self._invoke(rec, "on_stop")
        with self._lock:
            rec.state = AppState.STOPPED
            if rec.tick_handle is not None:
                rec.tick_handle.cancel()
            rec.claims.clear()
            for node_id, metric in rec.app.descriptor.required_measurements:
                self._drop_measure_sub(pm_topic(node_id, metric), app_id)
            del self.apps[app_id]
        self._save_store(rec)
        fut: Future = Future()
        self._request(MsgType.DEREGISTER, {"kind": "app", "id": app_id}, self._deregistered, fut)
        return fut

    def _deregistered(self, env: Envelope, fut: Future) -> None:
        if env.msg_type is MsgType.EXCEPTION:
            fut.set_exception(RegistryError.from_payload(env.payload))
        else:
            fut.set_result(AppState.STOPPED)

    def state(self, app_id: str) -> AppState | None:
        rec = self.apps.get(app_id)
        return rec.state if rec else None

    # -- app-local store -----------------------------------------------------

    def _store_path(self, app_id: str) -> str | None:
        return os.path.join(self.state_dir, f"{app_id}.json") if self.state_dir else None

    def _load_store(self, app_id: str) -> dict:
        path = self._store_path(app_id)
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        return {}

    def _save_store(self, rec: _AppRecord) -> None:
        path = self._store_path(rec.app_id)
        if path:
            os.makedirs(self.state_dir, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(rec.ctx.store, fh, sort_keys=True)

    # -- callback dispatch ---------------------------------------------------

    def _invoke(self, rec: _AppRecord, name: str, *args) -> None:
        rec.mailbox.append((name, args))
        while rec.mailbox:
            if not rec.lock.acquire(blocking=False):
                return  # the thread holding the lock drains our item
            try:
                if rec.busy:
                    return  # re-entered from inside a callback; outer loop drains
                rec.busy = True
                try:
                    while rec.mailbox:
                        cb, cb_args = rec.mailbox.popleft()
                        self._run_callback(rec, cb, cb_args)
                finally:
                    rec.busy = False
            finally:
                rec.lock.release()

    def _run_callback(self, rec: _AppRecord, name: str, args: tuple) -> None:
        fn = getattr(rec.app, name)
        t0 = time.perf_counter()
        try:
            fn(rec.ctx, *args)
        except Exception:
            rec.errors += 1
            log.exception("app %s: %s raised", rec.app_id, name)
        elapsed = time.perf_counter() - t0
        rec.calls += 1
        if elapsed > self.budget_s:
            rec.overruns += 1
            log.warning("app %s: %s took %.1f ms (budget %.1f ms)",
                        rec.app_id, name, elapsed * 1e3, self.budget_s * 1e3)

    def _tick(self, rec: _AppRecord) -> None:
        if rec.state is not AppState.RUNNING:
            return
        self._invoke(rec, "on_tick", self.scheduler.now_us())
        period = getattr(rec.app, "tick_period_ms", DEFAULT_TICK_MS)
        rec.tick_handle = self.scheduler.call_later(int(period * 1000), self._tick, rec)

    # -- inbound north-south -------------------------------------------------

    def _on_node_envelope(self, env: Envelope) -> None:
        t = env.msg_type
        if t is MsgType.PUBLISH:
            self.dispatch_measurement(env)
            return
        if t is MsgType.EXCEPTION and env.payload.get("code") == "REVOKED":
            self._revoked(env.payload)
            return
        if t in (MsgType.REGISTER_ACK, MsgType.EXCEPTION) and env.payload.get("reply_to") == self.engine_id:
            pending = self._pending.pop(env.payload.get("ref_seq"), None)
            if pending is not None:
                handler, args = pending
                handler(env, *args)
            return
        if t is MsgType.EXCEPTION:
            log.warning("broker refused a request: %s", env.payload)

    def dispatch_measurement(self, env: Envelope) -> int:
        parts = split_topic(env.topic or "")
        p = env.payload
        if parts is None or parts[1] != "pm" or "value" not in p:
            self.malformed_measurements += 1
            return 0
        node_id, _, metric = parts
        key = (node_id, metric)
        n = 0
        for rec in list(self.apps.values()):
            if rec.state is AppState.RUNNING and key in rec.app.descriptor.required_measurements:
                self._invoke(rec, "on_measurement", node_id, metric, p["value"], env.ts_us)
                n += 1
        return n

    def _revoked(self, payload: dict) -> None:
        rec = self.apps.get(payload.get("app_id"))
        if rec is None:
            return
        for node_id, param in payload.get("revoked", ()):
            rec.claims.discard((node_id, param))
            self._invoke(rec, "on_revoked", node_id, param)

    # -- outbound control ----------------------------------------------------

    def emit_control(self, app_id: str, node_id: str, param: str, value: Any) -> Envelope:
        rec = self.apps.get(app_id)
        key = (node_id, param)
        if rec is None or rec.state is not AppState.RUNNING or key not in rec.claims:
            self.controls_refused += 1
            raise EngineError("NOT_CLAIMED", f"{app_id} holds no claim on {node_id}/{param}")
        spec = rec.specs.get(key)
        if spec is not None:
            reason = spec.check(value)
            if reason is not None:
                self.controls_refused += 1
                raise EngineError("OUT_OF_RANGE", f"{node_id}/{param}: {reason}")
        env = self.node_link.make(MsgType.PUBLISH, {"param": param, "value": value, "app_id": app_id},
                                  ctrl_topic(node_id, param))
        if self.on_ctrl_publish is not None:
            self.on_ctrl_publish(env)
        self.controls_emitted += 1
        self.node_link.forward(env)
        return env

    def query_register(self, query: str, ident: str | None = None) -> Future:
        fut: Future = Future()

        def done(env: Envelope) -> None:
            if env.msg_type is MsgType.EXCEPTION:
                fut.set_exception(RegistryError.from_payload(env.payload))
            else:
                fut.set_result(env.payload.get("result"))

        payload = {"query": query}
        if ident is not None:
            payload["id"] = ident
        self._request(MsgType.PUBLISH, payload, done, topic="register/query")
        return fut

    # -- east-west -----------------------------------------------------------

    def federate(self, link: PeerLink, channel: PeerChannel | None = None) -> PeerChannel:
        if channel is None:
            if self.channel_factory is None:
                raise EngineError("PEER_UNREACHABLE", f"no transport for peer {link.peer_controller_id}")
            channel = self.channel_factory(link)
        self.router.add_peer(link, channel)
        channel.start()
        return channel

    def send_interai(self, peer_controller_id: str, payload: dict, app: str | None = None,
                     src_app: str | None = None) -> Future:
        doc = {"to": peer_controller_id, "body": payload}
        if app is not None:
            doc["app"] = app
        if src_app is not None:
            doc["from_app"] = src_app
        env = Envelope(MsgType.INTER_AI, self.engine_id, None, self.scheduler.now_us(), 0, doc)
        try:
            return self.router.route(env)
        except TranslationError as exc:
            if exc.code == "UNKNOWN_PEER":
                raise TranslationError("PEER_UNREACHABLE", exc.detail) from None
            raise

    def _on_interai_envelope(self, env: Envelope) -> None:
        if env.msg_type is not MsgType.INTER_AI:
            if env.msg_type is MsgType.EXCEPTION:
                log.warning("inter-AI broker refused a request: %s", env.payload)
            return
        self.interai_received += 1
        p = env.payload
        if "body" in p:
            body = p["body"]
        else:
            body = {k: v for k, v in p.items() if k not in ("to", "app", "from_app")}
        target = p.get("app")
        for rec in list(self.apps.values()):
            if rec.state is AppState.RUNNING and (target is None or target == rec.app_id):
                self._invoke(rec, "on_interai", env.sender, body)

    def stats(self) -> dict:
        return {
            "apps": {a: {"state": r.state.value, "calls": r.calls, "overruns": r.overruns,
                         "errors": r.errors, "claims": sorted(map(list, r.claims))}
                     for a, r in self.apps.items()},
            "subscriptions": sorted(self._measure_subs),
            "controls_emitted": self.controls_emitted,
            "controls_refused": self.controls_refused,
            "malformed_measurements": self.malformed_measurements,
            "interai_received": self.interai_received,
        }


def native_local_channel(net, engine_scheduler, engine_id: str) -> Callable[[PeerLink], PeerChannel]:
    """Channel factory for in-process federation over a LocalNetwork."""

    def make(link: PeerLink) -> PeerChannel:
        if not link.native:
            raise EngineError("PEER_UNREACHABLE", "in-process factory only builds native channels")
        return NativeChannel(link.peer_controller_id,
                             net.link(link.endpoint, engine_id, engine_scheduler.now_us))

    return make
