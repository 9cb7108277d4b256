"""``aicf``: one binary for every service and the simulator.

Logs go to standard error as ``key=value`` lines. Errors end the process
with one line ``error code=<CODE> ...`` and exit status 2 for configuration
problems or 1 for runtime failures. Data goes to files (the ``stats``
subcommand prints its single JSON line to standard output).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
import time
from datetime import datetime, timezone
from typing import Any

from . import __version__
from .errors import AicfError, ConfigError

log = logging.getLogger("aicf.cli")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1
DRAIN_S = 2.0


# --- logging -----------------------------------------------------------------

class LogfmtFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        ts = datetime.fromtimestamp(record.created, timezone.utc).isoformat(timespec="milliseconds")
        line = (f"ts={ts} level={record.levelname} logger={record.name} "
                f"msg={json.dumps(record.getMessage())}")
        if record.exc_info:
            line += f" exc={json.dumps(self.formatException(record.exc_info))}"
        return line


def setup_logging(flag: str | None, configured: str | None = None) -> None:
    level = (flag or os.environ.get("AICF_LOG") or configured or "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError("CONFIG_INVALID", f"unknown log level {level!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(LogfmtFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def error_line(code: str, detail: str, cause: str | None = None) -> str:
    extra = f" cause={cause}" if cause else ""
    return f"error code={code}{extra} detail={json.dumps(detail)}"


def emit_record(kind: str, doc: dict) -> None:
    """Structured one-line record on stderr, independent of the log level."""
    sys.stderr.write(f"{kind} {json.dumps(doc, sort_keys=True, separators=(',', ':'))}\n")
    sys.stderr.flush()


# --- config ------------------------------------------------------------------

def load_section(path: str, section: str) -> dict:
    """Read a JSON config; a top-level document is narrowed to ``section``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("CONFIG_INVALID", f"config file not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise ConfigError("CONFIG_INVALID", f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("CONFIG_INVALID", f"{path}: expected a JSON object")
    body = doc.get(section, doc)
    if not isinstance(body, dict):
        raise ConfigError("CONFIG_INVALID", f"{path}: section {section!r} must be an object")
    return body


def _configured_level(path: str | None) -> str | None:
    """``log_level`` from a config file, if readable; load errors surface later."""
    if not path:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, ValueError):
        return None
    return doc.get("log_level") if isinstance(doc, dict) else None


def parse_endpoint(text: Any) -> tuple[str, int]:
    if isinstance(text, (list, tuple)) and len(text) == 2:
        text = f"{text[0]}:{text[1]}"
    if not isinstance(text, str):
        raise ConfigError("CONFIG_INVALID", f"bad endpoint {text!r}; expected host:port")
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise ConfigError("CONFIG_INVALID", f"bad endpoint {text!r}; expected host:port")
    return host, int(port)


# --- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        sys.stderr.write(error_line("CONFIG_INVALID", f"{self.prog}: {message}") + "\n")
        sys.exit(EXIT_CONFIG)


def _fmt(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, width=100, max_help_position=34)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aicf", formatter_class=_fmt,
                description="Modular AI control framework for fiber and wireless nodes.")
    p.add_argument("--version", action="version", version=f"aicf {__version__}")
    p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (overrides AICF_LOG)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    b = sub.add_parser("broker", help="run a message broker", formatter_class=_fmt)
    b.add_argument("--host", default=None, help="bind address (default 127.0.0.1)")
    b.add_argument("--port", type=int, default=None, help="TCP port (default 7001)")
    b.add_argument("--role", choices=("node", "interai"), default=None,
                   help="node broker or inter-AI broker (default node)")
    b.add_argument("--queue-capacity", type=int, default=None,
                   help="per-subscriber outbound queue bound (default 1024)")
    b.add_argument("--config", help="JSON config file (section 'broker')")

    r = sub.add_parser("register", help="run the Register service", formatter_class=_fmt)
    r.add_argument("--broker-endpoint", help="node broker host:port (default 127.0.0.1:7001)")
    r.add_argument("--policy", choices=("reject", "priority-preempt"), default=None,
                   help="claim conflict policy (default reject)")
    r.add_argument("--snapshot", help="snapshot file; restored at start when it exists")
    r.add_argument("--config", help="JSON config file (section 'register')")

    e = sub.add_parser("engine", help="run a control engine", formatter_class=_fmt)
    e.add_argument("--config", required=True, help="JSON engine config (section 'engine')")

    a = sub.add_parser("agent", help="run a standalone node agent", formatter_class=_fmt)
    a.add_argument("--config", required=True, help="JSON agent config (section 'agent')")

    s = sub.add_parser("sim", help="run the PON/RAN simulator", formatter_class=_fmt)
    s.add_argument("--scenario", help="JSON scenario file (default: built-in scenario for the mode)")
    s.add_argument("--mode", choices=("baseline", "cooperative", "balanced", "both"), default="both",
                   help="which run(s); 'both' is baseline plus cooperative (default both)")
    s.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the scenario)")
    s.add_argument("--out", default="sim-out", help="output directory for CSV files (default sim-out)")

    t = sub.add_parser("stats", help="print a broker's counters as one JSON line", formatter_class=_fmt)
    t.add_argument("--broker-endpoint", default="127.0.0.1:7001",
                   help="broker host:port (default 127.0.0.1:7001)")
    t.add_argument("--timeout", type=float, default=2.0, help="seconds to wait (default 2.0)")
    return p


# --- service runners ---------------------------------------------------------------

def _install_signals(on_usr1=None) -> asyncio.Event:
    """SIGINT/SIGTERM set the returned event; SIGUSR1 calls ``on_usr1``.

    Installed before a service announces itself so no signal hits the
    default handlers.
    """
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    loop.add_signal_handler(signal.SIGINT, stop.set)
    loop.add_signal_handler(signal.SIGTERM, stop.set)
    if on_usr1 is not None and hasattr(signal, "SIGUSR1"):
        loop.add_signal_handler(signal.SIGUSR1, on_usr1)
    return stop


async def run_broker(args) -> int:
    from .broker import Broker, BrokerRole
    from .server import BrokerServer

    conf = load_section(args.config, "broker") if args.config else {}
    role = BrokerRole.from_cli(args.role or conf.get("role", "node"))
    port = args.port if args.port is not None else conf.get("port", 7001)
    capacity = args.queue_capacity or conf.get("queue_capacity", 1024)
    if not isinstance(port, int) or not 0 <= port < 65536:
        raise ConfigError("CONFIG_INVALID", f"bad port {port!r}")
    if not isinstance(capacity, int) or capacity < 1:
        raise ConfigError("CONFIG_INVALID", f"queue capacity must be >= 1, got {capacity!r}")
    broker = Broker(role, capacity)
    stop = _install_signals(lambda: emit_record("stats", broker.stats()))
    server = await BrokerServer(broker, args.host or conf.get("host", "127.0.0.1"), port).start()
    emit_record("listening", {"broker": broker.name, "host": server.host, "port": server.port})
    await stop.wait()
    await asyncio.wait_for(server.stop(), DRAIN_S)
    emit_record("stats", broker.stats())
    return 0


async def run_register(args) -> int:
    from .register import ConflictPolicy, Registry, RegisterService
    from .transport import TcpLink

    conf = load_section(args.config, "register") if args.config else {}
    host, port = parse_endpoint(args.broker_endpoint or conf.get("broker_endpoint", "127.0.0.1:7001"))
    policy = ConflictPolicy.parse(args.policy or conf.get("policy", "reject"))
    snap = args.snapshot or conf.get("snapshot")
    if snap and os.path.exists(snap):
        registry = Registry.restore(snap, policy)
        log.info("restored %d nodes, %d apps from %s", len(registry.nodes), len(registry.apps), snap)
    else:
        if snap and not os.path.isdir(os.path.dirname(os.path.abspath(snap))):
            raise ConfigError("CONFIG_INVALID", f"snapshot directory does not exist: {snap}")
        registry = Registry(policy, snapshot_path=snap)
    link = TcpLink("register", host, port)
    service = RegisterService(registry, link)

    def stats():
        emit_record("stats", {"service": "register", "nodes": len(registry.nodes),
                              "apps": len(registry.apps), "claims": len(registry.claims),
                              "handled": service.handled})
    stop = _install_signals(stats)
    service.start()
    await stop.wait()
    await asyncio.wait_for(link.close(), DRAIN_S)
    if snap:
        registry.snapshot()
    stats()
    return 0


def _peer_links(conf: dict):
    from .translation import PeerLink
    peers = []
    for d in conf.get("peers", []):
        try:
            peer = PeerLink.from_dict({**d, "endpoint": list(parse_endpoint(d["endpoint"]))})
        except (KeyError, TypeError) as exc:
            raise ConfigError("CONFIG_INVALID", f"peer entry {d!r}: {exc}") from None
        peers.append(peer)
    return peers


async def run_engine(args) -> int:
    from .apps import build_app
    from .engine import ControlEngine
    from .transport import AsyncioScheduler, TcpLink
    from .translation import (NativeChannel, TcpForeignChannel, TranslationGateway,
                              default_translators)

    conf = load_section(args.config, "engine")
    engine_id = conf.get("engine_id")
    if not isinstance(engine_id, str) or not engine_id:
        raise ConfigError("CONFIG_INVALID", "engine config needs 'engine_id'")
    node_ep = parse_endpoint(conf.get("node_broker", "127.0.0.1:7001"))
    interai_ep = parse_endpoint(conf["interai_broker"]) if conf.get("interai_broker") else None
    apps = [build_app(spec) for spec in conf.get("apps", [])]
    peers = _peer_links(conf)
    state_dir = conf.get("state_dir")

    def channel_for(peer):
        host, port = peer.endpoint
        if peer.native:
            return NativeChannel(peer.peer_controller_id, TcpLink(engine_id, host, port, max_attempts=5))
        return TcpForeignChannel(peer.peer_controller_id, host, port)

    node_link = TcpLink(engine_id, *node_ep)
    interai_link = TcpLink(engine_id, *interai_ep) if interai_ep else None
    engine = ControlEngine(engine_id, node_link, interai_link, AsyncioScheduler(),
                           float(conf.get("callback_budget_ms", 10.0)),
                           channel_factory=channel_for, state_dir=state_dir)
    stop = _install_signals(lambda: emit_record("stats", engine.stats()))
    engine.start()
    await node_link.wait_connected(timeout=float(conf.get("connect_timeout_s", 30)))
    for app in apps:
        try:
            await asyncio.wait_for(asyncio.wrap_future(engine.load_app(app)), 10)
        except AicfError as exc:
            log.error("app %s refused: %s", app.descriptor.app_id, exc)
    for peer in peers:
        engine.federate(peer)
    gateway = None
    gw = conf.get("gateway")
    if gw:
        if interai_link is None:
            raise ConfigError("CONFIG_INVALID", "a gateway needs 'interai_broker'")
        gateway = TranslationGateway(default_translators(), gw.get("kind", "legacy-sdn-v0"),
                                     interai_link, engine_id)
        await gateway.start(gw.get("host", "127.0.0.1"), int(gw.get("port", 0)))
        emit_record("gateway", {"kind": gateway.kind, "port": gateway.port})

    await stop.wait()
    for app_id in list(engine.apps):
        engine.unload_app(app_id)
    await asyncio.sleep(0.05)
    if gateway is not None:
        await gateway.stop()
    await asyncio.wait_for(node_link.close(), DRAIN_S)
    if interai_link is not None:
        await asyncio.wait_for(interai_link.close(), DRAIN_S)
    emit_record("stats", engine.stats())
    return 0


async def run_agent(args) -> int:
    from .agent import AgentConfig, NodeAgent
    from .errors import AgentError
    from .transport import AsyncioScheduler, TcpLink

    conf = load_section(args.config, "agent")
    try:
        agent_conf = AgentConfig.from_dict(conf)
        agent_conf.validate()
    except AgentError as exc:
        raise ConfigError("CONFIG_INVALID", exc.detail) from None
    host, port = parse_endpoint(agent_conf.broker_endpoint or "127.0.0.1:7001")
    link = TcpLink(agent_conf.descriptor.node_id, host, port)
    agent = NodeAgent(agent_conf, link, AsyncioScheduler())

    def stats():
        emit_record("stats", {"node": agent.node_id, "registered": agent.registered,
                              "received": agent.received, "applied": agent.applied,
                              "rejected": agent.rejected, "published": agent.published})
    stop = _install_signals(stats)
    agent.start()
    await stop.wait()
    await asyncio.wait_for(link.close(), DRAIN_S)
    stats()
    return 0


def run_sim(args) -> int:
    from .netsim import SimConfig, balancing_scenario, cooperative_scenario, emit_metrics, run_mode

    if args.scenario:
        cfg = SimConfig.load(args.scenario)
    else:
        cfg = balancing_scenario() if args.mode == "balanced" else cooperative_scenario()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    t0 = time.perf_counter()
    runs = run_mode(cfg, args.mode)
    files = emit_metrics(runs, args.out)
    for r in runs:
        log.info("%s seed=%d mean=%.3fus p99=%.3fus delivered=%d controls=%d", r.mode, r.seed,
                 r.mean_us, r.p99_us, r.delivered, r.controls_emitted)
    log.info("wrote %s in %.2fs", ", ".join(files), time.perf_counter() - t0)
    return 0


async def run_stats(args) -> int:
    from .message import MsgType
    from .transport import TcpLink

    host, port = parse_endpoint(args.broker_endpoint)
    link = TcpLink(f"stats-{os.getpid()}", host, port, max_attempts=1)
    got: asyncio.Future = asyncio.get_running_loop().create_future()

    def on_env(env):
        if env.msg_type is MsgType.HEARTBEAT and "stats" in env.payload and not got.done():
            got.set_result(env.payload["stats"])

    link.on_envelope = on_env
    link.on_connect = lambda: link.send(MsgType.HEARTBEAT, {"stats": True})
    link.on_failure = lambda exc: got.done() or got.set_exception(
        AicfError("UNREACHABLE", f"{host}:{port}: {exc}"))
    link.start()
    try:
        stats = await asyncio.wait_for(got, args.timeout)
    except asyncio.TimeoutError:
        raise AicfError("TIMEOUT", f"no stats from {host}:{port} within {args.timeout}s") from None
    finally:
        await link.close()
    print(json.dumps(stats, sort_keys=True, separators=(",", ":")))
    return 0


ASYNC_COMMANDS = {"broker": run_broker, "register": run_register, "engine": run_engine,
                  "agent": run_agent, "stats": run_stats}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level, _configured_level(getattr(args, "config", None)))
        if args.command == "sim":
            return run_sim(args)
        return asyncio.run(ASYNC_COMMANDS[args.command](args))
    except ConfigError as exc:
        sys.stderr.write(error_line(exc.code, exc.detail) + "\n")
        return EXIT_CONFIG
    except AicfError as exc:
        sys.stderr.write(error_line("RUNTIME", exc.detail, cause=exc.code) + "\n")
        return EXIT_RUNTIME
    except (OSError, asyncio.TimeoutError) as exc:
        sys.stderr.write(error_line("RUNTIME", str(exc) or type(exc).__name__,
                                    cause=type(exc).__name__) + "\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
