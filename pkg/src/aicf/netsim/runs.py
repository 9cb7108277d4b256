"""Baseline and controlled simulation runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..agent import AgentConfig, NodeAgent
from ..broker import Broker, BrokerRole
from ..engine import ControlEngine
from ..errors import ConfigError
from ..message import MetricSpec, NodeDescriptor, ParamSpec
from ..register import Registry, RegisterService
from ..transport import LocalNetwork
from .apps import ChannelBalancerApp, CoopDbaApp
from .config import SimConfig
from .sim import OLT_ID, EventLoop, PonModel

log = logging.getLogger(__name__)

APP_NAMES = ("coop_dba", "channel_balancer")
ENGINE_ID = "aic-0"


@dataclass
class RunResult:
    scenario: str
    mode: str
    seed: int
    n_channels: int
    duration_us: float
    dba_cycle_us: float
    prop_delay_us: float
    samples: list[tuple[int, int, int]]  # (pkt_id, arrival_ns, delivered_ns)
    util: list[float]
    throughput_gbps: float
    generated: int
    delivered: int
    in_queue: int
    in_flight: int
    dropped: int
    trace_hash: str
    events: int
    granted: dict[tuple[int, int], int]
    cap_bytes: int
    causality_violations: list[str]
    controls_emitted: int = 0
    msgs_published: int = 0
    switches: int = 0
    control: dict = field(default_factory=dict)

    def latencies_us(self) -> np.ndarray:
        return np.array([(d - a) / 1000 for _, a, d in self.samples], dtype=float)

    def latency_by_pid(self) -> dict[int, float]:
        return {pid: (d - a) / 1000 for pid, a, d in self.samples}

    @property
    def mean_us(self) -> float:
        lat = self.latencies_us()
        return float(lat.mean()) if lat.size else float("nan")

    def percentile_us(self, q: float) -> float:
        lat = self.latencies_us()
        return float(np.percentile(lat, q)) if lat.size else float("nan")

    @property
    def p50_us(self) -> float:
        return self.percentile_us(50)

    @property
    def p99_us(self) -> float:
        return self.percentile_us(99)

    def conserved(self) -> bool:
        return self.generated == self.delivered + self.in_queue + self.in_flight + self.dropped

    def capacity_ok(self) -> bool:
        return all(v <= self.cap_bytes for v in self.granted.values())


def _collect(model: PonModel, loop: EventLoop, mode: str) -> RunResult:
    cfg = model.cfg
    end = model.end_ns
    samples, in_flight = [], 0
    for p in model.packets:
        d = p.delivered_ns
        if d is None or d < 0:
            continue
        if d <= end:
            samples.append((p.pid, p.arrival_ns, d))
        else:
            in_flight += 1
    delivered_bytes = sum(p.size for p in model.packets
                          if p.delivered_ns is not None and 0 <= p.delivered_ns <= end)
    seconds = cfg.duration_us / 1e6
    rate_bytes = cfg.line_rate_gbps * 1e9 / 8 * seconds
    return RunResult(
        scenario=cfg.name, mode=mode, seed=cfg.seed, n_channels=cfg.n_channels,
        duration_us=cfg.duration_us, dba_cycle_us=cfg.dba_cycle_us, prop_delay_us=cfg.prop_delay_us,
        samples=samples,
        util=[b / rate_bytes for b in model.sent_bytes],
        throughput_gbps=delivered_bytes * 8 / seconds / 1e9,
        generated=len(model.packets),
        delivered=len(samples),
        in_queue=sum(len(o.queue) for o in model.onus.values()),
        in_flight=in_flight,
        dropped=sum(o.dropped for o in model.onus.values()),
        trace_hash=loop.trace_hash(),
        events=loop.processed,
        granted=dict(model.granted),
        cap_bytes=model.cap_bytes,
        causality_violations=list(model.causality_violations),
        switches=sum(o.switches for o in model.onus.values()),
    )


def run_baseline(cfg: SimConfig) -> RunResult:
    """Status-report DBA only; no framework in the loop."""
    loop = EventLoop()
    model = PonModel(cfg, loop)
    model.start()
    loop.run(model.end_ns)
    return _collect(model, loop, "baseline")


# --- controlled runs ---------------------------------------------------------

def _olt_descriptor(cfg: SimConfig) -> NodeDescriptor:
    return NodeDescriptor(OLT_ID, "pon_olt",
                          measurements=(MetricSpec("channel_util", "ratio", cfg.report_period_us / 1000),),
                          controls=(ParamSpec("grant_map", "structured"),))


def _onu_descriptor(cfg: SimConfig, oid: str) -> NodeDescriptor:
    choices = tuple(str(c) for c in range(cfg.n_channels))
    return NodeDescriptor(oid, "pon_onu",
                          measurements=(MetricSpec("load_bytes", "bytes", cfg.report_period_us / 1000),),
                          controls=(ParamSpec("onu_channel", "enumerated", choices=choices),))


def _du_descriptor(du: str) -> NodeDescriptor:
    return NodeDescriptor(du, "ran_du", measurements=(MetricSpec("ul_grant_bytes", "bytes", 0),))


class ControlledRun:
    """The PON model with brokers, Register, engine and agents in the loop.

    Everything shares one :class:`EventLoop` as scheduler and clock and talks
    over a :class:`LocalNetwork`, so the wire codec is exercised on every
    message while the run stays deterministic.
    """

    def __init__(self, cfg: SimConfig, apps=APP_NAMES):
        unknown = set(apps) - set(APP_NAMES)
        if unknown:
            raise ConfigError("CONFIG_INVALID", f"unknown apps: {sorted(unknown)}")
        self.cfg = cfg
        self.app_names = tuple(a for a in APP_NAMES if a in apps)
        self.loop = loop = EventLoop()
        self.model = model = PonModel(cfg, loop)
        clock = loop.now_us
        self.net = net = LocalNetwork()
        self.node_broker = net.add_broker("node", Broker(BrokerRole.node_broker, clock=clock))
        self.interai_broker = net.add_broker("interai", Broker(BrokerRole.inter_ai_broker, clock=clock))
        self.registry = Registry()
        self.register = RegisterService(self.registry, net.link("node", "register", clock))
        self.agents: dict[str, NodeAgent] = {}

        period_ms = cfg.report_period_us / 1000
        self._agent(_olt_descriptor(cfg), {"channel_util": model.take_channel_util},
                    {"grant_map": self._apply_grant_map}, period_ms)
        for oid in cfg.onu_ids():
            self._agent(_onu_descriptor(cfg, oid), {"load_bytes": lambda o=oid: model.take_load(o)},
                        {"onu_channel": lambda v, o=oid: model.request_switch(o, int(v))}, period_ms)
        for du in cfg.du_ids():
            self._agent(_du_descriptor(du), {}, {}, 0)
        model.announce = self._announce

        self.engine = ControlEngine(ENGINE_ID, net.link("node", ENGINE_ID, clock),
                                    net.link("interai", ENGINE_ID, clock), loop)
        self.apps = []
        if "coop_dba" in self.app_names and cfg.du_ids():
            self.apps.append(CoopDbaApp(cfg.du_to_onu(), OLT_ID))
        if "channel_balancer" in self.app_names:
            self.apps.append(ChannelBalancerApp(
                dict(zip(cfg.onu_ids(), cfg.onu_to_channel)), cfg.n_channels, cfg.report_period_us,
                cfg.line_rate_gbps, cfg.balancer_threshold, cfg.balancer_cooldown_us, OLT_ID))

    def _agent(self, desc, sources, hooks, period_ms) -> None:
        periods = {m: period_ms for m in sources}
        conf = AgentConfig(desc, "node", periods, hooks, sources)
        self.agents[desc.node_id] = NodeAgent(conf, self.net.link("node", desc.node_id, self.loop.now_us),
                                              self.loop)

    def _apply_grant_map(self, value: dict) -> None:
        for onu, entries in sorted(value.items()):
            self.model.add_pregrants(onu, entries)

    def _announce(self, du: str, bursts) -> None:
        if not bursts:
            return
        value = {"bytes": sum(b.nbytes for b in bursts),
                 "bursts": [[b.arrival_ns, b.nbytes] for b in bursts]}
        self.agents[du].publish_measurement("ul_grant_bytes", value)

    def run(self) -> RunResult:
        self.register.start()
        for agent in self.agents.values():
            agent.start()
        self.engine.start()
        for app in self.apps:
            fut = self.engine.load_app(app)
            fut.result(timeout=0)  # in-process: registration completes synchronously
        self.model.start()
        self.loop.run(self.model.end_ns)
        mode = "+".join(a.descriptor.app_id for a in self.apps) or "controlled"
        res = _collect(self.model, self.loop, mode)
        res.controls_emitted = self.engine.controls_emitted
        res.msgs_published = self.node_broker.published_total
        res.control = {"engine": self.engine.stats(), "broker": self.node_broker.stats(),
                       "frames": self.net.frames,
                       "agents": {k: {"applied": a.applied, "rejected": a.rejected}
                                  for k, a in sorted(self.agents.items())}}
        return res


def run_controlled(cfg: SimConfig, apps=APP_NAMES) -> RunResult:
    """Run ``cfg`` with the named reference apps hosted by a control engine."""
    return ControlledRun(cfg, apps).run()


MODES = ("baseline", "cooperative", "balanced", "both")


def run_mode(cfg: SimConfig, mode: str) -> list[RunResult]:
    """CLI modes: ``both`` is the paired baseline + cooperative comparison."""
    if mode == "baseline":
        runs = [run_baseline(cfg)]
    elif mode == "cooperative":
        runs = [run_controlled(cfg, ("coop_dba",))]
    elif mode == "balanced":
        runs = [run_controlled(cfg, ("channel_balancer",))]
    elif mode == "both":
        runs = [run_baseline(cfg), run_controlled(cfg, ("coop_dba",))]
    else:
        raise ConfigError("CONFIG_INVALID", f"unknown mode {mode!r}; expected one of {MODES}")
    for r, name in zip(runs, ["baseline", "cooperative"] if mode == "both" else [mode]):
        r.mode = name
    return runs
