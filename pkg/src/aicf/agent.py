"""Node control module: the piece that runs on every managed node.

It registers the node, publishes its measurements and applies control
values addressed to it. Every received control is answered on a synthetic
measurement topic, ``node/<id>/pm/__applied`` or ``node/<id>/pm/__rejected``.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import AgentError
from .message import Envelope, MsgType, NodeDescriptor, ctrl_topic, pm_topic, reply_topic, split_topic

log = logging.getLogger(__name__)

APPLIED = "__applied"
REJECTED = "__rejected"


@dataclass
class AgentConfig:
    descriptor: NodeDescriptor
    broker_endpoint: Any = None
    publish_periods: dict[str, float] = field(default_factory=dict)
    apply_hooks: dict[str, Callable[[Any], None]] = field(default_factory=dict)
    sources: dict[str, Callable[[], Any]] = field(default_factory=dict)

    def validate(self) -> None:
        problems = self.descriptor.problems()
        controls = {p.name for p in self.descriptor.controls}
        metrics = {m.name for m in self.descriptor.measurements}
        problems += [f"apply_hook for unknown param {k!r}" for k in self.apply_hooks if k not in controls]
        problems += [f"publish period for unknown metric {k!r}" for k in self.publish_periods if k not in metrics]
        problems += [f"source for unknown metric {k!r}" for k in self.sources if k not in metrics]
        problems += [f"negative period for {k!r}" for k, v in self.publish_periods.items() if v < 0]
        if problems:
            raise AgentError("MALFORMED", "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        """Build from a config document. Sources are synthetic (for standalone
        runs): ``{"metric": {"constant": v}}`` or ``{"metric": {"walk": [start, step]}}``."""
        try:
            desc = NodeDescriptor.from_dict(d["descriptor"])
            sources = {k: _synthetic_source(k, spec) for k, spec in d.get("sources", {}).items()}
            hooks = {name: _logging_hook(desc.node_id, name) for name in d.get("apply_hooks", ())}
            ep = d.get("broker_endpoint")
            return cls(desc, tuple(ep) if isinstance(ep, list) else ep,
                       dict(d.get("publish_periods", {})), hooks, sources)
        except (KeyError, TypeError, ValueError) as exc:
            raise AgentError("MALFORMED", f"agent config: {exc}") from None


def _synthetic_source(metric: str, spec: dict) -> Callable[[], Any]:
    if "constant" in spec:
        value = spec["constant"]
        return lambda: value
    if "walk" in spec:
        start, step = spec["walk"]
        rng = random.Random(metric)
        state = {"v": start}

        def walk():
            state["v"] = max(0, state["v"] + rng.uniform(-step, step))
            return state["v"]
        return walk
    raise ValueError(f"unknown source spec for {metric}: {spec}")


def _logging_hook(node_id: str, param: str) -> Callable[[Any], None]:
    def hook(value):
        log.info("node %s applied %s=%r", node_id, param, value)
    return hook


class NodeAgent:
    def __init__(self, config: AgentConfig, link, scheduler,
                 retry_base_ms: float = 200, retry_cap_ms: float = 5000):
        config.validate()
        self.config = config
        self.desc = config.descriptor
        self.node_id = config.descriptor.node_id
        self.link = link
        self.scheduler = scheduler
        self.retry_base_ms = retry_base_ms
        self.retry_cap_ms = retry_cap_ms
        self.registered = False
        self.registration_attempts = 0
        self.registration_error: dict | None = None
        self.received = 0
        self.applied = 0
        self.rejected = 0
        self.published: dict[str, int] = {}
        self._retry_handle = None
        self._retry_delay_ms = retry_base_ms
        self._timers_started = False
        self._ctrl_prefix = f"node/{self.node_id}/ctrl/"
        link.on_connect = self._on_connect
        link.on_envelope = self._on_envelope

    def start(self) -> None:
        self.link.start()

    # -- registration --------------------------------------------------------

    def _on_connect(self) -> None:
        self.link.subscribe(reply_topic(self.node_id))
        self.link.subscribe(f"node/{self.node_id}/ctrl/#")
        self._retry_delay_ms = self.retry_base_ms
        self._register()

    def _register(self) -> None:
        if self.registered or self.registration_error is not None:
            return
        self.registration_attempts += 1
        self.link.send(MsgType.REGISTER_NODE, self.desc.to_dict())
        if self.registered:
            return
        if self._retry_handle is not None:
            self._retry_handle.cancel()
        self._retry_handle = self.scheduler.call_later(int(self._retry_delay_ms * 1000), self._register)
        self._retry_delay_ms = min(self.retry_cap_ms, self._retry_delay_ms * 2)

    def _on_envelope(self, env: Envelope) -> None:
        t = env.msg_type
        if t is MsgType.PUBLISH:
            if env.topic and env.topic.startswith(self._ctrl_prefix):
                self.apply_control(env)
            return
        p = env.payload
        if p.get("reply_to") != self.node_id:
            return
        if t is MsgType.REGISTER_ACK and p.get("op") == "REGISTER_NODE":
            self._registered()
        elif t is MsgType.EXCEPTION:
            log.error("node %s registration refused: %s", self.node_id, p)
            self.registration_error = p
            if self._retry_handle is not None:
                self._retry_handle.cancel()

    def _registered(self) -> None:
        if self._retry_handle is not None:
            self._retry_handle.cancel()
            self._retry_handle = None
        if self.registered:
            return
        self.registered = True
        log.info("node %s registered after %d attempt(s)", self.node_id, self.registration_attempts)
        if not self._timers_started:
            self._timers_started = True
            for m in self.desc.measurements:
                period = self.config.publish_periods.get(m.name, m.period_ms)
                if period > 0 and m.name in self.config.sources:
                    self.scheduler.call_later(int(period * 1000), self._periodic, m.name, period)

    def _periodic(self, metric: str, period_ms: float) -> None:
        self.publish_measurement(metric, self.config.sources[metric]())
        self.scheduler.call_later(int(period_ms * 1000), self._periodic, metric, period_ms)

    # -- measurements --------------------------------------------------------

    def publish_measurement(self, metric: str, value: Any) -> Envelope:
        spec = self.desc.metric(metric)
        if spec is None:
            raise AgentError("UNKNOWN_METRIC", f"{self.node_id} exposes no metric {metric!r}")
        return self._publish(metric, {"metric": metric, "value": value, "unit": spec.unit})

    def _publish(self, metric: str, payload: dict) -> Envelope:
        self.published[metric] = self.published.get(metric, 0) + 1
        return self.link.publish(pm_topic(self.node_id, metric), payload)

    # -- controls ------------------------------------------------------------

    def apply_control(self, env: Envelope) -> bool:
        """Validate and apply one control envelope; True when applied."""
        parts = split_topic(env.topic or "")
        if parts is None or parts[0] != self.node_id or parts[1] != "ctrl":
            return False
        self.received += 1
        param = parts[2]
        p = env.payload
        value = p.get("value")
        src = p.get("app_id")
        spec = self.desc.control(param)
        if spec is None:
            reason = f"unknown param {param!r}"
        elif "value" not in p:
            reason = "missing value"
        else:
            reason = spec.check(value)
        if reason is None:
            hook = self.config.apply_hooks.get(param)
            try:
                if hook is not None:
                    hook(value)
            except Exception as exc:
                reason = f"hook failed: {exc}"
                log.exception("node %s: hook for %s failed", self.node_id, param)
        if reason is not None:
            self.rejected += 1
            self._publish(REJECTED, {"metric": REJECTED, "param": param, "value": value,
                                     "src_app": src, "reason": reason})
            return False
        self.applied += 1
        self._publish(APPLIED, {"metric": APPLIED, "param": param, "value": value,
                                "src_app": src})
        return True

    def ctrl_topics(self) -> list[str]:
        return [ctrl_topic(self.node_id, p.name) for p in self.desc.controls]
