"""In-process wiring shared by the tests: brokers, Register, agents, engines."""

from __future__ import annotations

from aicf.agent import AgentConfig, NodeAgent
from aicf.broker import Broker, BrokerRole
from aicf.engine import ControlApp, ControlEngine, native_local_channel
from aicf.message import AppDescriptor, MetricSpec, MsgType, NodeDescriptor, ParamSpec
from aicf.register import ConflictPolicy, Registry, RegisterService
from aicf.transport import LocalNetwork, ManualScheduler


def onu(node_id: str = "onu-1", metrics=("queue_bytes",), params=("grant_bytes",)) -> NodeDescriptor:
    return NodeDescriptor(
        node_id, "pon_onu",
        measurements=tuple(MetricSpec(m, "B", 100) for m in metrics),
        controls=tuple(ParamSpec(p, "integer", 0, 100_000) for p in params),
    )


def olt(node_id: str = "olt-0") -> NodeDescriptor:
    return NodeDescriptor(
        node_id, "pon_olt",
        measurements=(MetricSpec("channel_util", "ratio", 1000), MetricSpec("rx_bytes", "B", 1000)),
        controls=(ParamSpec("grant_map", "structured"),
                  ParamSpec("mode", "enumerated", choices=("fixed", "dynamic"))),
    )


def du(node_id: str = "du-0") -> NodeDescriptor:
    return NodeDescriptor(node_id, "ran_du", measurements=(MetricSpec("ul_grant_bytes", "B", 0),))


class Recorder:
    """A bare client link that keeps everything it receives."""

    def __init__(self, link):
        self.link = link
        self.inbox = []
        link.on_envelope = self.inbox.append
        link.start()

    def of(self, msg_type: MsgType, topic_prefix: str = ""):
        return [e for e in self.inbox
                if e.msg_type is msg_type and (e.topic or "").startswith(topic_prefix)]

    def publishes(self, topic_prefix: str = ""):
        return self.of(MsgType.PUBLISH, topic_prefix)


class RecordingApp(ControlApp):
    tick_period_ms = 0

    def __init__(self, app_id: str, needs=(), claims=(), priority: int = 0):
        self.descriptor = AppDescriptor(app_id, tuple(needs), tuple(claims), priority)
        self.events = []

    def on_start(self, ctx):
        self.events.append(("start",))

    def on_measurement(self, ctx, node_id, metric, value, ts_us):
        self.events.append(("pm", node_id, metric, value))

    def on_interai(self, ctx, peer_id, payload):
        self.events.append(("interai", peer_id, payload))

    def on_revoked(self, ctx, node_id, param):
        self.events.append(("revoked", node_id, param))

    def on_stop(self, ctx):
        self.events.append(("stop",))

    def measurements(self):
        return [e for e in self.events if e[0] == "pm"]


class World:
    def __init__(self, policy: ConflictPolicy = ConflictPolicy.reject, capacity: int = 1024,
                 journal: bool = False):
        self.sched = ManualScheduler()
        self.net = LocalNetwork()
        self.node = self.net.add_broker(
            "node", Broker(BrokerRole.node_broker, capacity, clock=self.sched.now_us, name="node-broker"))
        self.interai = self.net.add_broker(
            "interai", Broker(BrokerRole.inter_ai_broker, capacity, clock=self.sched.now_us,
                              name="interai-broker"))
        self.registry = Registry(policy, journal=journal)
        self.register = RegisterService(self.registry, self.link("register"), autosnapshot=False)
        self.register.start()

    def link(self, client_id: str, endpoint: str = "node"):
        return self.net.link(endpoint, client_id, self.sched.now_us)

    def recorder(self, client_id: str, endpoint: str = "node") -> Recorder:
        return Recorder(self.link(client_id, endpoint))

    def agent(self, desc: NodeDescriptor, hooks=None, sources=None, periods=None) -> NodeAgent:
        conf = AgentConfig(desc, "node", dict(periods or {}), dict(hooks or {}), dict(sources or {}))
        agent = NodeAgent(conf, self.link(desc.node_id), self.sched)
        agent.start()
        return agent

    def engine(self, engine_id: str = "aic-0", interai_broker: str = "interai", **kw) -> ControlEngine:
        eng = ControlEngine(engine_id, self.link(engine_id), self.link(engine_id, interai_broker),
                            self.sched, channel_factory=native_local_channel(self.net, self.sched, engine_id),
                            **kw)
        eng.start()
        return eng


# --- randomized Register workloads ---------------------------------------------

NODE_POOL = [f"n{i}" for i in range(5)]
METRIC_POOL = ["m0", "m1", "m2"]
PARAM_POOL = ["p0", "p1", "p2"]
APP_POOL = [f"a{i}" for i in range(6)]


def random_registry_op(rng):
    r = rng.random()
    if r < 0.35:
        return ("node", rng.choice(NODE_POOL),
                tuple(rng.sample(METRIC_POOL, rng.randint(0, 3))),
                tuple(rng.sample(PARAM_POOL, rng.randint(0, 3))))
    if r < 0.75:
        pairs = [(n, x) for n in NODE_POOL for x in METRIC_POOL]
        needs = tuple(rng.sample(pairs, rng.randint(0, 2)))
        claims = tuple(rng.sample([(n, p) for n in NODE_POOL for p in PARAM_POOL], rng.randint(0, 2)))
        return ("app", rng.choice(APP_POOL), needs, claims, rng.randint(0, 3))
    if r < 0.9:
        return ("dereg", "app", rng.choice(APP_POOL))
    return ("dereg", "node", rng.choice(NODE_POOL))


def apply_to_registry(reg, op):
    """Returns (error code or None, missing set, revocations as tuples)."""
    from aicf.errors import RegistryError
    try:
        if op[0] == "node":
            _, nid, ms, ps = op
            out = reg.register_node(NodeDescriptor(
                nid, "other", tuple(MetricSpec(m) for m in ms), tuple(ParamSpec(p) for p in ps)))
        elif op[0] == "app":
            _, aid, needs, claims, prio = op
            out = reg.register_app(AppDescriptor(aid, needs, claims, prio), owner="eng")
        else:
            out = reg.deregister(op[1], op[2])
    except RegistryError as exc:
        return exc.code, set(map(tuple, exc.missing)), []
    return None, set(), [(r.app_id, r.node_id, r.param) for r in out]


def apply_to_model(model, op):
    if op[0] == "node":
        return model.register_node(op[1], op[2], op[3])
    if op[0] == "app":
        return model.register_app(*op[1:])
    return model.deregister(op[1], op[2])


def registry_matches_model(reg, model) -> bool:
    nodes = {n: (frozenset(m.name for m in d.measurements), frozenset(p.name for p in d.controls))
             for n, d in reg.nodes.items()}
    apps = {a: (d.required_measurements, d.controlled_params, d.priority) for a, d in reg.apps.items()}
    return nodes == model.nodes and apps == model.apps and reg.claims == model.claims


# --- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        why = self.detail if exc_type is None else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"criterion {self.number} {status}: {self.title}" + (f" ({why})" if why else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False
