import asyncio
import socket

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aicf.agent import AgentConfig, NodeAgent
from aicf.broker import Broker
from aicf.errors import AgentError
from aicf.message import MsgType, ctrl_topic
from aicf.register import Registry, RegisterService
from aicf.server import BrokerServer
from aicf.transport import AsyncioScheduler, TcpLink
from helpers import World, onu


def test_registers_and_subscribes_ctrl():
    w = World()
    a = w.agent(onu())
    assert a.registered and a.registration_attempts == 1
    assert "onu-1" in w.registry.nodes
    filters = {str(s.filter) for s in w.node.subscriptions("onu-1")}
    assert filters == {"register/reply/onu-1", "node/onu-1/ctrl/#"}


def test_publish_measurement_payload():
    w = World()
    sub = w.recorder("app")
    sub.link.subscribe("node/onu-1/pm/*")
    a = w.agent(onu())
    a.publish_measurement("queue_bytes", 1500)
    (env,) = sub.publishes()
    assert env.topic == "node/onu-1/pm/queue_bytes"
    assert env.payload == {"metric": "queue_bytes", "value": 1500, "unit": "B"}


def test_unknown_metric():
    w = World()
    sub = w.recorder("app")
    sub.link.subscribe("node/#")
    a = w.agent(onu())
    with pytest.raises(AgentError) as ei:
        a.publish_measurement("nope", 1)
    assert ei.value.code == "UNKNOWN_METRIC" and sub.publishes() == []


def test_hook_for_unknown_param_is_fatal():
    with pytest.raises(AgentError, match="MALFORMED"):
        AgentConfig(onu(), apply_hooks={"ghost": print}).validate()
    w = World()
    with pytest.raises(AgentError, match="MALFORMED"):
        w.agent(onu(), hooks={"ghost": print})


def test_config_from_dict():
    conf = AgentConfig.from_dict({
        "descriptor": onu().to_dict(), "broker_endpoint": ["127.0.0.1", 7001],
        "publish_periods": {"queue_bytes": 50}, "apply_hooks": ["grant_bytes"],
        "sources": {"queue_bytes": {"walk": [100, 10]}}})
    conf.validate()
    assert conf.broker_endpoint == ("127.0.0.1", 7001) and set(conf.apply_hooks) == {"grant_bytes"}
    assert conf.sources["queue_bytes"]() >= 0
    with pytest.raises(AgentError, match="MALFORMED"):
        AgentConfig.from_dict({"descriptor": {}})
    with pytest.raises(AgentError, match="MALFORMED"):
        AgentConfig.from_dict({"descriptor": onu().to_dict(), "sources": {"queue_bytes": {"odd": 1}}})


def ctrl(w, value, param="grant_bytes", app="A"):
    return w.recorder(f"ctl-{param}-{value}").link.publish(
        ctrl_topic("onu-1", param), {"param": param, "value": value, "app_id": app})


def test_apply_and_reject():
    w = World()
    seen = []
    watch = w.recorder("watch")
    watch.link.subscribe("node/onu-1/pm/#")
    a = w.agent(onu(), hooks={"grant_bytes": seen.append})
    ctrl(w, 8000)
    ctrl(w, -5)
    assert seen == [8000]
    applied = watch.publishes("node/onu-1/pm/__applied")
    rejected = watch.publishes("node/onu-1/pm/__rejected")
    assert [e.payload["value"] for e in applied] == [8000]
    assert [e.payload["value"] for e in rejected] == [-5] and rejected[0].payload["reason"]
    assert (a.applied, a.rejected, a.received) == (1, 1, 2)


def test_controls_applied_in_order():
    w = World()
    seen = []
    w.agent(onu(), hooks={"grant_bytes": seen.append})
    link = w.recorder("eng").link
    for v in (5, 6):
        link.publish(ctrl_topic("onu-1", "grant_bytes"), {"param": "grant_bytes", "value": v})
    assert seen == [5, 6]


def test_failing_hook_reports_rejection():
    w = World()

    def hook(v):
        raise RuntimeError("device busy")

    a = w.agent(onu(), hooks={"grant_bytes": hook})
    ctrl(w, 10)
    assert (a.applied, a.rejected) == (0, 1)


@given(st.lists(st.tuples(st.sampled_from(["grant_bytes", "ghost", "__x"]),
                          st.one_of(st.integers(-10, 200_000), st.text(max_size=3), st.none())),
                max_size=30))
@settings(max_examples=40, deadline=None)
def test_fuzzed_controls(ops):
    w = World()
    seen = []
    watch = w.recorder("watch")
    watch.link.subscribe("node/onu-1/pm/#")
    a = w.agent(onu(), hooks={"grant_bytes": seen.append})
    link = w.recorder("fuzz").link
    for param, value in ops:
        link.publish(ctrl_topic("onu-1", param), {"param": param, "value": value})
    valid = [v for p, v in ops if p == "grant_bytes" and isinstance(v, int) and 0 <= v <= 100_000]
    assert seen == valid
    assert a.applied == len(valid) and a.applied + a.rejected == a.received == len(ops)
    assert len(watch.publishes("node/onu-1/pm/__applied")) == a.applied
    metrics = {e.topic.rsplit("/", 1)[1] for e in watch.publishes()}
    assert metrics <= {"queue_bytes", "__applied", "__rejected"}


def test_periodic_publication_ratios():
    w = World()
    sub = w.recorder("app")
    sub.link.subscribe("node/onu-1/pm/*")
    w.agent(onu(metrics=("fast", "slow")), sources={"fast": lambda: 1, "slow": lambda: 2},
            periods={"fast": 100, "slow": 250})
    w.sched.advance(1_000_000)
    counts = {m: len(sub.publishes(f"node/onu-1/pm/{m}")) for m in ("fast", "slow")}
    assert abs(counts["fast"] - 10) <= 1 and abs(counts["slow"] - 4) <= 1


def test_registration_backoff_schedule():
    w = World()
    w.register.link.close()  # Register down
    tries = []
    w.node.tap = lambda conn, env: tries.append(w.sched.now_us()) if env.msg_type is MsgType.REGISTER_NODE else None
    a = w.agent(onu())
    w.sched.run_until(12_000_000)
    assert not a.registered
    # base 200 ms, doubling, capped at 5 s
    expected, t, d = [0], 0, 200_000
    while t + d <= 12_000_000:
        t += d
        expected.append(t)
        d = min(5_000_000, 2 * d)
    assert tries == expected
    service = RegisterService(Registry(), w.link("register"), autosnapshot=False)
    service.start()
    w.sched.run_until(20_000_000)
    assert a.registered and a.registration_attempts == len(expected) + 1


def test_refused_registration_stops_retrying():
    w = World()
    w.registry.register_node(onu(params=("grant_bytes", "other")))
    from aicf.message import AppDescriptor
    w.registry.register_app(AppDescriptor("A", (), (("onu-1", "other"),)))
    a = w.agent(onu())
    w.sched.run_until(10_000_000)
    assert not a.registered and a.registration_error["code"] == "DUPLICATE_ID"
    assert a.registration_attempts == 1


def test_agent_waits_for_late_tcp_broker():
    async def main():
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        sched = AsyncioScheduler()
        link = TcpLink("onu-1", "127.0.0.1", port, backoff_base=0.05, backoff_cap=0.2)
        agent = NodeAgent(AgentConfig(onu()), link, sched, retry_base_ms=50)
        agent.start()
        await asyncio.sleep(0.3)
        assert not agent.registered and link.attempts >= 2
        server = await BrokerServer(Broker(), port=port).start()
        reg_link = TcpLink("register", "127.0.0.1", port)
        RegisterService(Registry(), reg_link, autosnapshot=False).start()
        for _ in range(100):
            if agent.registered:
                break
            await asyncio.sleep(0.02)
        ok = agent.registered
        await link.close()
        await reg_link.close()
        await server.stop()
        return ok

    assert asyncio.run(main())
