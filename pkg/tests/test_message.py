import json
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aicf.errors import CodecError
from aicf.message import (
    HEADER, MAX_FRAME, TOPIC_TYPES, AppDescriptor, Envelope, FrameBuffer, MetricSpec, MsgType,
    NodeDescriptor, ParamSpec, TopicFilter, canonical_topics, decode, decode_all, encode,
    split_topic, topic_matches,
)
from oracles import topic_matches_oracle

# --- strategies -------------------------------------------------------------

idents = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20)
segment = st.text("abcdefghijklmnopqrstuvwxyz0123456789-_.", min_size=1, max_size=8)
topics = st.lists(segment, min_size=1, max_size=5).map("/".join)
u64 = st.integers(0, 2**64 - 1)
json_scalars = st.none() | st.booleans() | st.integers(-(2**63), 2**63) | st.text(max_size=20) | \
    st.floats(allow_nan=False, allow_infinity=False)
json_values = st.recursive(json_scalars,
                           lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
                           max_leaves=12)
payloads = st.dictionaries(st.text(max_size=10), json_values, max_size=6)


@st.composite
def envelopes(draw):
    t = draw(st.sampled_from(list(MsgType)))
    topic = draw(topics) if t in TOPIC_TYPES else None
    return Envelope(t, draw(idents), topic, draw(u64), draw(u64), draw(payloads))


# --- framing -----------------------------------------------------------------

def test_heartbeat_frame_length_prefix():
    frame = encode(Envelope(MsgType.HEARTBEAT, "olt-0", None, 0, 0, {}))
    (n,) = struct.unpack(">I", frame[:4])
    assert n == len(frame) - 4


def test_exact_bytes_and_field_order():
    env = Envelope(MsgType.PUBLISH, "onu-1", "node/onu-1/pm/q", 5, 7, {"b": 1, "a": [1, 2]})
    body = encode(env)[4:]
    assert body == b'{"v":1,"type":"PUBLISH","sender":"onu-1","topic":"node/onu-1/pm/q",' \
                   b'"ts_us":5,"seq":7,"payload":{"a":[1,2],"b":1}}'
    assert list(json.loads(body)) == ["v", "type", "sender", "topic", "ts_us", "seq", "payload"]


def test_topicless_type_encodes_null_topic():
    body = encode(Envelope(MsgType.HEARTBEAT, "x"))[4:]
    assert b'"topic":null' in body


@given(envelopes())
@settings(max_examples=300)
def test_round_trip(env):
    frame = encode(env)
    back, used = decode(frame)
    assert back == env
    assert used == len(frame)


@given(st.lists(envelopes(), min_size=0, max_size=8))
@settings(max_examples=100)
def test_concatenated_frames_self_delimit(envs):
    blob = b"".join(encode(e) for e in envs)
    assert decode_all(blob) == envs


@given(st.lists(envelopes(), min_size=1, max_size=5), st.integers(1, 64))
@settings(max_examples=100)
def test_frame_buffer_any_chunking(envs, chunk):
    blob = b"".join(encode(e) for e in envs)
    fb = FrameBuffer()
    out = []
    for i in range(0, len(blob), chunk):
        fb.feed(blob[i:i + chunk])
        while (e := fb.pop()) is not None:
            out.append(e)
    assert out == envs and len(fb) == 0


def test_oversize_publish():
    env = Envelope(MsgType.PUBLISH, "a", "node/a/pm/x", 0, 0, {"blob": "x" * (2 * 1024 * 1024)})
    with pytest.raises(CodecError) as ei:
        encode(env)
    assert ei.value.code == "OVERSIZE"


def test_body_exactly_at_cap_is_accepted():
    base = len(encode(Envelope(MsgType.PUBLISH, "a", "node/t", 0, 0, {"p": ""}))) - HEADER.size
    env = Envelope(MsgType.PUBLISH, "a", "node/t", 0, 0, {"p": "x" * (MAX_FRAME - base)})
    assert len(encode(env)) == MAX_FRAME + HEADER.size
    big = Envelope(MsgType.PUBLISH, "a", "node/t", 0, 0, {"p": "x" * (MAX_FRAME - base + 1)})
    with pytest.raises(CodecError, match="OVERSIZE"):
        encode(big)


@pytest.mark.parametrize("env", [
    Envelope(MsgType.PUBLISH, "a", None),               # topic required
    Envelope(MsgType.HEARTBEAT, "a", "node/x"),         # topic forbidden
    Envelope(MsgType.HEARTBEAT, ""),                    # empty sender
    Envelope(MsgType.HEARTBEAT, "a", None, -1),         # negative ts
    Envelope(MsgType.HEARTBEAT, "a", None, 0, 2**64),   # seq overflow
    Envelope(MsgType.HEARTBEAT, "a", None, 0, 0, {"x": float("nan")}),
    Envelope(MsgType.HEARTBEAT, "a", version=2),
])
def test_invalid_envelopes(env):
    with pytest.raises(CodecError) as ei:
        encode(env)
    assert ei.value.code == "INVALID"


def test_truncated():
    with pytest.raises(CodecError) as ei:
        decode(struct.pack(">I", 10) + b"abcdef")
    assert ei.value.code == "TRUNCATED"
    with pytest.raises(CodecError, match="TRUNCATED"):
        decode(b"\x00\x00")


def _frame(doc) -> bytes:
    body = json.dumps(doc).encode()
    return struct.pack(">I", len(body)) + body


def test_unknown_type():
    doc = {"v": 1, "type": "BOGUS", "sender": "a", "topic": None, "ts_us": 0, "seq": 0, "payload": {}}
    with pytest.raises(CodecError) as ei:
        decode(_frame(doc))
    assert ei.value.code == "UNKNOWN_TYPE"


@pytest.mark.parametrize("body", [
    b"not json",
    b"[1,2]",
    b'{"v":1}',
    json.dumps({"v": 1, "type": "PUBLISH", "sender": "a", "topic": None, "ts_us": 0, "seq": 0,
                "payload": {}}).encode(),
    json.dumps({"v": 1, "type": "HEARTBEAT", "sender": "a", "topic": None, "ts_us": 0, "seq": 0,
                "payload": []}).encode(),
    b"\xff\xfe",
])
def test_malformed(body):
    with pytest.raises(CodecError) as ei:
        decode(struct.pack(">I", len(body)) + body)
    assert ei.value.code == "MALFORMED"


def test_insane_length_poisons_frame_buffer():
    fb = FrameBuffer()
    fb.feed(struct.pack(">I", MAX_FRAME + 1) + b"x")
    with pytest.raises(CodecError, match="MALFORMED"):
        fb.pop()
    assert fb.poisoned and fb.pop() is None


def test_bad_frame_with_sane_length_is_skipped():
    fb = FrameBuffer()
    good = encode(Envelope(MsgType.HEARTBEAT, "a"))
    fb.feed(struct.pack(">I", 3) + b"bad" + good)
    with pytest.raises(CodecError):
        fb.pop()
    assert fb.pop() == Envelope(MsgType.HEARTBEAT, "a")


# --- topics ------------------------------------------------------------------

@pytest.mark.parametrize("filt,topic,expected", [
    ("node/onu-1/pm/*", "node/onu-1/pm/queue_bytes", True),
    ("node/#", "node", True),
    ("node/#", "interai/x", False),
    ("node/*/ctrl/grant", "node/onu-1/pm/grant", False),
    ("node/*", "node", False),
    ("node/*", "node/a/b", False),
    ("#", "anything/at/all", True),
    ("a/b", "a/b", True),
])
def test_topic_examples(filt, topic, expected):
    assert topic_matches(TopicFilter.parse(filt), topic) is expected


filters = st.lists(segment | st.just("*"), min_size=0, max_size=4).flatmap(
    lambda segs: st.sampled_from([segs, segs + ["#"]]) if segs else st.just(["#"])).map("/".join)


@given(filters, topics)
@settings(max_examples=500)
def test_topic_matches_oracle(filt, topic):
    assert topic_matches(TopicFilter.parse(filt), topic) == topic_matches_oracle(filt, topic)


@given(topics, topics)
def test_literal_filter_is_equality(a, b):
    assert topic_matches(TopicFilter.parse(a), b) == (a == b)


@pytest.mark.parametrize("bad", ["a//b", "", "a/#/b", "#/#"])
def test_filter_validation(bad):
    with pytest.raises(ValueError):
        TopicFilter.parse(bad)


def test_canonical_topics():
    d = NodeDescriptor("onu-1", "pon_onu", (MetricSpec("queue_bytes"),), (ParamSpec("grant_bytes"),))
    assert canonical_topics(d) == ["node/onu-1/pm/queue_bytes", "node/onu-1/ctrl/grant_bytes"]
    assert canonical_topics(NodeDescriptor("x")) == []
    o = NodeDescriptor("olt-0", "pon_olt", (MetricSpec("a"), MetricSpec("b")), (ParamSpec("c"),))
    assert canonical_topics(o) == ["node/olt-0/pm/a", "node/olt-0/pm/b", "node/olt-0/ctrl/c"]


@given(st.lists(segment, unique=True, max_size=5), st.lists(segment, unique=True, max_size=5))
def test_canonical_topic_count(ms, ps):
    d = NodeDescriptor("n", measurements=tuple(MetricSpec(m) for m in ms),
                       controls=tuple(ParamSpec(p) for p in ps))
    assert len(canonical_topics(d)) == len(ms) + len(ps)


def test_split_topic():
    assert split_topic("node/onu-1/ctrl/grant") == ("onu-1", "ctrl", "grant")
    assert split_topic("node/onu-1/other/grant") is None
    assert split_topic("register/node") is None


# --- descriptors ---------------------------------------------------------------

def test_param_spec_checks():
    p = ParamSpec("g", "integer", 0, 10)
    assert p.check(5) is None
    assert p.check(11) and p.check(-1) and p.check(2.5) and p.check(True) and p.check("3")
    r = ParamSpec("r", "real", 0.0, 1.0)
    assert r.check(0.5) is None and r.check(1) is None and r.check(float("inf"))
    e = ParamSpec("m", "enumerated", choices=("a", "b"))
    assert e.check("a") is None and e.check("c")
    s = ParamSpec("s", "structured")
    assert s.check({"x": 1}) is None and s.check([1])


def test_descriptor_problems():
    assert ParamSpec("m", "enumerated").problems()
    assert ParamSpec("n", "integer", 5, 1).problems()
    assert NodeDescriptor("", "pon_onu").problems()
    assert NodeDescriptor("a", "toaster").problems()
    assert NodeDescriptor("a", measurements=(MetricSpec("x"), MetricSpec("x"))).problems()
    assert NodeDescriptor("a", measurements=(MetricSpec("x", period_ms=-1),)).problems()
    assert AppDescriptor("a", controlled_params=(("n", "p"), ("n", "p"))).problems()
    assert AppDescriptor("a", priority=-1).problems()
    assert not AppDescriptor("a", (("n", "m"),), (("n", "p"),), 3).problems()


def test_descriptor_dict_round_trip():
    d = NodeDescriptor("olt-0", "pon_olt", (MetricSpec("u", "ratio", 10),),
                       (ParamSpec("mode", "enumerated", choices=("x", "y")), ParamSpec("g", "real", 0, 1)))
    assert NodeDescriptor.from_dict(json.loads(json.dumps(d.to_dict()))) == d
    a = AppDescriptor("app", (("olt-0", "u"),), (("olt-0", "g"),), 2)
    assert AppDescriptor.from_dict(json.loads(json.dumps(a.to_dict()))) == a
