"""Domain types, topic namespace and the framed wire codec.

A frame is a 4-byte big-endian length ``N`` followed by ``N`` bytes of
compact UTF-8 JSON with the top-level keys in the fixed order
``v, type, sender, topic, ts_us, seq, payload``. Payload keys are sorted so
that equal envelopes always encode to identical bytes.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Any

from .errors import CodecError

VERSION = 1
MAX_FRAME = 1024 * 1024
HEADER = struct.Struct(">I")
U64_MAX = 2**64 - 1


class MsgType(str, enum.Enum):
    REGISTER_NODE = "REGISTER_NODE"
    REGISTER_APP = "REGISTER_APP"
    REGISTER_ACK = "REGISTER_ACK"
    DEREGISTER = "DEREGISTER"
    SUBSCRIBE = "SUBSCRIBE"
    UNSUBSCRIBE = "UNSUBSCRIBE"
    PUBLISH = "PUBLISH"
    EXCEPTION = "EXCEPTION"
    INTER_AI = "INTER_AI"
    HEARTBEAT = "HEARTBEAT"


TOPIC_TYPES = frozenset({MsgType.SUBSCRIBE, MsgType.UNSUBSCRIBE, MsgType.PUBLISH})


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    sender: str
    topic: str | None = None
    ts_us: int = 0
    seq: int = 0
    payload: dict = field(default_factory=dict)
    version: int = VERSION

    def validate(self) -> None:
        if self.version != VERSION:
            raise CodecError("INVALID", f"version {self.version!r}")
        if not isinstance(self.msg_type, MsgType):
            raise CodecError("INVALID", f"msg_type {self.msg_type!r}")
        if not isinstance(self.sender, str) or not self.sender:
            raise CodecError("INVALID", "sender must be a non-empty string")
        has_topic = self.msg_type in TOPIC_TYPES
        if has_topic and not (isinstance(self.topic, str) and self.topic):
            raise CodecError("INVALID", f"{self.msg_type.value} requires a topic")
        if not has_topic and self.topic is not None:
            raise CodecError("INVALID", f"{self.msg_type.value} must not carry a topic")
        for name in ("ts_us", "seq"):
            v = getattr(self, name)
            if type(v) is not int or not 0 <= v <= U64_MAX:
                raise CodecError("INVALID", f"{name} must be an unsigned 64-bit integer")
        if not isinstance(self.payload, dict):
            raise CodecError("INVALID", "payload must be a JSON object")


def _dumps(obj: Any, sort_keys: bool = False) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False, sort_keys=sort_keys)


def encode_body(env: Envelope) -> bytes:
    env.validate()
    try:
        payload = _dumps(env.payload, sort_keys=True)
    except (TypeError, ValueError) as exc:
        raise CodecError("INVALID", f"payload not serialisable: {exc}") from None
    text = (
        f'{{"v":{env.version},"type":{_dumps(env.msg_type.value)},'
        f'"sender":{_dumps(env.sender)},"topic":{_dumps(env.topic)},'
        f'"ts_us":{env.ts_us},"seq":{env.seq},"payload":{payload}}}'
    )
    return text.encode("utf-8")


def encode(env: Envelope) -> bytes:
    body = encode_body(env)
    if len(body) > MAX_FRAME:
        raise CodecError("OVERSIZE", f"frame body is {len(body)} bytes (max {MAX_FRAME})")
    return HEADER.pack(len(body)) + body


def _body_to_envelope(body: bytes) -> Envelope:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CodecError("MALFORMED", f"body is not UTF-8 JSON: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"v", "type", "sender", "topic", "ts_us", "seq", "payload"}:
        raise CodecError("MALFORMED", "unexpected envelope structure")
    try:
        msg_type = MsgType(doc["type"])
    except (ValueError, TypeError):
        raise CodecError("UNKNOWN_TYPE", f"unknown msg_type {doc['type']!r}") from None
    env = Envelope(msg_type=msg_type, sender=doc["sender"], topic=doc["topic"],
                   ts_us=doc["ts_us"], seq=doc["seq"], payload=doc["payload"],
                   version=doc["v"])
    try:
        env.validate()
    except CodecError as exc:
        raise CodecError("MALFORMED", exc.detail) from None
    return env


def decode(data: bytes) -> tuple[Envelope, int]:
    """Decode the first frame in ``data``; return ``(envelope, bytes_consumed)``."""
    if len(data) < HEADER.size:
        raise CodecError("TRUNCATED", f"need {HEADER.size} header bytes, have {len(data)}")
    (n,) = HEADER.unpack_from(data)
    if n > MAX_FRAME:
        raise CodecError("MALFORMED", f"declared length {n} exceeds {MAX_FRAME}")
    end = HEADER.size + n
    if len(data) < end:
        raise CodecError("TRUNCATED", f"frame declares {n} bytes, have {len(data) - HEADER.size}")
    return _body_to_envelope(bytes(data[HEADER.size:end])), end


def decode_all(data: bytes) -> list[Envelope]:
    """Decode a buffer holding only complete frames."""
    out = []
    pos = 0
    view = memoryview(data)
    while pos < len(data):
        env, used = decode(view[pos:])
        out.append(env)
        pos += used
    return out


class FrameBuffer:
    """Incremental decoder for stream transports.

    ``pop()`` returns the next complete envelope or None. A bad frame with a
    sane length prefix is skipped before its CodecError propagates, so the
    stream stays usable; an insane length prefix poisons the stream.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self.poisoned = False

    def feed(self, data: bytes) -> None:
        self._buf += data

    def pop(self) -> Envelope | None:
        if self.poisoned or len(self._buf) < HEADER.size:
            return None
        (n,) = HEADER.unpack_from(self._buf)
        if n > MAX_FRAME:
            self.poisoned = True
            raise CodecError("MALFORMED", f"declared length {n} exceeds {MAX_FRAME}")
        end = HEADER.size + n
        if len(self._buf) < end:
            return None
        body = bytes(self._buf[HEADER.size:end])
        del self._buf[:end]
        return _body_to_envelope(body)

    def __len__(self) -> int:
        return len(self._buf)


# --- descriptors -----------------------------------------------------------

NODE_TYPES = ("pon_olt", "pon_onu", "ran_du", "ran_ru", "other")
VALUE_KINDS = ("integer", "real", "enumerated", "structured")


@dataclass(frozen=True)
class MetricSpec:
    name: str
    unit: str = ""
    period_ms: float = 0

    def to_dict(self) -> dict:
        return {"name": self.name, "unit": self.unit, "period_ms": self.period_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSpec":
        return cls(name=d["name"], unit=d.get("unit", ""), period_ms=d.get("period_ms", 0))


@dataclass(frozen=True)
class ParamSpec:
    """A controllable parameter.

    ``structured`` parameters take a JSON object (e.g. an OLT grant map); the
    three scalar kinds are range/choice checked by :meth:`check`.
    """

    name: str
    value_kind: str = "integer"
    min: float | None = None
    max: float | None = None
    choices: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"name": self.name, "value_kind": self.value_kind, "min": self.min,
                "max": self.max, "choices": list(self.choices)}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpec":
        return cls(name=d["name"], value_kind=d.get("value_kind", "integer"),
                   min=d.get("min"), max=d.get("max"), choices=tuple(d.get("choices") or ()))

    def problems(self) -> list[str]:
        out = []
        if not self.name:
            out.append("param name empty")
        if self.value_kind not in VALUE_KINDS:
            out.append(f"param {self.name}: unknown value_kind {self.value_kind!r}")
        if self.value_kind in ("integer", "real"):
            if self.min is not None and self.max is not None and self.min > self.max:
                out.append(f"param {self.name}: min > max")
        if self.value_kind == "enumerated" and not self.choices:
            out.append(f"param {self.name}: enumerated without choices")
        return out

    def check(self, value: Any) -> str | None:
        """Return a rejection reason, or None when ``value`` is acceptable."""
        kind = self.value_kind
        if kind == "enumerated":
            return None if value in self.choices else f"{value!r} not in {list(self.choices)}"
        if kind == "structured":
            return None if isinstance(value, dict) else "expected an object"
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return f"expected a number, got {type(value).__name__}"
        if kind == "integer" and not isinstance(value, int):
            return "expected an integer"
        if isinstance(value, float) and not math.isfinite(value):
            return "non-finite value"
        if self.min is not None and value < self.min:
            return f"{value} < min {self.min}"
        if self.max is not None and value > self.max:
            return f"{value} > max {self.max}"
        return None


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    node_type: str = "other"
    measurements: tuple[MetricSpec, ...] = ()
    controls: tuple[ParamSpec, ...] = ()

    def metric(self, name: str) -> MetricSpec | None:
        return next((m for m in self.measurements if m.name == name), None)

    def control(self, name: str) -> ParamSpec | None:
        return next((p for p in self.controls if p.name == name), None)

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.node_id, str) or not self.node_id:
            out.append("node_id empty")
        if self.node_type not in NODE_TYPES:
            out.append(f"unknown node_type {self.node_type!r}")
        names = [m.name for m in self.measurements]
        if len(set(names)) != len(names):
            out.append("duplicate measurement names")
        for m in self.measurements:
            if not m.name:
                out.append("measurement name empty")
            if not isinstance(m.period_ms, (int, float)) or m.period_ms < 0:
                out.append(f"measurement {m.name}: period_ms must be >= 0")
        cnames = [p.name for p in self.controls]
        if len(set(cnames)) != len(cnames):
            out.append("duplicate control names")
        for p in self.controls:
            out.extend(p.problems())
        return out

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "node_type": self.node_type,
                "measurements": [m.to_dict() for m in self.measurements],
                "controls": [p.to_dict() for p in self.controls]}

    @classmethod
    def from_dict(cls, d: dict) -> "NodeDescriptor":
        return cls(node_id=d["node_id"], node_type=d.get("node_type", "other"),
                   measurements=tuple(MetricSpec.from_dict(m) for m in d.get("measurements", ())),
                   controls=tuple(ParamSpec.from_dict(p) for p in d.get("controls", ())))


@dataclass(frozen=True)
class AppDescriptor:
    app_id: str
    required_measurements: tuple[tuple[str, str], ...] = ()
    controlled_params: tuple[tuple[str, str], ...] = ()
    priority: int = 0

    def __post_init__(self):
        object.__setattr__(self, "required_measurements",
                           tuple(tuple(x) for x in self.required_measurements))
        object.__setattr__(self, "controlled_params",
                           tuple(tuple(x) for x in self.controlled_params))

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.app_id, str) or not self.app_id:
            out.append("app_id empty")
        if type(self.priority) is not int or self.priority < 0:
            out.append("priority must be an integer >= 0")
        if len(set(self.controlled_params)) != len(self.controlled_params):
            out.append("duplicate controlled params")
        for pair in self.required_measurements + self.controlled_params:
            if len(pair) != 2 or not all(isinstance(s, str) and s for s in pair):
                out.append(f"bad (node, name) pair {pair!r}")
        return out

    def to_dict(self) -> dict:
        return {"app_id": self.app_id,
                "required_measurements": [list(p) for p in self.required_measurements],
                "controlled_params": [list(p) for p in self.controlled_params],
                "priority": self.priority}

    @classmethod
    def from_dict(cls, d: dict) -> "AppDescriptor":
        return cls(app_id=d["app_id"],
                   required_measurements=tuple(tuple(p) for p in d.get("required_measurements", ())),
                   controlled_params=tuple(tuple(p) for p in d.get("controlled_params", ())),
                   priority=d.get("priority", 0))


# --- topics ----------------------------------------------------------------

@dataclass(frozen=True)
class TopicFilter:
    segments: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "TopicFilter":
        segs = tuple(text.split("/"))
        f = cls(segs)
        f.validate()
        return f

    def validate(self) -> None:
        if not self.segments or any(s == "" for s in self.segments):
            raise ValueError(f"empty segment in filter {self!s}")
        if "#" in self.segments[:-1]:
            raise ValueError(f"'#' only allowed as the last segment: {self!s}")

    def __str__(self) -> str:
        return "/".join(self.segments)


def topic_matches(filt: TopicFilter | str, topic: str) -> bool:
    segs = filt.segments if isinstance(filt, TopicFilter) else tuple(filt.split("/"))
    parts = topic.split("/")
    for i, seg in enumerate(segs):
        if seg == "#":
            return True
        if i >= len(parts):
            return False
        if seg != "*" and seg != parts[i]:
            return False
    return len(parts) == len(segs)


def pm_topic(node_id: str, metric: str) -> str:
    return f"node/{node_id}/pm/{metric}"


def ctrl_topic(node_id: str, param: str) -> str:
    return f"node/{node_id}/ctrl/{param}"


def inbox_topic(controller_id: str) -> str:
    return f"interai/{controller_id}/inbox"


def reply_topic(client_id: str) -> str:
    return f"register/reply/{client_id}"


def canonical_topics(desc: NodeDescriptor) -> list[str]:
    return ([pm_topic(desc.node_id, m.name) for m in desc.measurements]
            + [ctrl_topic(desc.node_id, p.name) for p in desc.controls])


def split_topic(topic: str) -> tuple[str, str, str] | None:
    """``node/<id>/<pm|ctrl>/<name>`` -> ``(id, kind, name)``; None otherwise."""
    parts = topic.split("/")
    if len(parts) == 4 and parts[0] == "node" and parts[2] in ("pm", "ctrl"):
        return parts[1], parts[2], parts[3]
    return None

