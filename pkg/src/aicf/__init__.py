"""Modular AI control framework for fiber and wireless network nodes."""

from .message import (
    AppDescriptor,
    Envelope,
    MetricSpec,
    MsgType,
    NodeDescriptor,
    ParamSpec,
    TopicFilter,
    canonical_topics,
    decode,
    encode,
    topic_matches,
)

__version__ = "0.1.0"

__all__ = [
    "AppDescriptor",
    "Envelope",
    "MetricSpec",
    "MsgType",
    "NodeDescriptor",
    "ParamSpec",
    "TopicFilter",
    "canonical_topics",
    "decode",
    "encode",
    "topic_matches",
]
