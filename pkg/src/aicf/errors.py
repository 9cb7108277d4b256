"""Exception types shared across the framework.

Every error carries a short machine-readable ``code`` string so it can be
reported over the wire (EXCEPTION envelopes) and by the CLI unchanged.
"""


class AicfError(Exception):
    """Base class. ``code`` is a stable identifier such as ``"MALFORMED"``."""

    code = "ERROR"

    def __init__(self, code: str | None = None, detail: str = ""):
        if code is not None:
            self.code = code
        self.detail = detail
        super().__init__(f"{self.code}: {detail}" if detail else self.code)


class CodecError(AicfError):
    """Raised by encode/decode: OVERSIZE, INVALID, TRUNCATED, MALFORMED, UNKNOWN_TYPE."""


class BrokerError(AicfError):
    """WRONG_NAMESPACE, SLOW_CONSUMER, BIND_FAILED."""


class RegistryError(AicfError):
    """A failed Register operation.

    ``missing`` lists unsatisfiable ``(node_id, name)`` requirements and is
    non-empty exactly for the MISSING_* codes. ``conflicts`` lists
    ``(node_id, param, holder_app)`` triples that the conflict policy refused.
    """

    def __init__(self, code: str, detail: str = "", missing=(), conflicts=()):
        super().__init__(code, detail)
        self.missing = [tuple(m) for m in missing]
        self.conflicts = [tuple(c) for c in conflicts]

    def to_payload(self) -> dict:
        return {
            "code": self.code,
            "detail": self.detail,
            "missing": [list(m) for m in self.missing],
            "conflicts": [list(c) for c in self.conflicts],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "RegistryError":
        return cls(
            payload.get("code", "MALFORMED"),
            payload.get("detail", ""),
            payload.get("missing", ()),
            payload.get("conflicts", ()),
        )


class EngineError(AicfError):
    """DUPLICATE_APP, UNKNOWN_APP, NOT_CLAIMED, OUT_OF_RANGE, PEER_UNREACHABLE, ..."""


class AgentError(AicfError):
    """MALFORMED config, UNKNOWN_METRIC."""


class TranslationError(AicfError):
    """UNKNOWN_KIND, TRANSLATION_FAILED, UNKNOWN_PEER."""


class ConfigError(AicfError):
    code = "CONFIG_INVALID"


class SimError(AicfError):
    """IO_FAILED when simulator outputs cannot be written."""
