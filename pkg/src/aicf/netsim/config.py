"""Scenario configuration for the PON/RAN fronthaul simulator.

All times in the config are microseconds; the simulator works in integer
nanoseconds internally so that closed-form latencies are reproduced exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from ..errors import ConfigError


@dataclass
class TrafficSource:
    """Upstream traffic entering one ONU.

    ``periodic``: a burst of ``burst_bytes`` every ``period_us`` starting at
    ``phase_us`` (random in ``[0, period)`` when None), each arrival shifted by
    a uniform jitter in ``[0, jitter_us]``. If ``du`` names a DU, that DU
    knows (and can announce) each burst one DBA cycle ahead.
    ``poisson``: packets at ``rate_pps`` packets per second.
    ``single``: one burst at ``phase_us``.
    """

    onu: str
    kind: str = "periodic"
    du: str | None = None
    burst_bytes: int = 0
    period_us: float = 0
    jitter_us: float = 0
    phase_us: float | None = None
    rate_pps: float = 0
    packet_bytes: int = 1500

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("periodic", "poisson", "single"):
            out.append(f"unknown traffic kind {self.kind!r}")
        if self.packet_bytes <= 0:
            out.append("packet_bytes must be > 0")
        if self.kind in ("periodic", "single") and self.burst_bytes <= 0:
            out.append("burst_bytes must be > 0")
        if self.kind == "periodic" and self.period_us <= 0:
            out.append("period_us must be > 0")
        if self.kind == "periodic" and not 0 <= self.jitter_us < self.period_us:
            out.append("jitter_us must be in [0, period_us)")
        if self.kind == "single" and (self.phase_us is None or self.phase_us < 0):
            out.append("single burst needs phase_us >= 0")
        if self.kind == "poisson" and self.rate_pps <= 0:
            out.append("rate_pps must be > 0")
        return out


@dataclass
class SimConfig:
    n_channels: int = 2
    n_onus: int = 8
    onu_to_channel: list[int] | None = None
    dba_cycle_us: float = 125
    line_rate_gbps: float = 10
    prop_delay_us: float = 50
    traffic: list[TrafficSource] = field(default_factory=list)
    duration_us: float = 100_000
    seed: int = 1
    switch_penalty_us: float = 500
    queue_cap_bytes: int | None = None
    # control-plane reporting period for utilisation / load measurements
    report_period_us: float = 1000
    balancer_threshold: float = 0.1
    balancer_cooldown_us: float = 3000
    name: str = "scenario"

    def __post_init__(self):
        self.traffic = [t if isinstance(t, TrafficSource) else TrafficSource(**t) for t in self.traffic]
        if self.onu_to_channel is None and self.n_channels >= 1:
            self.onu_to_channel = [i % self.n_channels for i in range(self.n_onus)]

    # identifiers ---------------------------------------------------------

    def onu_ids(self) -> list[str]:
        return [onu_id(i) for i in range(self.n_onus)]

    def du_ids(self) -> list[str]:
        return sorted({t.du for t in self.traffic if t.du})

    def du_to_onu(self) -> dict[str, str]:
        return {t.du: t.onu for t in self.traffic if t.du}

    # validation ------------------------------------------------------------

    def problems(self) -> list[str]:
        out = []
        if self.n_channels < 1 or self.n_onus < 1:
            out.append("n_channels and n_onus must be >= 1")
        if len(self.onu_to_channel or []) != self.n_onus:
            out.append("onu_to_channel must list one channel per ONU")
        elif any(not 0 <= c < self.n_channels for c in self.onu_to_channel):
            out.append("onu_to_channel entries must be valid channel indices")
        if self.dba_cycle_us <= 0 or self.line_rate_gbps <= 0 or self.prop_delay_us < 0:
            out.append("dba_cycle_us, line_rate_gbps must be > 0 and prop_delay_us >= 0")
        if 2 * self.prop_delay_us > self.dba_cycle_us:
            out.append("grants must reach ONUs within one cycle (2 * prop_delay_us <= dba_cycle_us)")
        if self.duration_us <= 10 * self.dba_cycle_us:
            out.append("duration_us must exceed 10 DBA cycles")
        if self.switch_penalty_us < 0 or self.report_period_us <= 0:
            out.append("switch_penalty_us >= 0 and report_period_us > 0 required")
        onus = set(self.onu_ids())
        dus = [t.du for t in self.traffic if t.du]
        if len(dus) != len(set(dus)):
            out.append("each DU may feed only one traffic source")
        for t in self.traffic:
            if t.onu not in onus:
                out.append(f"traffic for unknown ONU {t.onu!r}")
            out.extend(t.problems())
        if self.queue_cap_bytes is not None and self.queue_cap_bytes <= 0:
            out.append("queue_cap_bytes must be > 0 when set")
        return out

    def validate(self) -> "SimConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("CONFIG_INVALID", "; ".join(problems))
        return self

    # serialisation -----------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("CONFIG_INVALID", f"scenario: {exc}") from None

    @classmethod
    def load(cls, path: str) -> "SimConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("CONFIG_INVALID", f"scenario file not found: {path}") from None
        except (OSError, ValueError) as exc:
            raise ConfigError("CONFIG_INVALID", f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("CONFIG_INVALID", f"{path}: expected a JSON object")
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed, traffic=list(self.traffic))


def onu_id(i: int) -> str:
    return f"onu-{i}"


def du_id(i: int) -> str:
    return f"du-{i}"


def cooperative_scenario(seed: int = 1, duration_us: float = 100_000) -> SimConfig:
    """2 channels, 8 ONUs, 4 DUs; periodic announced fronthaul bursts at 50% load.

    Each DU sends 78,125 B every 250 us (2.5 Gb/s). DUs sit on onu-0..onu-3,
    which alternate channels, so each 10 Gb/s channel carries 5 Gb/s.
    """
    traffic = [TrafficSource(onu=onu_id(i), du=du_id(i), kind="periodic", burst_bytes=78_125,
                             period_us=250, jitter_us=10, packet_bytes=1500) for i in range(4)]
    return SimConfig(n_channels=2, n_onus=8, traffic=traffic, duration_us=duration_us,
                     seed=seed, name="cooperative")


def balancing_scenario(seed: int = 1, duration_us: float = 100_000) -> SimConfig:
    """8 ONUs all starting on channel 0 of 2; Poisson traffic totalling 60% of one channel."""
    rate_pps = 0.75e9 / 8 / 1500  # 0.75 Gb/s per ONU
    traffic = [TrafficSource(onu=onu_id(i), kind="poisson", rate_pps=rate_pps, packet_bytes=1500)
               for i in range(8)]
    return SimConfig(n_channels=2, n_onus=8, onu_to_channel=[0] * 8, traffic=traffic,
                     duration_us=duration_us, seed=seed, name="balancing")


def single_packet_scenario(arrival_us: float, nbytes: int = 12_500, announced: bool = True) -> SimConfig:
    """One burst of ``nbytes`` (one packet) into onu-0 on an otherwise idle PON."""
    src = TrafficSource(onu=onu_id(0), du=du_id(0) if announced else None, kind="single",
                        burst_bytes=nbytes, phase_us=arrival_us, packet_bytes=nbytes)
    return SimConfig(n_channels=1, n_onus=1, traffic=[src], duration_us=5_000, seed=0,
                     name="single-packet")
