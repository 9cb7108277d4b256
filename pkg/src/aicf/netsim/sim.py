"""Discrete-event TWDM-PON upstream model.

Timeline per channel, with cycle length C and propagation delay P:

* at ``kC`` every ONU sends a status report (backlog minus bytes already
  covered by outstanding grants);
* at ``kC + P`` the OLT has all cycle-k reports and issues grants for frame
  ``k+1 = [(k+1)C, (k+2)C)``; grants reach the ONUs by ``kC + 2P <= (k+1)C``;
* a packet counts as delivered once its last byte reaches the OLT, i.e. the
  end of its transmission plus P.

Within a frame, report-driven (DBA) windows go first as one contiguous block
shared equal-share-capped-by-demand. Pre-granted (cooperative) windows follow,
each placed at ``max(announced arrival, channel busy)``. The bytes granted per
channel per frame never exceed the frame capacity; pre-grants that do not fit
are carried to the next frame.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .config import SimConfig, TrafficSource

KINDS = ("pkt_arrival", "report_tx", "grant_issue", "upstream_tx_start",
         "upstream_tx_end", "channel_switch", "timer")
KIND_ORDER = {k: i for i, k in enumerate(KINDS)}
OLT_ID = "olt-0"
TIMER_SUBJECT = "~timer"


def us_to_ns(us: float) -> int:
    return int(round(us * 1000))


@dataclass(frozen=True)
class SimEvent:
    time_ns: int
    kind: str
    subject: str
    payload: Any = None

    @property
    def time_us(self) -> float:
        return self.time_ns / 1000


class _Cancel:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Event heap ordered by (time, kind order, subject, insertion).

    It doubles as the framework :class:`~aicf.transport.Scheduler`, so agent
    timers and engine ticks run on the same virtual clock as the PON.
    Every processed event is folded into a SHA-256 trace hash.
    """

    def __init__(self):
        self._heap: list = []
        self._ids = itertools.count()
        self.now_ns = 0
        self.processed = 0
        self._hash = hashlib.sha256()
        self.trace: list[SimEvent] | None = None

    def schedule(self, time_ns: int, kind: str, subject: str,
                 fn: Callable[[Any], None], payload: Any = None) -> _Cancel:
        if time_ns < self.now_ns:
            raise ValueError(f"event at {time_ns} ns is in the past (now {self.now_ns})")
        h = _Cancel()
        heapq.heappush(self._heap, (time_ns, KIND_ORDER[kind], subject, next(self._ids),
                                    h, kind, fn, payload))
        return h

    def run(self, until_ns: int) -> None:
        """Process every event with time < ``until_ns``."""
        heap = self._heap
        while heap and heap[0][0] < until_ns:
            t, _, subject, _, h, kind, fn, payload = heapq.heappop(heap)
            if h.cancelled:
                continue
            self.now_ns = t
            self.processed += 1
            self._hash.update(f"{t}|{kind}|{subject}|{_digest(payload)}\n".encode())
            if self.trace is not None:
                self.trace.append(SimEvent(t, kind, subject, payload))
            fn(payload)
        self.now_ns = max(self.now_ns, until_ns)

    def trace_hash(self) -> str:
        return self._hash.hexdigest()

    # Scheduler protocol
    def now_us(self) -> int:
        return self.now_ns // 1000

    def call_later(self, delay_us: int, fn: Callable, *args) -> _Cancel:
        return self.schedule(self.now_ns + max(0, int(delay_us)) * 1000, "timer", TIMER_SUBJECT,
                             lambda _: fn(*args))


def _digest(payload: Any) -> str:
    if payload is None or isinstance(payload, (int, str, tuple)):
        return repr(payload)
    key = getattr(payload, "trace_key", None)
    return key() if key is not None else type(payload).__name__


# --- traffic ---------------------------------------------------------------

class Packet:
    __slots__ = ("pid", "onu", "arrival_ns", "size", "remaining", "delivered_ns")

    def __init__(self, pid: int, onu: str, arrival_ns: int, size: int):
        self.pid = pid
        self.onu = onu
        self.arrival_ns = arrival_ns
        self.size = size
        self.remaining = size
        self.delivered_ns: int | None = None


class Burst:
    __slots__ = ("arrival_ns", "onu", "du", "packets", "nbytes")

    def __init__(self, arrival_ns: int, onu: str, du: str | None, packets: list[Packet]):
        self.arrival_ns = arrival_ns
        self.onu = onu
        self.du = du
        self.packets = packets
        self.nbytes = sum(p.size for p in packets)

    def trace_key(self) -> str:
        return f"burst:{self.packets[0].pid}:{self.nbytes}"


def _split(nbytes: int, packet_bytes: int) -> list[int]:
    sizes = [packet_bytes] * (nbytes // packet_bytes)
    if nbytes % packet_bytes:
        sizes.append(nbytes % packet_bytes)
    return sizes


def generate_traffic(cfg: SimConfig) -> list[Burst]:
    """All arrivals of the run, sorted by (arrival, source index).

    Each source draws from its own generator seeded with (seed, index), so a
    source's arrivals do not depend on the others. Packet ids follow the
    global arrival order and are therefore stable across baseline and
    controlled runs of the same scenario.
    """
    end_ns = us_to_ns(cfg.duration_us)
    raw: list[tuple[int, int, TrafficSource, list[int]]] = []
    for idx, src in enumerate(cfg.traffic):
        rng = np.random.default_rng([cfg.seed, idx])
        if src.kind == "single":
            raw.append((us_to_ns(src.phase_us), idx, src, _split(src.burst_bytes, src.packet_bytes)))
        elif src.kind == "periodic":
            phase = src.phase_us if src.phase_us is not None else float(rng.uniform(0, src.period_us))
            sizes = _split(src.burst_bytes, src.packet_bytes)
            n = 0
            while True:
                jitter = float(rng.uniform(0, src.jitter_us)) if src.jitter_us > 0 else 0.0
                t = us_to_ns(phase + n * src.period_us + jitter)
                if t >= end_ns:
                    break
                raw.append((t, idx, src, sizes))
                n += 1
        else:
            mean_gap_us = 1e6 / src.rate_pps
            t_us = 0.0
            while True:
                t_us += float(rng.exponential(mean_gap_us))
                t = us_to_ns(t_us)
                if t >= end_ns:
                    break
                raw.append((t, idx, src, [src.packet_bytes]))
    raw.sort(key=lambda r: (r[0], r[1]))
    pid = itertools.count()
    bursts = []
    for t, _, src, sizes in raw:
        if t >= end_ns:
            continue
        bursts.append(Burst(t, src.onu, src.du, [Packet(next(pid), src.onu, t, s) for s in sizes]))
    return bursts


# --- PON state -------------------------------------------------------------

class Window:
    """One upstream transmission opportunity granted to an ONU."""

    __slots__ = ("onu", "channel", "start_ns", "nbytes", "kind", "arrival_ns", "frame")

    def __init__(self, onu, channel, start_ns, nbytes, kind, arrival_ns, frame):
        self.onu = onu
        self.channel = channel
        self.start_ns = start_ns
        self.nbytes = nbytes
        self.kind = kind
        self.arrival_ns = arrival_ns
        self.frame = frame

    def trace_key(self) -> str:
        return f"{self.kind}:{self.channel}:{self.nbytes}"


class Onu:
    def __init__(self, onu_id: str, channel: int):
        self.id = onu_id
        self.channel = channel
        self.queue: deque[Packet] = deque()
        self.backlog = 0
        self.pending: list[Window] = []
        self.outage_until = 0
        self.switching_to: int | None = None
        self.arrived_bytes = 0
        self.dropped = 0
        self.switches = 0

    def reportable(self, now_ns: int) -> int:
        covered = sum(w.nbytes for w in self.pending if w.kind == "dba" or w.arrival_ns <= now_ns)
        return max(0, self.backlog - covered)


@dataclass
class PreGrant:
    arrival_ns: int
    onu: str
    nbytes: int
    received_ns: int


class PonModel:
    def __init__(self, cfg: SimConfig, loop: EventLoop):
        self.cfg = cfg.validate()
        self.loop = loop
        self.cycle_ns = us_to_ns(cfg.dba_cycle_us)
        self.prop_ns = us_to_ns(cfg.prop_delay_us)
        self.end_ns = us_to_ns(cfg.duration_us)
        self.rate_mbps = int(round(cfg.line_rate_gbps * 1000))
        self.cap_bytes = self.bytes_fit(self.cycle_ns)
        self.onus = {oid: Onu(oid, ch) for oid, ch in zip(cfg.onu_ids(), cfg.onu_to_channel)}
        self.bursts = generate_traffic(cfg)
        self.packets = [p for b in self.bursts for p in b.packets]
        self.reports: dict[str, tuple[int, int]] = {}
        self.pregrants: list[PreGrant] = []
        self.busy_until = [0] * cfg.n_channels
        self.sent_bytes = [0] * cfg.n_channels
        self.sent_window = [0] * cfg.n_channels
        self.granted: dict[tuple[int, int], int] = {}
        self.causality_violations: list[str] = []
        self.wasted_bytes = 0
        self.reports_sent = 0
        self.bursts_sent = 0
        # per-DU announcement queues (bursts sorted by arrival)
        self.du_bursts: dict[str, deque[Burst]] = {}
        for b in self.bursts:
            if b.du:
                self.du_bursts.setdefault(b.du, deque()).append(b)
        self.announce: Callable[[str, list[Burst]], None] | None = None

    # -- arithmetic ----------------------------------------------------------

    def tx_ns(self, nbytes: int) -> int:
        return -(-nbytes * 8000 // self.rate_mbps)

    def bytes_fit(self, span_ns: int) -> int:
        return max(0, span_ns) * self.rate_mbps // 8000

    # -- setup -----------------------------------------------------------------

    def start(self) -> None:
        loop = self.loop
        for b in self.bursts:
            loop.schedule(b.arrival_ns, "pkt_arrival", b.onu, self._arrival, b)
        for k in range(self.end_ns // self.cycle_ns + 1):
            t = k * self.cycle_ns
            if t >= self.end_ns:
                break
            for oid in self.onus:
                loop.schedule(t, "report_tx", oid, self._report, oid)
            if self.announce is not None:
                for du in sorted(self.du_bursts):
                    loop.schedule(t, "report_tx", du, self._announce, du)
            loop.schedule(t + self.prop_ns, "grant_issue", OLT_ID, self._grant_issue, k)

    # -- handlers --------------------------------------------------------------

    def _arrival(self, burst: Burst) -> None:
        onu = self.onus[burst.onu]
        cap = self.cfg.queue_cap_bytes
        for p in burst.packets:
            onu.arrived_bytes += p.size
            if cap is not None and onu.backlog + p.size > cap:
                onu.dropped += 1
                p.delivered_ns = -1
                continue
            onu.queue.append(p)
            onu.backlog += p.size

    def _report(self, oid: str) -> None:
        onu = self.onus[oid]
        now = self.loop.now_ns
        if now < onu.outage_until:
            return
        self.reports_sent += 1
        self.reports[oid] = (onu.reportable(now), now)

    def _announce(self, du: str) -> None:
        """DU schedule for the frame after the current one."""
        now = self.loop.now_ns
        lo, hi = now + self.cycle_ns, now + 2 * self.cycle_ns
        q = self.du_bursts[du]
        while q and q[0].arrival_ns < lo:
            q.popleft()  # too late to announce
        batch = []
        while q and q[0].arrival_ns < hi:
            batch.append(q.popleft())
        self.announce(du, batch)

    def add_pregrants(self, onu: str, entries) -> None:
        """OLT side of the grant_map control: ``entries`` is [[arrival_ns, bytes], ...]."""
        if onu not in self.onus:
            raise ValueError(f"unknown ONU {onu!r}")
        now = self.loop.now_ns
        for arrival, nbytes in entries:
            if int(nbytes) > 0:
                self.pregrants.append(PreGrant(int(arrival), onu, int(nbytes), now))

    def _grant_issue(self, k: int) -> None:
        now = self.loop.now_ns
        f0, f1 = (k + 1) * self.cycle_ns, (k + 2) * self.cycle_ns
        frame = k + 1
        reports, self.reports = self.reports, {}
        for oid, (_, sent) in reports.items():
            if sent + self.prop_ns > now:
                self.causality_violations.append(f"report from {oid} at {sent} used at {now}")
        carried: list[PreGrant] = []
        pregrants = sorted(self.pregrants, key=lambda g: (g.arrival_ns, g.onu))
        self.pregrants = []
        for ch in range(self.cfg.n_channels):
            budget = self.cap_bytes
            busy = max(self.busy_until[ch], f0)
            demands = {oid: reports[oid][0] for oid, onu in self.onus.items()
                       if oid in reports and onu.channel == ch and onu.switching_to is None
                       and reports[oid][0] > 0}
            alloc = equal_share(demands, min(budget, self.bytes_fit(f1 - busy)))
            for oid in sorted(alloc, key=self._onu_index):
                nbytes = alloc[oid]
                if nbytes <= 0:
                    continue
                self._open_window(Window(oid, ch, busy, nbytes, "dba", 0, frame))
                busy += self.tx_ns(nbytes)
                budget -= nbytes
            for g in pregrants:
                onu = self.onus[g.onu]
                if onu.channel != ch or onu.switching_to is not None:
                    continue
                if g.received_ns > now:
                    self.causality_violations.append(f"pre-grant for {g.onu} used before receipt")
                if g.arrival_ns >= f1:
                    carried.append(g)
                    continue
                start = max(g.arrival_ns, busy)
                # never spill into the next frame: its DBA block starts at f1
                take = min(g.nbytes, budget, self.bytes_fit(f1 - start))
                if start >= f1 or take <= 0:
                    carried.append(g)
                    continue
                self._open_window(Window(g.onu, ch, start, take, "cti", g.arrival_ns, frame))
                busy = start + self.tx_ns(take)
                budget -= take
                if take < g.nbytes:
                    carried.append(PreGrant(g.arrival_ns, g.onu, g.nbytes - take, g.received_ns))
            self.granted[(ch, frame)] = self.cap_bytes - budget
            self.busy_until[ch] = max(self.busy_until[ch], busy)
        # pre-grants of ONUs mid-switch are retried once they settle
        carried += [g for g in pregrants if self.onus[g.onu].switching_to is not None]
        self.pregrants = carried

    def _onu_index(self, oid: str) -> int:
        return int(oid.rsplit("-", 1)[1])

    def _open_window(self, w: Window) -> None:
        self.onus[w.onu].pending.append(w)
        self.loop.schedule(w.start_ns, "upstream_tx_start", w.onu, self._tx_start, w)

    def _tx_start(self, w: Window) -> None:
        onu = self.onus[w.onu]
        onu.pending.remove(w)
        now = self.loop.now_ns
        if onu.channel != w.channel or now < onu.outage_until:
            self.wasted_bytes += w.nbytes
            return
        sent = 0
        done: list[Packet] = []
        q = onu.queue
        while q and sent < w.nbytes:
            p = q[0]
            take = min(p.remaining, w.nbytes - sent)
            p.remaining -= take
            sent += take
            if p.remaining == 0:
                q.popleft()
                p.delivered_ns = now + self.tx_ns(sent) + self.prop_ns
                done.append(p)
        onu.backlog -= sent
        self.wasted_bytes += w.nbytes - sent
        if sent:
            self.sent_bytes[w.channel] += sent
            self.sent_window[w.channel] += sent
            self.loop.schedule(now + self.tx_ns(sent), "upstream_tx_end", w.onu, self._tx_end,
                               (w.channel, sent, len(done)))

    def _tx_end(self, info) -> None:
        self.bursts_sent += 1

    # -- channel switching -----------------------------------------------------

    def request_switch(self, oid: str, channel: int) -> None:
        onu = self.onus[oid]
        if onu.switching_to is not None or channel == onu.channel:
            return
        if not 0 <= channel < self.cfg.n_channels:
            raise ValueError(f"no channel {channel}")
        onu.switching_to = channel
        now = self.loop.now_ns
        onu.outage_until = now + us_to_ns(self.cfg.switch_penalty_us)
        self.loop.schedule(now, "channel_switch", oid, self._switch, (oid, "retune", channel))
        self.loop.schedule(onu.outage_until, "channel_switch", oid, self._switch, (oid, "up", channel))

    def _switch(self, info) -> None:
        oid, phase, channel = info
        onu = self.onus[oid]
        if phase == "up" and onu.switching_to == channel:
            onu.channel = channel
            onu.switching_to = None
            onu.switches += 1

    # -- measurements for agents -------------------------------------------------

    def take_channel_util(self) -> list[float]:
        period_ns = us_to_ns(self.cfg.report_period_us)
        cap = self.bytes_fit(period_ns)
        out = [round(b / cap, 6) for b in self.sent_window]
        self.sent_window = [0] * self.cfg.n_channels
        return out

    def take_load(self, oid: str) -> int:
        onu = self.onus[oid]
        v, onu.arrived_bytes = onu.arrived_bytes, 0
        return v


def equal_share(demands: dict[str, int], capacity: int) -> dict[str, int]:
    """Max-min fair integer split of ``capacity`` over ``demands``.

    Keys are served in sorted order when a leftover byte cannot be split
    evenly, which keeps the result deterministic.
    """
    alloc = {k: 0 for k in demands}
    active = sorted(k for k, d in demands.items() if d > 0)
    remaining = max(0, capacity)
    while active and remaining > 0:
        share = remaining // len(active)
        if share == 0:
            for k in active[:remaining]:
                alloc[k] += 1
            break
        for k in active:
            give = min(share, demands[k] - alloc[k])
            alloc[k] += give
            remaining -= give
        active = [k for k in active if alloc[k] < demands[k]]
    return alloc
