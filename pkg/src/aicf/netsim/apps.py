"""The two reference control applications driven by the simulator."""

from __future__ import annotations

from typing import Any

from ..engine import ControlApp, EngineContext
from ..message import AppDescriptor


class CoopDbaApp(ControlApp):
    """Turns DU upstream schedules into OLT pre-grants.

    Each DU publishes ``ul_grant_bytes`` one DBA cycle ahead; the app forwards
    the announced bursts to the OLT as a ``grant_map`` control keyed by the
    ONU that carries the DU.
    """

    tick_period_ms = 0

    def __init__(self, du_to_onu: dict[str, str], olt_id: str = "olt-0"):
        self.du_to_onu = dict(du_to_onu)
        self.olt_id = olt_id
        self.descriptor = AppDescriptor(
            "coop_dba",
            required_measurements=tuple((du, "ul_grant_bytes") for du in sorted(du_to_onu)),
            controlled_params=((olt_id, "grant_map"),),
        )
        self.announcements = 0

    def on_measurement(self, ctx: EngineContext, node_id: str, metric: str,
                       value: Any, ts_us: int) -> None:
        bursts = value.get("bursts") if isinstance(value, dict) else None
        onu = self.du_to_onu.get(node_id)
        if not bursts or onu is None:
            return
        self.announcements += 1
        ctx.emit_control(self.olt_id, "grant_map", {onu: [[int(a), int(b)] for a, b in bursts]})


class ChannelBalancerApp(ControlApp):
    """Moves ONUs off the busiest wavelength channel.

    On every ``channel_util`` report from the OLT it compares the busiest and
    idlest channel. If they differ by at least ``threshold`` it moves the ONU
    whose recent load is closest to half the gap, provided that move strictly
    lowers the busier side. A cooldown lets measurements settle after a move.
    """

    tick_period_ms = 0

    def __init__(self, assignment: dict[str, int], n_channels: int, period_us: float,
                 line_rate_gbps: float, threshold: float = 0.1, cooldown_us: float = 3000,
                 olt_id: str = "olt-0"):
        self.assignment = dict(assignment)
        self.n_channels = n_channels
        self.threshold = threshold
        self.cooldown_us = cooldown_us
        self.olt_id = olt_id
        self.period_bytes = line_rate_gbps * 1e9 / 8 * period_us / 1e6
        self.load: dict[str, int] = {}
        self.quiet_until = 0
        self.moves: list[tuple[int, str, int]] = []
        onus = sorted(assignment, key=lambda o: int(o.rsplit("-", 1)[1]))
        self.descriptor = AppDescriptor(
            "channel_balancer",
            required_measurements=((olt_id, "channel_util"),) + tuple((o, "load_bytes") for o in onus),
            controlled_params=tuple((o, "onu_channel") for o in onus),
        )

    def on_measurement(self, ctx: EngineContext, node_id: str, metric: str,
                       value: Any, ts_us: int) -> None:
        if metric == "load_bytes":
            self.load[node_id] = value
        elif metric == "channel_util":
            self._rebalance(ctx, value)

    def _rebalance(self, ctx: EngineContext, util: list[float]) -> None:
        now = ctx.now_us
        if now < self.quiet_until or len(util) < 2:
            return
        hi = max(range(len(util)), key=lambda c: (util[c], -c))
        lo = min(range(len(util)), key=lambda c: (util[c], c))
        gap = util[hi] - util[lo]
        if gap < self.threshold:
            return
        best = None
        for onu, ch in sorted(self.assignment.items()):
            if ch != hi:
                continue
            u = self.load.get(onu, 0) / self.period_bytes
            if 0 < u < gap:
                score = abs(u - gap / 2)
                if best is None or score < best[0]:
                    best = (score, onu)
        if best is None:
            return
        onu = best[1]
        ctx.emit_control(onu, "onu_channel", str(lo))
        self.assignment[onu] = lo
        self.moves.append((now, onu, lo))
        self.quiet_until = now + self.cooldown_us
