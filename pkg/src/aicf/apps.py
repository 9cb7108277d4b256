"""Built-in control applications and the name table used by engine configs.

An engine config lists apps as ``{"app": <name>, "params": {...}}`` where the
name is a key of :data:`BUILTIN_APPS` or a ``"package.module:Class"`` path.
"""

from __future__ import annotations

import importlib
from typing import Any

from .engine import ControlApp, EngineContext
from .errors import ConfigError
from .message import AppDescriptor


class ProportionalApp(ControlApp):
    """Sets ``param`` on ``target`` to ``gain * metric`` clamped to [lo, hi].

    The smallest useful closed loop; the demo drives it with an ONU's queue
    occupancy and lets it size the ONU's grant.
    """

    tick_period_ms = 0

    def __init__(self, app_id: str, source: str, metric: str, target: str, param: str,
                 gain: float = 1.0, lo: float | None = None, hi: float | None = None,
                 integer: bool = True, priority: int = 0):
        self.descriptor = AppDescriptor(app_id, ((source, metric),), ((target, param),), priority)
        self.target, self.param = target, param
        self.gain, self.lo, self.hi = gain, lo, hi
        self.integer = integer

    def on_measurement(self, ctx: EngineContext, node_id: str, metric: str,
                       value: Any, ts_us: int) -> None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return
        out = self.gain * value
        if self.lo is not None:
            out = max(self.lo, out)
        if self.hi is not None:
            out = min(self.hi, out)
        ctx.emit_control(self.target, self.param, int(round(out)) if self.integer else float(out))


def _coop_dba(**params):
    from .netsim.apps import CoopDbaApp
    return CoopDbaApp(**params)


def _channel_balancer(**params):
    from .netsim.apps import ChannelBalancerApp
    return ChannelBalancerApp(**params)


BUILTIN_APPS = {
    "proportional": ProportionalApp,
    "coop_dba": _coop_dba,
    "channel_balancer": _channel_balancer,
}


def build_app(spec: dict) -> ControlApp:
    """Instantiate one app entry of an engine config."""
    if not isinstance(spec, dict) or not isinstance(spec.get("app"), str):
        raise ConfigError("CONFIG_INVALID", f"app entry needs an 'app' name: {spec!r}")
    name = spec["app"]
    params = spec.get("params", {})
    factory = BUILTIN_APPS.get(name)
    if factory is None:
        module, _, attr = name.partition(":")
        if not attr:
            raise ConfigError("CONFIG_INVALID", f"unknown app {name!r}")
        try:
            factory = getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError("CONFIG_INVALID", f"cannot load app {name!r}: {exc}") from None
    try:
        app = factory(**params)
    except TypeError as exc:
        raise ConfigError("CONFIG_INVALID", f"app {name!r}: {exc}") from None
    if not isinstance(getattr(app, "descriptor", None), AppDescriptor):
        raise ConfigError("CONFIG_INVALID", f"app {name!r} has no AppDescriptor")
    return app
