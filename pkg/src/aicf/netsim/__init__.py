"""TWDM-PON fronthaul simulator with the framework embedded in the loop."""

from .apps import ChannelBalancerApp, CoopDbaApp
from .config import (
    SimConfig,
    TrafficSource,
    balancing_scenario,
    cooperative_scenario,
    single_packet_scenario,
)
from .metrics import emit_metrics
from .runs import MODES, ControlledRun, RunResult, run_baseline, run_controlled, run_mode
from .sim import KINDS, EventLoop, PonModel, SimEvent, equal_share

__all__ = [
    "ChannelBalancerApp",
    "ControlledRun",
    "CoopDbaApp",
    "EventLoop",
    "KINDS",
    "MODES",
    "PonModel",
    "RunResult",
    "SimConfig",
    "SimEvent",
    "TrafficSource",
    "balancing_scenario",
    "cooperative_scenario",
    "emit_metrics",
    "equal_share",
    "run_baseline",
    "run_controlled",
    "run_mode",
    "single_packet_scenario",
]
