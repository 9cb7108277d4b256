"""CSV outputs of simulator runs."""

from __future__ import annotations

import csv
import os

from ..errors import SimError
from .runs import RunResult

SAMPLE_HEADER = ["pkt_id", "arrival_us", "delivered_us", "latency_us"]


def summary_header(n_channels: int) -> list[str]:
    return (["scenario", "mode", "seed", "mean_latency_us", "p50_latency_us", "p99_latency_us",
             "throughput_gbps"]
            + [f"util_ch{c}" for c in range(n_channels)]
            + ["controls_emitted", "msgs_published", "generated", "delivered", "dropped", "trace_hash"])


def _num(x: float) -> str:
    return "" if x != x else repr(float(x))


def summary_row(r: RunResult, n_channels: int) -> list:
    util = [_num(u) for u in r.util] + [""] * (n_channels - len(r.util))
    return ([r.scenario, r.mode, r.seed, _num(r.mean_us), _num(r.p50_us), _num(r.p99_us),
             _num(r.throughput_gbps)] + util
            + [r.controls_emitted, r.msgs_published, r.generated, r.delivered, r.dropped, r.trace_hash])


def write_samples(r: RunResult | None, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_HEADER)
        for pid, a, d in (r.samples if r is not None else ()):
            w.writerow([pid, repr(a / 1000), repr(d / 1000), repr((d - a) / 1000)])


def emit_metrics(metrics: RunResult | list[RunResult], path: str) -> list[str]:
    """Write run results under directory ``path`` and return the files written.

    One run: ``latency_samples.csv`` and ``summary.csv`` directly in ``path``.
    Several runs: one ``summary.csv`` row per run, and each run's samples in
    ``<label>/latency_samples.csv`` where the label is the mode (suffixed with
    the seed when modes repeat). An empty list gives header-only files.
    """
    runs = [metrics] if isinstance(metrics, RunResult) else list(metrics)
    n_channels = max((len(r.util) for r in runs), default=0)
    written = []
    try:
        os.makedirs(path, exist_ok=True)
        if len(runs) <= 1:
            target = os.path.join(path, "latency_samples.csv")
            write_samples(runs[0] if runs else None, target)
            written.append(target)
        else:
            modes = [r.mode for r in runs]
            for r in runs:
                label = r.mode if modes.count(r.mode) == 1 else f"{r.mode}-seed{r.seed}"
                os.makedirs(os.path.join(path, label), exist_ok=True)
                target = os.path.join(path, label, "latency_samples.csv")
                write_samples(r, target)
                written.append(target)
        target = os.path.join(path, "summary.csv")
        with open(target, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(summary_header(n_channels))
            for r in runs:
                w.writerow(summary_row(r, n_channels))
        written.append(target)
    except OSError as exc:
        raise SimError("IO_FAILED", f"{path}: {exc}") from None
    return written
