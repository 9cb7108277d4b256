#!/usr/bin/env python3
"""Live smoke run: node broker, inter-AI broker, Register, one agent, one engine.

Everything runs as separate ``aicf`` processes on localhost with wall-clock
time. After ``--seconds`` the script interrupts them all, then prints each
process's final stats record and the broker's counters.

    python scripts/demo.py [--seconds 3] [--config configs/demo.json]
"""

import argparse
import os
import signal
import subprocess
import sys
import time

HERE = os.path.dirname(os.path.abspath(__file__))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=3.0)
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "demo.json"))
    args = ap.parse_args()
    aicf = [sys.executable, "-m", "aicf.cli"]
    plan = [
        ("node-broker", ["broker", "--config", args.config]),
        ("interai-broker", ["broker", "--config", args.config, "--role", "interai", "--port", "7002"]),
        ("register", ["register", "--config", args.config]),
        ("agent", ["agent", "--config", args.config]),
        ("engine", ["engine", "--config", args.config]),
    ]
    procs = []
    for name, cmd in plan:
        procs.append((name, subprocess.Popen(aicf + cmd, stderr=subprocess.PIPE, text=True)))
        time.sleep(0.3)
    time.sleep(args.seconds)
    for _, p in reversed(procs):
        p.send_signal(signal.SIGINT)
    status = 0
    for name, p in procs:
        try:
            _, err = p.communicate(timeout=5)
        except subprocess.TimeoutExpired:
            p.kill()
            _, err = p.communicate()
        stats = [ln for ln in err.splitlines() if ln.startswith(("stats ", "error "))]
        print(f"[{name}] exit={p.returncode} {stats[-1] if stats else ''}")
        status = status or p.returncode
    return status


if __name__ == "__main__":
    sys.exit(main())
