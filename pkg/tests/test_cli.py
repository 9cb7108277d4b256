import csv
import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from aicf import cli

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["broker", "register", "engine", "agent", "sim", "stats"]


def run_main(argv, capsys):
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def help_text(argv, capsys):
    code, out, _ = run_main(argv + ["--help"], capsys)
    assert code == 0
    return out


@pytest.mark.parametrize("cmd", [None] + COMMANDS)
def test_help_golden(cmd, capsys):
    text = help_text([cmd] if cmd else [], capsys)
    path = GOLDEN / f"help_{cmd or 'aicf'}.txt"
    if os.environ.get("AICF_REGEN_GOLDEN") or not path.exists():
        path.write_text(text)
    assert text == path.read_text()


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_lists_every_flag(cmd, capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[cmd]
    text = help_text([cmd], capsys)
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


@pytest.mark.parametrize("argv", [["sim", "--bogus"], ["frobnicate"], [], ["sim", "--mode", "x"],
                                  ["engine"], ["broker", "--port", "abc"]])
def test_bad_invocation_exits_2_with_one_line(argv, capsys):
    code, out, err = run_main(argv, capsys)
    assert code == 2 and out == ""
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error code=CONFIG_INVALID ")


def test_version(capsys):
    code, out, _ = run_main(["--version"], capsys)
    assert code == 0 and out.startswith("aicf ")


def test_sim_both(tmp_path, capsys):
    code, out, err = run_main(["sim", "--mode", "both", "--seed", "7", "--out", str(tmp_path / "r")],
                              capsys)
    assert code == 0 and out == ""
    rows = list(csv.DictReader(open(tmp_path / "r" / "summary.csv")))
    assert len(rows) == 2 and [r["seed"] for r in rows] == ["7", "7"]
    assert float(rows[1]["mean_latency_us"]) < float(rows[0]["mean_latency_us"])
    for line in err.strip().splitlines():
        assert line.startswith("ts=")


def test_sim_scenario_file(tmp_path, capsys):
    from aicf.netsim import single_packet_scenario
    scen = tmp_path / "one.json"
    scen.write_text(json.dumps(single_packet_scenario(300).to_dict()))
    code, _, _ = run_main(["sim", "--scenario", str(scen), "--mode", "cooperative",
                           "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    (row,) = csv.DictReader(open(tmp_path / "o" / "latency_samples.csv"))
    assert float(row["latency_us"]) == 60.0


def test_sim_missing_scenario(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    code, _, err = run_main(["sim", "--scenario", missing], capsys)
    assert code == 2
    assert err.strip().splitlines() == [cli.error_line("CONFIG_INVALID", f"scenario file not found: {missing}")]


def test_sim_invalid_scenario(tmp_path, capsys):
    scen = tmp_path / "bad.json"
    scen.write_text(json.dumps({"n_channels": 0}))
    code, _, err = run_main(["sim", "--scenario", str(scen)], capsys)
    assert code == 2 and "error code=CONFIG_INVALID" in err


def test_sim_io_failure_is_runtime(tmp_path, capsys):
    blocker = tmp_path / "f"
    blocker.write_text("")
    code, _, err = run_main(["sim", "--mode", "baseline", "--out", str(blocker)], capsys)
    assert code == 1 and "error code=RUNTIME cause=IO_FAILED" in err


@pytest.mark.parametrize("cmd,body", [
    ("engine", {"engine": {"apps": []}}),
    ("engine", {"engine": {"engine_id": "e", "apps": [{"app": "nope"}]}}),
    ("engine", {"engine": {"engine_id": "e", "node_broker": "nohost"}}),
    ("agent", {"agent": {"descriptor": {"node_id": "x"}, "apply_hooks": ["ghost"]}}),
    ("register", {"register": {"broker_endpoint": "h:99999"}}),
    ("broker", {"broker": {"queue_capacity": 0}}),
])
def test_bad_configs_exit_2(cmd, body, tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps(body))
    code, _, err = run_main([cmd, "--config", str(conf)], capsys)
    assert code == 2 and err.strip().splitlines()[-1].startswith("error code=CONFIG_INVALID")


def test_missing_config_names_path(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    code, _, err = run_main(["engine", "--config", missing], capsys)
    assert code == 2 and missing in err


def test_parse_endpoint():
    assert cli.parse_endpoint("127.0.0.1:7001") == ("127.0.0.1", 7001)
    assert cli.parse_endpoint(["h", 5]) == ("h", 5)
    for bad in ("7001", "h:", "h:0", ":1", 5):
        with pytest.raises(Exception):
            cli.parse_endpoint(bad)


def test_log_level_precedence(monkeypatch):
    import logging
    monkeypatch.setenv("AICF_LOG", "ERROR")
    cli.setup_logging(None, "DEBUG")
    assert logging.getLogger().level == logging.ERROR
    cli.setup_logging("WARNING", "DEBUG")
    assert logging.getLogger().level == logging.WARNING
    monkeypatch.delenv("AICF_LOG")
    cli.setup_logging(None, "DEBUG")
    assert logging.getLogger().level == logging.DEBUG
    with pytest.raises(Exception):
        cli.setup_logging("LOUD")
    cli.setup_logging("INFO")


def test_logfmt_line():
    import logging
    rec = logging.LogRecord("aicf.x", logging.INFO, __file__, 1, 'said "hi"', None, None)
    line = cli.LogfmtFormatter().format(rec)
    assert line.startswith("ts=") and ' level=INFO logger=aicf.x msg="said \\"hi\\""' in line


# --- live processes --------------------------------------------------------------------

def spawn(*args):
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    return subprocess.Popen([sys.executable, "-m", "aicf.cli", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, env=env)


def wait_listening(proc) -> int:
    deadline = time.time() + 10
    while time.time() < deadline:
        line = proc.stderr.readline()
        if line.startswith("listening "):
            return json.loads(line.split(" ", 1)[1])["port"]
    raise AssertionError("broker did not start")


def test_broker_sigint_flushes_stats():
    proc = spawn("broker", "--port", "0", "--role", "node")
    try:
        port = wait_listening(proc)
        proc.send_signal(signal.SIGUSR1)
        time.sleep(0.2)
        proc.send_signal(signal.SIGINT)
        out, err = proc.communicate(timeout=10)
    finally:
        proc.kill()
    assert proc.returncode == 0 and out == ""
    stats_lines = [l for l in err.splitlines() if l.startswith("stats ")]
    assert len(stats_lines) == 2  # SIGUSR1 then shutdown
    assert json.loads(stats_lines[-1][6:])["published_total"] == 0
    assert port > 0


def test_stats_subcommand(capsys):
    proc = spawn("broker", "--port", "0")
    try:
        port = wait_listening(proc)
        code, out, _ = run_main(["stats", "--broker-endpoint", f"127.0.0.1:{port}"], capsys)
    finally:
        proc.send_signal(signal.SIGINT)
        proc.communicate(timeout=10)
    assert code == 0
    doc = json.loads(out)
    assert set(doc) == {"connected_clients", "subscriptions", "published_total", "delivered_total",
                        "dropped_total"}
    assert doc["connected_clients"] == 1


def test_stats_unreachable(capsys):
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    code, out, err = run_main(["stats", "--broker-endpoint", f"127.0.0.1:{port}", "--timeout", "2"],
                              capsys)
    assert code == 1 and out == "" and "error code=RUNTIME cause=UNREACHABLE" in err


def test_bind_failure_is_runtime():
    first = spawn("broker", "--port", "0")
    try:
        port = wait_listening(first)
        second = spawn("broker", "--port", str(port))
        _, err = second.communicate(timeout=10)
        assert second.returncode == 1
        assert "error code=RUNTIME cause=BIND_FAILED" in err
    finally:
        first.send_signal(signal.SIGINT)
        first.communicate(timeout=10)
