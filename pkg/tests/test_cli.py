from __future__ import annotations

import json
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from microchor.cli import main
from microchor.trace import merge_traces, read_trace

from conftest import ACCIDENT_DOC, CORPUS

FAST_ENGINE = {
    "timeout_override_s": 1.0,
    "quarantine_s": 0.5,
    "decision_timeout_s": 0.6,
    "prepare_timeout_s": 3.0,
    "tick_ms": 25,
}


def _write_scenario(tmp_path: Path, **overrides) -> Path:
    data = {
        "package": str(ACCIDENT_DOC),
        "transactional": True,
        "repetitions": 2,
        "seed": 3,
        "global_deadline_s": 8.0,
        "engine": dict(FAST_ENGINE),
        "devices": {
            "VehiculoAccidentadoRole": {"endpoint": "127.0.0.1:0", "data": {"DatosIncidente": "aviso"}},
            "BalizaRole": {"endpoint": "127.0.0.1:0"},
            "CentralBalizasRole": {"endpoint": "127.0.0.1:0"},
            "VehiculoTransitoRole": {"endpoint": "127.0.0.1:0"},
            "CentralEmergenciasRole": {"endpoint": "127.0.0.1:0"},
        },
    }
    data.update(overrides)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_validate_corpus_exits_zero(capsys):
    assert main(["validate", str(ACCIDENT_DOC)]) == 0
    out = capsys.readouterr().out
    assert "no errors" in out


def test_validate_broken_package_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.cdl"
    bad.write_text(
        '<package name="x"><choreography name="a" root="true"><sequence/></choreography>'
        '<choreography name="b" root="true"><sequence/></choreography></package>'
    )
    assert main(["validate", str(bad)]) == 1
    assert "MULTIPLE_ROOTS" in capsys.readouterr().out


def test_validate_unreadable_file_exits_three(tmp_path):
    assert main(["validate", str(tmp_path / "missing.cdl")]) == 3


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as err:
        main(["simulate"])  # missing scenario argument
    assert err.value.code == 2


def test_project_writes_three_interaction_document(tmp_path, capsys):
    out = tmp_path / "baliza.cdl"
    assert main(["project", str(ACCIDENT_DOC), "--role", "BalizaRole", "-o", str(out)]) == 0
    text = out.read_text()
    assert text.count("<interaction ") == 3
    assert main(["validate", str(out)]) == 0


def test_project_unknown_role_exits_one():
    assert main(["project", str(ACCIDENT_DOC), "--role", "GhostRole"]) == 1


def test_simulate_writes_artifacts(tmp_path, capsys):
    scenario = _write_scenario(tmp_path)
    out_dir = tmp_path / "out"
    code = main(["simulate", str(scenario), "--runs", "2", "--out", str(out_dir), "--check"])
    assert code == 0
    assert (out_dir / "trace.ndjson").exists()
    assert (out_dir / "diagram.txt").exists()
    assert (out_dir / "histogram.csv").exists()
    csv_rows = (out_dir / "histogram.csv").read_text().strip().splitlines()
    assert len(csv_rows) == 3  # header + 2 runs
    captured = capsys.readouterr().out
    assert "2 runs: 2 completed" in captured


def test_simulate_seed_reproduces_tokens(tmp_path):
    scenario = _write_scenario(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["simulate", str(scenario), "--seed", "11", "--out", str(out_a)]) == 0
    assert main(["simulate", str(scenario), "--seed", "11", "--out", str(out_b)]) == 0
    tokens_a = [e.token for e in read_trace(out_a / "trace.ndjson")]
    tokens_b = [e.token for e in read_trace(out_b / "trace.ndjson")]
    assert sorted(set(tokens_a)) == sorted(set(tokens_b))


def test_render_diagram_from_trace(tmp_path, capsys):
    scenario = _write_scenario(tmp_path, transactional=False, repetitions=1)
    out_dir = tmp_path / "out"
    assert main(["simulate", str(scenario), "--out", str(out_dir)]) == 0
    capsys.readouterr()
    assert main(["render", str(out_dir / "trace.ndjson"), "--format", "diagram"]) == 0
    rendered = capsys.readouterr().out
    assert rendered == (out_dir / "diagram.txt").read_text()


def test_render_histogram_from_trace(tmp_path, capsys):
    scenario = _write_scenario(tmp_path, repetitions=3)
    out_dir = tmp_path / "out"
    assert main(["simulate", str(scenario), "--out", str(out_dir)]) == 0
    capsys.readouterr()
    assert main(["render", str(out_dir / "trace.ndjson"), "--format", "histogram"]) == 0
    rendered = capsys.readouterr().out
    assert "runs counted: 3" in rendered


def _free_port() -> int:
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    return port


def test_serve_processes_run_distributed_choreography(tmp_path):
    """Genuine distribution: one OS process per device, driven over loopback."""
    roles = (
        "VehiculoAccidentadoRole",
        "BalizaRole",
        "CentralBalizasRole",
        "VehiculoTransitoRole",
        "CentralEmergenciasRole",
    )
    endpoints = {role: f"127.0.0.1:{_free_port()}" for role in roles}
    config = {
        "endpoints": endpoints,
        "engine": dict(FAST_ENGINE),
        "transactional": False,
        "data": {"DatosIncidente": "aviso"},
    }
    config_path = tmp_path / "device.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")

    processes = []
    traces = {}
    try:
        for role in roles:
            trace_path = tmp_path / f"{role}.ndjson"
            traces[role] = trace_path
            cmd = [
                sys.executable, "-m", "microchor.cli", "serve", str(ACCIDENT_DOC),
                "--role", role, "--endpoint", endpoints[role],
                "--config", str(config_path), "--trace-out", str(trace_path),
            ]
            if role == "VehiculoAccidentadoRole":
                cmd += ["--initiate", "--once", "--token", "424242"]
                initiator_cmd = cmd
                continue
            processes.append(subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE))

        time.sleep(1.5)  # give the four passive devices time to bind
        initiator = subprocess.run(initiator_cmd, capture_output=True, timeout=30, text=True)
        assert initiator.returncode == 0, initiator.stdout + initiator.stderr
        time.sleep(1.0)  # let downstream devices settle before stopping them
    finally:
        for proc in processes:
            proc.send_signal(signal.SIGTERM)
        for proc in processes:
            proc.wait(timeout=10)

    merged = merge_traces([read_trace(path) for path in traces.values() if path.exists()])
    operations = [e.operation for e in merged if e.direction == "request" and e.is_choreography]
    assert operations[0] == "informarIncidente"
    assert set(operations) == {
        "informarIncidente", "publicarIncidente", "alertaIncidente", "solicitarAyudaIncidente",
    }
    informar = next(e for e in merged if e.operation == "informarIncidente" and e.direction == "request")
    ayuda = next(e for e in merged if e.operation == "solicitarAyudaIncidente" and e.direction == "request")
    assert informar.timestamp < ayuda.timestamp
