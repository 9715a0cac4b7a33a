"""Acceptance suite: every shipped guarantee, one criterion per test.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion. Wall-clock budgets are asserted where the guarantee includes
one.
"""

from __future__ import annotations

import json
import random
import time

import pytest

from microchor.harness import DeviceSpec, FaultSpec, Scenario, Simulation, run_scenario
from microchor.model import Duration, iter_interactions, validate_package
from microchor.parser import ParseError, parse_duration, parse_package, serialize_package
from microchor.projection import coverage_check, interaction_census, project
from microchor.render import latency_histogram
from microchor.transport import (
    RestRequest,
    RestResponse,
    Status,
    Verb,
    method_not_allowed,
    parse_request,
    result_body,
    send_request,
    service_unavailable,
)

from conftest import ACCIDENT_DOC, ACCIDENT_ROLES

SCALED_ENGINE = {
    "timeout_override_s": 2.0,
    "quarantine_s": 0.8,
    "decision_timeout_s": 0.8,
    "prepare_timeout_s": 6.0,
    "tick_ms": 25,
}

FAST_ENGINE = {
    "timeout_override_s": 0.6,
    "quarantine_s": 0.4,
    "decision_timeout_s": 0.5,
    "prepare_timeout_s": 2.0,
    "tick_ms": 20,
}


def _verdict(criterion: str, problems: list[str]) -> None:
    print(f"\n[acceptance] {criterion}: {'PASS' if not problems else 'FAIL'}")
    for problem in problems:
        print(f"  - {problem}")
    assert not problems, f"{criterion}: {problems}"


def _scenario(engine=None, **overrides) -> Scenario:
    data = {
        "package": str(ACCIDENT_DOC),
        "transactional": True,
        "repetitions": 1,
        "seed": 2024,
        "global_deadline_s": 8.0,
        "engine": dict(engine or FAST_ENGINE),
        "devices": {
            "VehiculoAccidentadoRole": {
                "endpoint": "127.0.0.1:0",
                "data": {"DatosIncidente": "bus 4012: posible infarto, km 132"},
            },
            "BalizaRole": {"endpoint": "127.0.0.1:0"},
            "CentralBalizasRole": {"endpoint": "127.0.0.1:0"},
            "VehiculoTransitoRole": {"endpoint": "127.0.0.1:0"},
            "CentralEmergenciasRole": {"endpoint": "127.0.0.1:0"},
        },
    }
    data.update(overrides)
    return Scenario.from_dict(data)


def test_criterion_1_corpus_fidelity(accident_text):
    problems: list[str] = []
    started = time.perf_counter()

    pkg = parse_package(accident_text)
    diagnostics = validate_package(pkg)
    if diagnostics:
        problems.append(f"corpus produced diagnostics: {diagnostics}")

    if parse_package(serialize_package(pkg)) != pkg:
        problems.append("serialize/parse round trip is not semantically equal")

    if len(pkg.choreographies) != 3:
        problems.append(f"expected 3 choreographies, found {len(pkg.choreographies)}")
    if len(pkg.role_types) != 5:
        problems.append(f"expected 5 roles, found {len(pkg.role_types)}")
    interactions = [i for c in pkg.choreographies for i in iter_interactions(c.body)]
    if len(interactions) != 4:
        problems.append(f"expected 4 interactions, found {len(interactions)}")

    elapsed = time.perf_counter() - started
    if elapsed >= 1.0:
        problems.append(f"runtime {elapsed:.2f}s exceeds 1s budget")
    _verdict("1 corpus fidelity", problems)


def test_criterion_2_projection_correctness(accident_pkg):
    problems: list[str] = []
    started = time.perf_counter()

    if coverage_check(accident_pkg) is not True:
        problems.append("coverage_check failed: projections do not cover every interaction twice")

    baliza = project(accident_pkg, "BalizaRole")
    census = {
        (inter.name, "send" if inter.from_role == "BalizaRole" else "receive")
        for inter in baliza.interactions()
    }
    expected = {
        ("reportarAccidente", "receive"),
        ("publicarAccidente", "send"),
        ("alertaAccidente", "send"),
    }
    if census != expected:
        problems.append(f"BalizaRole projection census {census} != {expected}")

    full_size = len(serialize_package(accident_pkg).encode("utf-8"))
    baliza_size = len(serialize_package(baliza.package).encode("utf-8"))
    if baliza_size >= full_size:
        problems.append(f"BalizaRole projection ({baliza_size} B) not smaller than package ({full_size} B)")

    elapsed = time.perf_counter() - started
    if elapsed >= 1.0:
        problems.append(f"runtime {elapsed:.2f}s exceeds 1s budget")
    _verdict("2 projection correctness", problems)


def test_criterion_3_end_to_end_ordering():
    problems: list[str] = []
    started = time.perf_counter()

    result = run_scenario(_scenario(repetitions=100, seed=31))
    for run in result.runs:
        if not run.completed:
            problems.append(f"run {run.index} did not complete: {run.error}")
            continue
        events = result.run_events(run)
        seqs: dict[str, int] = {}
        for event in events:
            if event.direction == "request" and event.is_choreography:
                seqs.setdefault(event.operation, event.seq)
        publicar_ok = [e.seq for e in events if e.operation == "publicarIncidente"
                       and e.direction == "response" and e.status == "200"]
        try:
            if not seqs["informarIncidente"] < seqs["publicarIncidente"]:
                problems.append(f"run {run.index}: report did not precede publish")
            if not seqs["informarIncidente"] < seqs["alertaIncidente"]:
                problems.append(f"run {run.index}: report did not precede alert")
            if not (publicar_ok and publicar_ok[0] < seqs["solicitarAyudaIncidente"]):
                problems.append(f"run {run.index}: help request before publish was answered")
        except KeyError as missing:
            problems.append(f"run {run.index}: operation never requested: {missing}")

    elapsed = time.perf_counter() - started
    if elapsed >= 60.0:
        problems.append(f"runtime {elapsed:.1f}s exceeds 60s budget")
    _verdict(f"3 end-to-end ordering (100 runs in {elapsed:.1f}s)", problems)


@pytest.mark.parametrize("seed", range(20))
def test_criterion_4_timeout_and_unusable_window(seed):
    problems: list[str] = []
    scenario = _scenario(engine=SCALED_ENGINE, seed=seed, global_deadline_s=12.0)
    scenario.devices["CentralBalizasRole"] = DeviceSpec(
        role="CentralBalizasRole",
        faults=(FaultSpec(kind="never_respond"),),
    )

    with Simulation(scenario) as sim:
        run = sim.run_repetition(0)
        events = sim.trace.events(run.token)

        request = next((e for e in events if e.operation == "publicarIncidente"
                        and e.direction == "request"), None)
        marker = next((e for e in events if e.operation == "publicarIncidente"
                       and e.direction == "timeout"), None)
        if request is None or marker is None:
            problems.append("no timed-out publish attempt recorded")
        else:
            elapsed = marker.timestamp - request.timestamp
            if not 1.6 <= elapsed <= 2.4:
                problems.append(f"abort after {elapsed:.2f}s, outside 2s +/- 20%")

        if run.statuses["BalizaRole"] != "aborted":
            problems.append(f"BalizaRole ended {run.statuses['BalizaRole']}, expected aborted")

        baliza = sim.devices["BalizaRole"]
        execution = baliza.service.execution_for(run.token)
        if execution is None or execution.unusable_until is None:
            problems.append("aborted execution has no unusable window")
        else:
            probe = RestRequest(
                verb=Verb.POST,
                segments=["baliza", "informarIncidente"],
                body=json.dumps({"token": run.token, "from": "VehiculoAccidentadoRole",
                                 "data": "retry"}).encode(),
            )
            inside = send_request(baliza.endpoint, probe, timeout_s=2.0)
            if inside.status is not Status.SERVICE_UNAVAILABLE:
                problems.append(f"message inside quarantine answered {inside.status.line}")

            remaining = execution.unusable_until - time.monotonic()
            time.sleep(max(remaining, 0) + 0.2)
            after = send_request(baliza.endpoint, probe, timeout_s=2.0)
            if after.status is not Status.OK:
                problems.append(f"message after quarantine answered {after.status.line}")

    _verdict(f"4 timeout/unusable semantics (seed {seed})", problems)


def test_criterion_5_clone_failover():
    problems: list[str] = []
    scenario = _scenario(
        repetitions=20,
        seed=5,
        clones={"VehiculoTransitoClone": {"role": "VehiculoTransitoRole", "type": "permanent"}},
    )
    scenario.devices["VehiculoTransitoRole"] = DeviceSpec(
        role="VehiculoTransitoRole",
        faults=(FaultSpec(kind="disappear"),),
    )

    with Simulation(scenario) as sim:
        clone_endpoint = sim.devices["VehiculoTransitoClone"].endpoint
        baliza = sim.devices["BalizaRole"]
        runs = [sim.run_repetition(i) for i in range(scenario.repetitions)]
        for run in runs:
            if not run.completed:
                problems.append(f"run {run.index} did not complete: {run.error}")
                continue
            answers = [e for e in sim.trace.events(run.token)
                       if e.operation == "alertaIncidente" and e.direction == "response"
                       and e.status == "200"]
            if not answers:
                problems.append(f"run {run.index}: alert never answered")
            elif answers[0].endpoint != clone_endpoint:
                problems.append(f"run {run.index}: alert answered by {answers[0].endpoint}, "
                                f"not the clone {clone_endpoint}")
            sticky = baliza.service.clone_registry.sticky_endpoint("VehiculoTransitoRole", run.token)
            if sticky != clone_endpoint:
                problems.append(f"run {run.index}: clone binding not sticky ({sticky})")

    completed = sum(1 for run in runs if run.completed)
    _verdict(f"5 clone failover ({completed}/20 completed)", problems)


def test_criterion_6_transaction_atomicity():
    problems: list[str] = []
    started = time.perf_counter()

    scenario = _scenario(
        repetitions=200,
        seed=6,
        global_deadline_s=6.0,
        fault_plan={"kind": "random_single_disappear", "window_s": 0.06},
    )
    result = run_scenario(scenario)

    mixed = [run for run in result.runs if run.mixed_outcome]
    for run in mixed:
        problems.append(
            f"run {run.index}: mixed outcome phases={run.tx_phases} excluded={run.excluded}"
        )
    if len(result.runs) != 200:
        problems.append(f"expected 200 runs, got {len(result.runs)}")

    elapsed = time.perf_counter() - started
    if elapsed >= 300.0:
        problems.append(f"runtime {elapsed:.0f}s exceeds 5min budget")
    completed = sum(1 for run in result.runs if run.completed)
    _verdict(
        f"6 transaction atomicity (200 faulted runs, {completed} completed, "
        f"{len(mixed)} mixed, {elapsed:.0f}s)",
        problems,
    )


def test_criterion_7_wire_exactness():
    problems: list[str] = []

    golden = {
        Status.OK: b"HTTP/1.1 200 OK\r\n",
        Status.METHOD_NOT_ALLOWED: b"HTTP/1.1 405 Method not allowed\r\n",
        Status.SERVICE_UNAVAILABLE: b"HTTP/1.1 503 Service Unavailable\r\n",
    }
    for status, prefix in golden.items():
        raw = RestResponse(status, b"").to_bytes()
        if not raw.startswith(prefix):
            problems.append(f"status line for {status} is {raw.splitlines()[0]!r}")

    body = result_body("informarIncidente processed by BalizaRole", 7341)
    if body != b'{"result":"informarIncidente processed by BalizaRole","token":7341}':
        problems.append(f"200 body format drifted: {body!r}")
    if method_not_allowed().body != b"" or service_unavailable().body != b"":
        problems.append("405/503 bodies are not empty")

    mapping = {"G": Verb.GET, "P": Verb.PUT, "O": Verb.POST, "D": Verb.DELETE}
    for code, verb in mapping.items():
        if verb.code != code or Verb.from_code(code) is not verb:
            problems.append(f"verb code bijection broken for {code}")

    rng = random.Random(0xFEED)
    crashes = 0
    for _ in range(100_000):
        blob = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 96)))
        try:
            parse_request(blob)
        except Exception:  # noqa: BLE001 - the criterion is "never crashes"
            crashes += 1
    if crashes:
        problems.append(f"parse_request crashed on {crashes} of 100000 random inputs")

    _verdict("7 wire exactness", problems)


def test_criterion_8_histogram_pipeline_and_memory_budget(tmp_path, accident_pkg):
    problems: list[str] = []

    result = run_scenario(_scenario(repetitions=400, seed=8, global_deadline_s=5.0))
    histogram = latency_histogram(result.durations(), result.failed_flags())
    discarded = sum(1 for run in result.runs if run.discarded)
    if histogram.counted + histogram.discarded != 400:
        problems.append(f"histogram covers {histogram.counted + histogram.discarded} of 400 runs")
    if histogram.discarded != discarded:
        problems.append("histogram discard count disagrees with per-run errors")
    if discarded != 0:
        problems.append(f"{discarded} fault-free runs were discarded as errors")

    paths = result.write_artifacts(tmp_path)
    csv_rows = paths["histogram_csv"].read_text().strip().splitlines()
    if len(csv_rows) != 401:
        problems.append(f"histogram CSV has {len(csv_rows) - 1} rows, expected 400")

    baliza_doc = serialize_package(project(accident_pkg, "BalizaRole").package)
    size = len(baliza_doc.encode("utf-8"))
    if size > 8192:
        problems.append(f"BalizaRole projection document is {size} bytes, over the 8192 budget")

    mean_ms = sum(result.durations()) / len(result.durations()) * 1000.0
    _verdict(
        f"8 histogram pipeline + memory budget (400 runs, mean {mean_ms:.0f}ms, "
        f"projection {size}B)",
        problems,
    )


def test_criterion_9_duration_parser():
    problems: list[str] = []

    vectors = {"PT35S": 35, "PT0S": 0, "PT1M30S": 90}
    for text, seconds in vectors.items():
        got = parse_duration(text).seconds
        if got != seconds:
            problems.append(f"{text} parsed to {got}, expected {seconds}")

    rng = random.Random(9)
    for _ in range(1000):
        seconds = rng.randrange(0, 10**6 + 1)
        rendered = Duration(seconds).to_iso()
        try:
            back = parse_duration(rendered).seconds
        except ParseError as exc:
            problems.append(f"{seconds}s rendered {rendered!r} failed to parse: {exc}")
            break
        if back != seconds:
            problems.append(f"round trip {seconds} -> {rendered} -> {back}")
            break

    _verdict("9 duration parser", problems)
