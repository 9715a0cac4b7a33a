from __future__ import annotations

import json
import time

import pytest

from microchor.engine import EngineConfig
from microchor.projection import project
from microchor.runtime import RoleService, build_device_registry
from microchor.transactions import TxHandler
from microchor.transport import (
    RestRequest,
    RestServer,
    Status,
    Verb,
    send_request,
)


@pytest.fixture()
def baliza(accident_pkg):
    """A live BalizaRole device on an ephemeral loopback port."""
    projection = project(accident_pkg, "BalizaRole")
    config = EngineConfig(timeout_override_s=0.5, quarantine_s=0.4,
                          decision_timeout_s=5.0, tick_ms=20)
    service = RoleService(projection, config, transactional=True)
    server = RestServer("127.0.0.1:0", build_device_registry(service))
    service.endpoint = server.endpoint
    server.start()
    service.start()
    yield service, server
    service.stop()
    server.stop()


def _choreo_request(operation: str, token: int, tx_token: int | None = None,
                    data: str = "aviso") -> RestRequest:
    payload = {"token": token, "from": "VehiculoAccidentadoRole", "data": data}
    if tx_token is not None:
        payload["tx"] = {"token": tx_token, "root": "VehiculoAccidentadoRole"}
    return RestRequest(verb=Verb.POST, segments=["baliza", operation],
                       body=json.dumps(payload).encode())


def _tx(op: str, tx_token: int, verb: Verb = Verb.PUT) -> RestRequest:
    return RestRequest(verb=verb, segments=["tx", str(tx_token), op],
                       body=json.dumps({"token": tx_token, "from": "VehiculoAccidentadoRole"}).encode())


def _wait_terminal(service, token, timeout=3.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        snap = service.snapshot(token)
        if snap["status"] in ("completed", "aborted"):
            return snap
        time.sleep(0.02)
    raise AssertionError(f"device never settled: {service.snapshot(token)}")


def test_receive_over_wire_and_duplicate_replay(baliza):
    service, server = baliza
    first = send_request(server.endpoint, _choreo_request("informarIncidente", 7341), 2.0)
    assert first.status is Status.OK
    assert first.body == b'{"result":"informarIncidente processed by BalizaRole","token":7341}'
    again = send_request(server.endpoint, _choreo_request("informarIncidente", 7341), 2.0)
    assert again.body == first.body


def test_verb_mismatch_over_wire(baliza):
    _, server = baliza
    request = RestRequest(verb=Verb.GET, segments=["baliza", "informarIncidente"],
                          body=b'{"token":1}')
    assert send_request(server.endpoint, request, 2.0).status is Status.METHOD_NOT_ALLOWED


def test_unknown_service_over_wire(baliza):
    _, server = baliza
    request = RestRequest(verb=Verb.POST, segments=["nadie", "x"], body=b'{"token":1}')
    assert send_request(server.endpoint, request, 2.0).status is Status.SERVICE_UNAVAILABLE


def test_prepare_answers_golden_body(baliza):
    service, server = baliza
    token, tx_token = 8001, 9001
    # Receiving the message enlists this device in the transaction; its own
    # downstream sends will fail fast (no endpoints), aborting the execution.
    send_request(server.endpoint, _choreo_request("informarIncidente", token, tx_token), 2.0)
    _wait_terminal(service, token)
    response = send_request(server.endpoint, _tx("prepare", tx_token), 3.0)
    assert response.status is Status.OK
    payload = json.loads(response.body)
    assert payload["result"] in ("prepared", "abort")
    assert payload["token"] == tx_token
    # this device aborted (its sends had nowhere to go), so the vote is abort
    assert payload["result"] == "abort"
    assert response.body == b'{"result":"abort","token":9001}'


def test_rollback_undoes_store_and_aborts(baliza):
    service, server = baliza
    token, tx_token = 8002, 9002
    send_request(server.endpoint, _choreo_request("informarIncidente", token, tx_token), 2.0)
    assert service.snapshot(token)["store"].get("DatosIncidente") == "aviso"

    response = send_request(server.endpoint, _tx("rollback", tx_token), 3.0)
    assert json.loads(response.body)["result"] == "rolled_back"
    snap = service.snapshot(token)
    assert "DatosIncidente" not in snap["store"]
    assert snap["status"] == "aborted"
    assert snap["tx_phase"] == "rolled_back"

    # idempotent: a second rollback answers the same and changes nothing
    second = send_request(server.endpoint, _tx("rollback", tx_token), 3.0)
    assert json.loads(second.body)["result"] == "rolled_back"
    assert service.snapshot(token) == snap


def test_tx_unknown_token_is_503(baliza):
    _, server = baliza
    assert send_request(server.endpoint, _tx("commit", 424242), 2.0).status is Status.SERVICE_UNAVAILABLE


def test_tx_wrong_verb_is_405(baliza):
    service, server = baliza
    token, tx_token = 8003, 9003
    send_request(server.endpoint, _choreo_request("informarIncidente", token, tx_token), 2.0)
    assert send_request(server.endpoint, _tx("prepare", tx_token, verb=Verb.POST), 2.0).status \
        is Status.METHOD_NOT_ALLOWED
    assert send_request(server.endpoint, _tx("status", tx_token, verb=Verb.PUT), 2.0).status \
        is Status.METHOD_NOT_ALLOWED


def test_tx_status_reports_decision(baliza):
    service, server = baliza
    token, tx_token = 8004, 9004
    send_request(server.endpoint, _choreo_request("informarIncidente", token, tx_token), 2.0)
    unknown = send_request(server.endpoint, _tx("status", tx_token, verb=Verb.GET), 2.0)
    assert json.loads(unknown.body)["result"] == "unknown"
    send_request(server.endpoint, _tx("rollback", tx_token), 3.0)
    decided = send_request(server.endpoint, _tx("status", tx_token, verb=Verb.GET), 2.0)
    assert json.loads(decided.body)["result"] == "rolled_back"


def test_abort_notification_acknowledged_without_state(baliza):
    _, server = baliza
    request = RestRequest(verb=Verb.POST, segments=["baliza", "abortExecution"],
                          body=b'{"token":555,"from":"X"}')
    response = send_request(server.endpoint, request, 2.0)
    assert response.status is Status.OK
    assert json.loads(response.body)["result"] == "acknowledged"
