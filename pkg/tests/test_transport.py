from __future__ import annotations

import random
import socket
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from microchor.transport import (
    HoldConnection,
    RestRequest,
    RestResponse,
    RestServer,
    Status,
    TimeoutExpired,
    TransportError,
    Verb,
    dispatch,
    method_not_allowed,
    ok,
    parse_request,
    result_body,
    send_request,
    service_unavailable,
)


class EchoHandler:
    def __init__(self, init_ok: bool = True):
        self.init_ok = init_ok
        self.seen: list[RestRequest] = []

    def initialize(self, request: RestRequest) -> bool:
        return self.init_ok

    def handle(self, request: RestRequest) -> RestResponse:
        if request.verb is not Verb.POST:
            return method_not_allowed()
        self.seen.append(request)
        return ok(f"echo {request.method}", request.token or 0)


def test_post_request_hand_traced_fields():
    # Oracle: hand trace of the slash-splitting parse over this input.
    raw = (
        b"POST /api/baliza/informarIncidente HTTP/1.1\r\n"
        b"Content-Length: 36\r\n\r\n"
        b'{"token":7341,"data":"todo en orden"}'
    )
    req = parse_request(raw, rewrite_base="api")
    assert req is not None
    assert req.verb is Verb.POST and req.verb.code == "O"
    assert req.segments == ["baliza", "informarIncidente"]
    assert req.token == 7341


def test_get_request_with_querystring():
    req = parse_request(b"GET /api/central/estado?id=3&full=1 HTTP/1.1\r\n\r\n")
    assert req.verb is Verb.GET
    assert req.segments == ["central", "estado"]
    assert req.query == [("id", "3"), ("full", "1")]


def test_empty_input_rejected_silently():
    assert parse_request(b"") is None


def test_unrecognized_verb_rejected_silently():
    assert parse_request(b"BREW /api/x/y HTTP/1.1\r\n\r\n") is None


def test_rewrite_base_consumed_case_insensitively():
    req = parse_request(b"GET /API/svc/m HTTP/1.1\r\n\r\n", rewrite_base="api")
    assert req.segments == ["svc", "m"]
    req = parse_request(b"GET /svc/m HTTP/1.1\r\n\r\n", rewrite_base="api")
    assert req.segments == ["svc", "m"]


def test_extra_segments_preserved():
    req = parse_request(b"PUT /api/tx/42/prepare HTTP/1.1\r\n\r\n")
    assert req.segments == ["tx", "42", "prepare"]
    assert req.extra == ["prepare"]


def test_verb_code_bijection():
    for verb in Verb:
        assert Verb.from_code(verb.code) is verb
    assert {v.code for v in Verb} == {"G", "P", "O", "D"}
    assert Verb.GET.code == "G" and Verb.PUT.code == "P"
    assert Verb.POST.code == "O" and Verb.DELETE.code == "D"


def test_status_lines_are_byte_exact():
    assert Status.OK.line == "200 OK"
    assert Status.METHOD_NOT_ALLOWED.line == "405 Method not allowed"
    assert Status.SERVICE_UNAVAILABLE.line == "503 Service Unavailable"
    assert RestResponse(Status.OK, b"x").to_bytes().startswith(b"HTTP/1.1 200 OK\r\n")
    assert method_not_allowed().to_bytes().startswith(b"HTTP/1.1 405 Method not allowed\r\n")
    assert service_unavailable().to_bytes().startswith(b"HTTP/1.1 503 Service Unavailable\r\n")


def test_result_body_is_byte_exact():
    assert result_body("tempReport done", 7341) == b'{"result":"tempReport done","token":7341}'
    # token must be numeric and unquoted, result first
    body = result_body("x", 1)
    assert body.index(b'"result"') < body.index(b'"token"')
    assert b'"token":1}' in body


def test_parse_request_fuzz_never_crashes():
    rng = random.Random(0xC0FFEE)
    for _ in range(100_000):
        size = rng.randrange(0, 64)
        raw = bytes(rng.randrange(256) for _ in range(size))
        parse_request(raw)  # must not raise
    # a couple of adversarial framings
    for raw in (b"GET", b"GET \r\n\r\n", b"POST /" + b"a" * 4096, b"\r\n\r\n", b"GET /a?&&&= HTTP/1.1\r\n\r\n"):
        parse_request(raw)


@given(st.binary(max_size=200))
def test_parse_request_total_property(raw):
    result = parse_request(raw)
    assert result is None or isinstance(result, RestRequest)


def test_dispatch_unknown_service_503():
    req = parse_request(b"POST /api/nadie/x HTTP/1.1\r\n\r\n")
    resp = dispatch(req, {})
    assert resp.status is Status.SERVICE_UNAVAILABLE
    assert resp.body == b""


def test_dispatch_init_failure_503():
    req = parse_request(b"POST /api/baliza/x HTTP/1.1\r\n\r\n")
    resp = dispatch(req, {"baliza": EchoHandler(init_ok=False)})
    assert resp.status is Status.SERVICE_UNAVAILABLE


def test_dispatch_verb_mismatch_405():
    req = parse_request(b"GET /api/baliza/tempReport HTTP/1.1\r\n\r\n")
    resp = dispatch(req, {"baliza": EchoHandler()})
    assert resp.status is Status.METHOD_NOT_ALLOWED
    assert resp.body == b""


def test_dispatch_success_200():
    raw = b'POST /api/baliza/informarIncidente HTTP/1.1\r\nContent-Length: 14\r\n\r\n{"token":7341}'
    req = parse_request(raw)
    resp = dispatch(req, {"baliza": EchoHandler()})
    assert resp.status is Status.OK
    assert resp.body == b'{"result":"echo informarIncidente","token":7341}'


def _choreo_request(token=7341):
    return RestRequest(verb=Verb.POST, segments=["baliza", "informarIncidente"],
                       body=b'{"token":%d}' % token)


def test_send_request_round_trip_on_loopback():
    handler = EchoHandler()
    server = RestServer("127.0.0.1:0", {"baliza": handler}).start()
    try:
        resp = send_request(server.endpoint, _choreo_request(), timeout_s=5.0)
        assert resp.status is Status.OK
        assert resp.body == b'{"result":"echo informarIncidente","token":7341}'
        assert len(handler.seen) == 1
    finally:
        server.stop()


def test_send_request_times_out_against_silent_server():
    def hold(raw: bytes):
        raise HoldConnection()

    server = RestServer("127.0.0.1:0", {}, connection_filter=hold).start()
    try:
        started = time.monotonic()
        with pytest.raises(TimeoutExpired):
            send_request(server.endpoint, _choreo_request(), timeout_s=0.6)
        elapsed = time.monotonic() - started
        assert 0.4 <= elapsed <= 1.2
    finally:
        server.stop()


def test_send_request_refused_port_raises_transport_error():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    with pytest.raises(TransportError):
        send_request(f"127.0.0.1:{port}", _choreo_request(), timeout_s=2.0)


def test_send_request_zero_timeout_fails_immediately():
    started = time.monotonic()
    with pytest.raises(TimeoutExpired):
        send_request("127.0.0.1:9", _choreo_request(), timeout_s=0.0)
    assert time.monotonic() - started < 0.1


def test_server_writes_nothing_for_garbage():
    server = RestServer("127.0.0.1:0", {}).start()
    try:
        host, _, port = server.endpoint.rpartition(":")
        with socket.create_connection((host, int(port)), timeout=2.0) as conn:
            conn.sendall(b"BREW /api/x HTTP/1.1\r\n\r\n")
            conn.settimeout(2.0)
            assert conn.recv(1024) == b""
    finally:
        server.stop()
