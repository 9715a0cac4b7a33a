"""Minimal REST wire layer: four verbs, path/query parsing, exact responses.

The server is a deliberately tiny HTTP/1.1 subset of the kind that fits a
device without an operating system: Content-Length framing only, no chunked
encoding, no keep-alive, one connection per request. Request payloads are
JSON-shaped text that the transport treats as opaque except for extracting
the numeric ``token`` field.

Status lines are part of the byte-level contract: exactly ``200 OK``,
``405 Method not allowed`` and ``503 Service Unavailable``.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

log = logging.getLogger(__name__)

MAX_REQUEST_LINE = 512
MAX_BODY = 4096

_TOKEN_RE = re.compile(rb'"token"\s*:\s*(\d+)')


class Verb(enum.Enum):
    """The four supported verbs with their single-character codes."""

    GET = "G"
    PUT = "P"
    POST = "O"
    DELETE = "D"

    @property
    def code(self) -> str:
        return self.value

    @classmethod
    def from_code(cls, code: str) -> "Verb":
        return cls(code)


class Status(enum.Enum):
    OK = "200 OK"
    METHOD_NOT_ALLOWED = "405 Method not allowed"
    SERVICE_UNAVAILABLE = "503 Service Unavailable"

    @property
    def line(self) -> str:
        return self.value

    @property
    def code(self) -> int:
        return int(self.value.split(" ", 1)[0])


class TimeoutExpired(Exception):
    pass


class TransportError(Exception):
    pass


@dataclass
class RestRequest:
    """One parsed request: verb, path segments, ordered query pairs, raw body."""

    verb: Verb
    segments: list[str]
    query: list[tuple[str, str]] = field(default_factory=list)
    body: bytes | None = None
    rewrite_base: str = "api"

    @property
    def service(self) -> str:
        return self.segments[0] if self.segments else ""

    @property
    def method(self) -> str:
        return self.segments[1] if len(self.segments) > 1 else ""

    @property
    def extra(self) -> list[str]:
        return self.segments[2:]

    @property
    def token(self) -> int | None:
        if not self.body:
            return None
        match = _TOKEN_RE.search(self.body)
        return int(match.group(1)) if match else None

    def json_body(self) -> dict:
        if not self.body:
            return {}
        try:
            data = json.loads(self.body.decode("utf-8", errors="replace"))
        except json.JSONDecodeError:
            return {}
        return data if isinstance(data, dict) else {}

    def path(self) -> str:
        path = "/" + "/".join([self.rewrite_base, *self.segments])
        if self.query:
            path += "?" + "&".join(f"{k}={v}" for k, v in self.query)
        return path

    def to_bytes(self) -> bytes:
        body = self.body or b""
        head = (
            f"{self.verb.name} {self.path()} HTTP/1.1\r\n"
            f"Content-Type: application/json\r\n"
            f"Content-Length: {len(body)}\r\n"
            f"Connection: close\r\n\r\n"
        )
        return head.encode("utf-8") + body


@dataclass
class RestResponse:
    status: Status
    body: bytes = b""

    def to_bytes(self) -> bytes:
        head = (
            f"HTTP/1.1 {self.status.line}\r\n"
            f"Content-Type: application/json\r\n"
            f"Content-Length: {len(self.body)}\r\n"
            f"Connection: close\r\n\r\n"
        )
        return head.encode("utf-8") + self.body


def result_body(result: str, token: int) -> bytes:
    """The exact two-field 200 body: result first, token numeric and unquoted."""
    return json.dumps({"result": result, "token": token}, separators=(",", ":")).encode("utf-8")


def ok(result: str, token: int) -> RestResponse:
    return RestResponse(Status.OK, result_body(result, token))


def method_not_allowed() -> RestResponse:
    return RestResponse(Status.METHOD_NOT_ALLOWED, b"")


def service_unavailable(body: bytes = b"") -> RestResponse:
    return RestResponse(Status.SERVICE_UNAVAILABLE, body)


def parse_request(raw: bytes, rewrite_base: str = "api") -> RestRequest | None:
    """Parse raw request bytes; ``None`` means reject silently (write nothing).

    Total over arbitrary input: empty input, unrecognized verbs, and any
    malformed framing all yield ``None`` rather than an exception. The
    leading path segment is consumed when it equals the rewrite base
    (case-insensitively); a trailing ``?k=v&k2=v2`` suffix becomes ordered
    query pairs.
    """
    if not raw:
        return None
    head, sep, body = raw.partition(b"\r\n\r\n")
    if not sep:
        head, sep, body = raw.partition(b"\n\n")
    lines = head.splitlines()
    if not lines:
        return None
    request_line = lines[0]
    if len(request_line) > MAX_REQUEST_LINE:
        return None
    try:
        text = request_line.decode("utf-8")
    except UnicodeDecodeError:
        return None
    parts = text.split()
    if len(parts) < 2:
        return None
    verb_name, target = parts[0], parts[1]
    try:
        verb = Verb[verb_name]
    except KeyError:
        return None

    target, _, query_text = target.partition("?")
    segments = [seg for seg in target.split("/") if seg]
    if segments and segments[0].lower() == rewrite_base.lower():
        segments = segments[1:]

    query: list[tuple[str, str]] = []
    if query_text:
        for pair in query_text.split("&"):
            if not pair:
                continue
            key, _, value = pair.partition("=")
            query.append((key, value))

    return RestRequest(
        verb=verb,
        segments=segments,
        query=query,
        body=body[:MAX_BODY] if body else None,
        rewrite_base=rewrite_base,
    )


class Handler(Protocol):
    """A registered service: initialized per request, then invoked."""

    def initialize(self, request: RestRequest) -> bool: ...

    def handle(self, request: RestRequest) -> RestResponse: ...


def dispatch(request: RestRequest, registry: dict[str, Handler]) -> RestResponse:
    """Route a parsed request to its service handler.

    Unknown services and handlers that fail to initialize answer 503 with an
    empty body; everything else is up to the handler (including 405 on verb
    mismatch).
    """
    handler = registry.get(request.service)
    if handler is None:
        return service_unavailable()
    try:
        if not handler.initialize(request):
            return service_unavailable()
        return handler.handle(request)
    except Exception:
        log.exception("handler for %r failed", request.service)
        return service_unavailable()


def _recv_http(conn: socket.socket, deadline: float | None = None) -> bytes:
    """Read one HTTP message (headers + Content-Length body) from a socket."""
    chunks = b""
    while b"\r\n\r\n" not in chunks:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout()
            conn.settimeout(remaining)
        part = conn.recv(2048)
        if not part:
            return chunks
        chunks += part
        if len(chunks) > MAX_REQUEST_LINE + 16 * MAX_BODY:
            return chunks
    head, _, body = chunks.partition(b"\r\n\r\n")
    content_length = 0
    for line in head.split(b"\r\n")[1:]:
        if line.lower().startswith(b"content-length"):
            try:
                content_length = int(line.split(b":", 1)[1].strip())
            except ValueError:
                content_length = 0
            break
    content_length = min(content_length, MAX_BODY)
    while len(body) < content_length:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout()
            conn.settimeout(remaining)
        part = conn.recv(2048)
        if not part:
            break
        body += part
    return head + b"\r\n\r\n" + body


def send_request(endpoint: str, request: RestRequest, timeout_s: float) -> RestResponse:
    """Send one request and wait for the response within ``timeout_s``.

    Raises :class:`TimeoutExpired` when the deadline elapses (including a
    zero/negative timeout, which fails without transmitting) and
    :class:`TransportError` for refused or reset connections.
    """
    if timeout_s <= 0:
        raise TimeoutExpired(f"timeout of {timeout_s}s gives no time to call {endpoint}")
    host, _, port_text = endpoint.rpartition(":")
    deadline = time.monotonic() + timeout_s
    try:
        with socket.create_connection((host, int(port_text)), timeout=timeout_s) as conn:
            conn.sendall(request.to_bytes())
            raw = _recv_http(conn, deadline=deadline)
    except socket.timeout as exc:
        raise TimeoutExpired(f"no response from {endpoint} within {timeout_s}s") from exc
    except OSError as exc:
        raise TransportError(f"cannot reach {endpoint}: {exc}") from exc

    if not raw:
        raise TransportError(f"connection to {endpoint} closed without a response")
    status_line = raw.split(b"\r\n", 1)[0]
    body = raw.partition(b"\r\n\r\n")[2]
    try:
        reason = status_line.decode("utf-8").split(" ", 1)[1]
        status = Status(reason)
    except (IndexError, ValueError, UnicodeDecodeError) as exc:
        raise TransportError(f"unrecognized response from {endpoint}: {status_line!r}") from exc
    return RestResponse(status, body)


class HoldConnection(Exception):
    """Raised by a connection filter to keep the socket open without answering."""


class DropConnection(Exception):
    """Raised by a connection filter to close the socket without answering."""


# A connection filter sees each raw request before dispatch; it may raise
# HoldConnection/DropConnection to simulate misbehaving devices.
ConnectionFilter = Callable[[bytes], None]


class RestServer:
    """Threaded TCP server around :func:`parse_request` and :func:`dispatch`."""

    def __init__(
        self,
        endpoint: str,
        registry: dict[str, Handler],
        rewrite_base: str = "api",
        connection_filter: ConnectionFilter | None = None,
    ):
        host, _, port_text = endpoint.rpartition(":")
        self.registry = registry
        self.rewrite_base = rewrite_base
        self.connection_filter = connection_filter
        self.refuse_connections = False
        self._stopping = threading.Event()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, int(port_text)))
        self._sock.listen(64)
        # A finite accept timeout lets the loop notice stop() promptly.
        self._sock.settimeout(0.2)
        self.endpoint = f"{host}:{self._sock.getsockname()[1]}"
        self._thread = threading.Thread(target=self._accept_loop, daemon=True, name=f"rest@{self.endpoint}")

    def start(self) -> "RestServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=2.0)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            threading.Thread(target=self._serve_one, args=(conn,), daemon=True).start()

    def _serve_one(self, conn: socket.socket) -> None:
        try:
            if self.refuse_connections:
                return
            conn.settimeout(10.0)
            try:
                raw = _recv_http(conn)
            except (socket.timeout, OSError):
                return
            if self.refuse_connections:
                return
            if self.connection_filter is not None:
                try:
                    self.connection_filter(raw)
                except DropConnection:
                    return
                except HoldConnection:
                    self._hold(conn)
                    return
            request = parse_request(raw, self.rewrite_base)
            if request is None:
                return
            response = dispatch(request, self.registry)
            try:
                conn.sendall(response.to_bytes())
            except OSError:
                pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _hold(self, conn: socket.socket) -> None:
        # Keep the connection open, silently, until the peer gives up or the
        # server stops; the caller's timeout machinery does the rest.
        conn.settimeout(0.1)
        deadline = time.monotonic() + 120.0
        while not self._stopping.is_set() and time.monotonic() < deadline:
            try:
                if conn.recv(64) == b"":
                    return
            except socket.timeout:
                continue
            except OSError:
                return
