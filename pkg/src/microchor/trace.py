"""Execution traces: timestamped records of every message exchange.

Each request gets one event when it leaves the sender, each answered request
one response event recorded by the responder, and each failed attempt one
timeout marker. Events carry the execution token, so traces of overlapping
runs can be sliced per execution.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass

DIRECTIONS = ("request", "response", "timeout", "complete", "abort")


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    timestamp: float
    token: int | None
    from_role: str
    to_role: str
    operation: str
    verb: str
    direction: str
    status: str | None = None
    endpoint: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        data = json.loads(line)
        return cls(**{key: data.get(key) for key in cls.__dataclass_fields__})

    @property
    def is_choreography(self) -> bool:
        return bool(self.operation) and not self.operation.startswith("tx:")


class TraceCollector:
    """Totally ordered event sink shared by every device of a scenario."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events: list[TraceEvent] = []

    def record(self, *, token, from_role, to_role, operation, verb, direction,
               status=None, endpoint=None) -> TraceEvent:
        with self._lock:
            event = TraceEvent(
                seq=len(self._events),
                timestamp=time.time(),
                token=token,
                from_role=from_role,
                to_role=to_role,
                operation=operation,
                verb=verb,
                direction=direction,
                status=status,
                endpoint=endpoint,
            )
            self._events.append(event)
            return event

    def events(self, token: int | None = None) -> list[TraceEvent]:
        with self._lock:
            snapshot = list(self._events)
        if token is None:
            return snapshot
        return [e for e in snapshot if e.token == token]

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)


def write_trace(events: list[TraceEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for event in events:
            handle.write(event.to_json() + "\n")


def read_trace(path) -> list[TraceEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                events.append(TraceEvent.from_json(line))
    return events


def merge_traces(event_lists: list[list[TraceEvent]]) -> list[TraceEvent]:
    """Merge per-device traces (from process mode) by wall-clock timestamp."""
    merged = sorted((e for events in event_lists for e in events),
                    key=lambda e: (e.timestamp, e.seq))
    return [
        TraceEvent(seq=i, timestamp=e.timestamp, token=e.token, from_role=e.from_role,
                   to_role=e.to_role, operation=e.operation, verb=e.verb,
                   direction=e.direction, status=e.status, endpoint=e.endpoint)
        for i, e in enumerate(merged)
    ]


def pair_requests(events: list[TraceEvent]) -> list[tuple[TraceEvent, TraceEvent | None]]:
    """Greedily match each request with its response or timeout marker.

    The pairing key is (token, operation, from_role, to_role); matching is by
    ascending sequence number.
    """
    def key(event: TraceEvent):
        return (event.token, event.operation, event.from_role, event.to_role)

    pending: dict[tuple, list[TraceEvent]] = {}
    pairs: dict[int, TraceEvent | None] = {}
    ordered_requests: list[TraceEvent] = []
    for event in sorted(events, key=lambda e: e.seq):
        if event.direction == "request":
            ordered_requests.append(event)
            pending.setdefault(key(event), []).append(event)
            pairs[event.seq] = None
        elif event.direction in ("response", "timeout"):
            queue = pending.get(key(event))
            if queue:
                request = queue.pop(0)
                pairs[request.seq] = event
    return [(request, pairs[request.seq]) for request in ordered_requests]
