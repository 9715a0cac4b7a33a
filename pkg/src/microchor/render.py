"""Render traces and run metrics into human-readable artifacts.

The sequence diagram uses the mermaid text grammar: one lifeline per role,
a solid arrow per request, a dashed arrow per response, a cross arrow plus a
note for timed-out requests. Rendering is a pure function of the trace, so
the same trace always produces byte-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

from .trace import TraceEvent


class EmptyTrace(Exception):
    pass


class NoData(Exception):
    pass


def render_sequence_diagram(events: list[TraceEvent]) -> str:
    if not events:
        raise EmptyTrace("cannot render a diagram from an empty trace")

    lifelines: list[str] = []
    for event in sorted(events, key=lambda e: e.seq):
        for role in (event.from_role, event.to_role):
            if role and role != "unknown" and role not in lifelines:
                lifelines.append(role)

    lines = ["sequenceDiagram"]
    for role in lifelines:
        lines.append(f"    participant {role}")
    for event in sorted(events, key=lambda e: e.seq):
        if not event.operation:
            if event.direction == "abort":
                lines.append(f"    Note over {event.from_role}: aborted")
            continue
        label = event.operation
        if event.direction == "request":
            lines.append(f"    {event.from_role}->>{event.to_role}: {label}")
        elif event.direction == "response":
            status = event.status or ""
            lines.append(f"    {event.to_role}-->>{event.from_role}: {status} {label}".rstrip())
        elif event.direction == "timeout":
            lines.append(f"    {event.from_role}--x{event.to_role}: {label}")
            lines.append(f"    Note over {event.from_role},{event.to_role}: "
                         f"{event.status or 'timeout'} on {label}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class HistogramBin:
    low: float
    high: float
    count: int


@dataclass(frozen=True)
class Histogram:
    bins: tuple[HistogramBin, ...]
    counted: int
    discarded: int

    def to_text(self, width: int = 50) -> str:
        peak = max((b.count for b in self.bins), default=1) or 1
        lines = [f"runs counted: {self.counted}   discarded: {self.discarded}"]
        for bin_ in self.bins:
            bar = "#" * max(1 if bin_.count else 0, round(bin_.count / peak * width))
            lines.append(f"{bin_.low * 1000.0:9.1f}-{bin_.high * 1000.0:9.1f} ms |{bar:<{width}} {bin_.count}")
        return "\n".join(lines) + "\n"


def latency_histogram(durations_s: list[float], failed: list[bool] | None = None,
                      bins: int = 20) -> Histogram:
    """Equal-width histogram over per-run durations, failed runs discarded."""
    if failed is None:
        failed = [False] * len(durations_s)
    kept = [d for d, bad in zip(durations_s, failed) if not bad]
    discarded = len(durations_s) - len(kept)
    if not kept:
        raise NoData("no completed runs to bin")

    low, high = min(kept), max(kept)
    if high == low:
        return Histogram((HistogramBin(low, high, len(kept)),), len(kept), discarded)

    width = (high - low) / bins
    counts = [0] * bins
    for duration in kept:
        index = min(int((duration - low) / width), bins - 1)
        counts[index] += 1
    return Histogram(
        tuple(HistogramBin(low + i * width, low + (i + 1) * width, c) for i, c in enumerate(counts)),
        len(kept),
        discarded,
    )


def runs_csv(durations_s: list[float], failed: list[bool], errors: list[str | None]) -> str:
    """Per-run CSV: one row per run with its duration and discard status."""
    lines = ["run,duration_s,discarded,error"]
    for index, (duration, bad, error) in enumerate(zip(durations_s, failed, errors)):
        reason = (error or "").replace(",", ";")
        lines.append(f"{index},{duration:.6f},{int(bad)},{reason}")
    return "\n".join(lines) + "\n"
