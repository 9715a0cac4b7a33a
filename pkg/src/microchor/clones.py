"""Replacement-device (clone) registry and failover decisions.

A clone stands in for a role whose device has disappeared. Permanent clones
stay bound for the remainder of that execution once activated; on-demand
clones cover exactly one interaction attempt, after which the primary device
gets the next chance.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .model import CloneType, CloneUsage


class UnknownRole(Exception):
    pass


@dataclass(frozen=True)
class FailoverDecision:
    """Either retry the send at ``endpoint`` or escalate to the timeout path."""

    action: str  # "retry_at" | "escalate"
    endpoint: str | None = None

    @classmethod
    def retry_at(cls, endpoint: str) -> "FailoverDecision":
        return cls("retry_at", endpoint)

    @classmethod
    def escalate(cls) -> "FailoverDecision":
        return cls("escalate")


@dataclass
class CloneRegistry:
    """Per-device view of configured clones and their activation state.

    Mutations are serialized with the owning engine; the internal lock keeps
    the registry safe for the engine's concurrent sender threads.
    """

    entries: dict[str, CloneType] = field(default_factory=dict)
    _sticky: dict[tuple[str, int], str] = field(default_factory=dict)
    _attempted: dict[tuple[str, int], set[str]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def from_clone_types(cls, clones: list[CloneType] | tuple[CloneType, ...]) -> "CloneRegistry":
        registry = cls()
        for clone in clones:
            if clone.endpoint is None:
                continue
            for role in clone.role_refs:
                registry.entries[role] = clone
        return registry

    def clone_for(self, role: str) -> CloneType | None:
        return self.entries.get(role)

    def is_activated(self, role: str, token: int) -> bool:
        with self._lock:
            return (role, token) in self._sticky

    def sticky_endpoint(self, role: str, token: int) -> str | None:
        with self._lock:
            return self._sticky.get((role, token))


def resolve_endpoint(role: str, token: int, registry: CloneRegistry, endpoint_map: dict[str, str]) -> str:
    """The endpoint the next send to ``role`` should use.

    A permanent clone that has been activated for this execution stays bound;
    otherwise the primary endpoint from the deployment map wins.
    """
    primary = endpoint_map.get(role)
    if primary is None:
        raise UnknownRole(f"no endpoint configured for role {role!r}")
    sticky = registry.sticky_endpoint(role, token)
    return sticky if sticky is not None else primary


def on_send_failure(role: str, token: int, registry: CloneRegistry, failure: Exception) -> FailoverDecision:
    """Decide what to do after a send to ``role``'s current endpoint failed.

    The first failure hands the attempt to the configured clone (activating
    it sticky when permanent). Once no untried clone endpoint remains the
    decision is to escalate, which leads to the engine's timeout handling.
    """
    clone = registry.clone_for(role)
    if clone is None or clone.endpoint is None:
        return FailoverDecision.escalate()
    key = (role, token)
    with registry._lock:
        attempted = registry._attempted.setdefault(key, set())
        if clone.endpoint in attempted:
            return FailoverDecision.escalate()
        attempted.add(clone.endpoint)
        if clone.usage is CloneUsage.PERMANENT and key not in registry._sticky:
            registry._sticky[key] = clone.endpoint
    return FailoverDecision.retry_at(clone.endpoint)


def clear_attempt(role: str, token: int, registry: CloneRegistry) -> None:
    """Forget per-interaction attempts so an on-demand clone covers one try only."""
    clone = registry.clone_for(role)
    if clone is not None and clone.usage is CloneUsage.ON_DEMAND:
        with registry._lock:
            registry._attempted.pop((role, token), None)
