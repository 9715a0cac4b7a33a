"""Atomic distributed transactions over REST for choreography executions.

Every execution may open one transaction, coordinated by the choreography
initiator. Participants are enlisted piggyback on the first choreography
message they receive (no extra round trip), which yields a coordination tree:
each device sub-coordinates exactly the participants it enlisted. The commit
protocol is a cascaded two-phase commit:

* ``prepare`` waits until the participant's local execution is terminal, then
  cascades to its own enlisted participants; the answer is ``prepared`` only
  when the whole subtree prepared. A prepare that times out counts as abort.
* ``commit``/``rollback`` cascade the decision down the same tree. Rollback
  undoes the variable writes recorded under the execution token and marks the
  execution aborted; both are idempotent.
* Participants left without a decision resolve through a termination
  protocol: they poll the root coordinator's transaction status and presume
  abort when it stays unreachable. A participant that has not voted may
  always abort unilaterally.

Unreachable participants during phase two are retried and then logged as a
heuristic outcome rather than blocking the decision.

Wire surface: ``PUT /{base}/tx/{tx_token}/prepare|commit|rollback`` with body
``{"token":<tx_token>}``, plus ``GET /{base}/tx/{tx_token}/status`` for the
termination protocol. Responses use the standard two-field 200 body.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .transport import (
    RestRequest,
    RestResponse,
    Status,
    TimeoutExpired,
    TransportError,
    Verb,
    method_not_allowed,
    ok,
    send_request,
    service_unavailable,
)

log = logging.getLogger(__name__)

PHASE_ACTIVE = "active"
PHASE_PREPARING = "preparing"
PHASE_COMMITTED = "committed"
PHASE_ROLLED_BACK = "rolled_back"

ANSWER_PREPARED = "prepared"
ANSWER_ABORT = "abort"


class AlreadyOpen(Exception):
    pass


class WrongPhase(Exception):
    pass


@dataclass
class Participant:
    role: str
    endpoint: str
    phase: str = PHASE_ACTIVE  # active|prepared|abort|committed|rolled_back|unreachable


@dataclass
class TransactionContext:
    """One device's view of the transaction for a single execution token."""

    tx_token: int
    exec_token: int
    coordinator_role: str
    coordinator_endpoint: str | None = None
    is_root: bool = False
    participants: list[Participant] = field(default_factory=list)
    phase: str = PHASE_ACTIVE
    prepared_answered: bool = False
    heuristic: list[str] = field(default_factory=list)
    decided: threading.Event = field(default_factory=threading.Event, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def piggyback(self) -> dict:
        """The transaction info carried inside choreography request bodies."""
        info = {"token": self.tx_token, "root": self.coordinator_role}
        if self.coordinator_endpoint:
            info["coordinator"] = self.coordinator_endpoint
        return info

    def participant(self, role: str) -> Participant | None:
        for part in self.participants:
            if part.role == role:
                return part
        return None

    def settle(self, phase: str) -> None:
        with self._lock:
            self.phase = phase
            self.decided.set()


def begin(exec_token: int, coordinator_role: str, *, tx_token: int,
          coordinator_endpoint: str | None = None) -> TransactionContext:
    """Open a fresh root context with an empty participant list."""
    return TransactionContext(
        tx_token=tx_token,
        exec_token=exec_token,
        coordinator_role=coordinator_role,
        coordinator_endpoint=coordinator_endpoint,
        is_root=True,
    )


def enlist(ctx: TransactionContext, role: str, endpoint: str) -> TransactionContext:
    """Add a directly-contacted participant; idempotent per role."""
    with ctx._lock:
        if ctx.phase != PHASE_ACTIVE:
            raise WrongPhase(f"cannot enlist {role!r} while {ctx.phase}")
        if ctx.participant(role) is None:
            ctx.participants.append(Participant(role, endpoint))
    return ctx


def tx_request(op: str, tx_token: int, from_role: str, rewrite_base: str = "api") -> RestRequest:
    verb = Verb.GET if op == "status" else Verb.PUT
    body = json.dumps({"token": tx_token, "from": from_role}, separators=(",", ":")).encode("utf-8")
    return RestRequest(
        verb=verb,
        segments=["tx", str(tx_token), op],
        body=body,
        rewrite_base=rewrite_base,
    )


def _result_of(response: RestResponse) -> str | None:
    try:
        data = json.loads(response.body.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    return data.get("result") if isinstance(data, dict) else None


@dataclass
class TxIo:
    """Everything a transaction needs to talk to its peers."""

    role: str
    messenger: object = send_request  # callable(endpoint, request, timeout_s) -> RestResponse
    timeout_s: float = 35.0
    retry_count: int = 0
    rewrite_base: str = "api"
    trace: object | None = None  # callable(**fields) | None

    def call(self, participant: Participant, op: str, ctx: TransactionContext) -> RestResponse:
        request = tx_request(op, ctx.tx_token, self.role, self.rewrite_base)
        self._trace_event(ctx, participant, op, request.verb, "request", None)
        try:
            response = self.messenger(participant.endpoint, request, self.timeout_s)
        except (TimeoutExpired, TransportError):
            self._trace_event(ctx, participant, op, request.verb, "timeout", "unreachable")
            raise
        return response

    def _trace_event(self, ctx: TransactionContext, participant: Participant, op: str,
                     verb: Verb, direction: str, status) -> None:
        if self.trace is None:
            return
        self.trace(
            token=ctx.exec_token,
            from_role=self.role,
            to_role=participant.role,
            operation=f"tx:{op}",
            verb=verb.name,
            direction=direction,
            status=status,
            endpoint=participant.endpoint,
        )


def _prepare_all(ctx: TransactionContext, io: TxIo) -> bool:
    """Phase one, fanned out concurrently. Timeouts count as abort votes."""
    if not ctx.participants:
        return True

    def one(part: Participant) -> bool:
        try:
            response = io.call(part, "prepare", ctx)
        except (TimeoutExpired, TransportError):
            part.phase = ANSWER_ABORT
            return False
        answer = _result_of(response) if response.status is Status.OK else None
        part.phase = ANSWER_PREPARED if answer == ANSWER_PREPARED else ANSWER_ABORT
        return part.phase == ANSWER_PREPARED

    with ThreadPoolExecutor(max_workers=max(1, len(ctx.participants))) as pool:
        votes = list(pool.map(one, list(ctx.participants)))
    return all(votes)


def _phase_two(ctx: TransactionContext, op: str, io: TxIo) -> None:
    """Phase two: deliver the decision, retrying before logging heuristics."""
    outcome = PHASE_COMMITTED if op == "commit" else PHASE_ROLLED_BACK

    def one(part: Participant) -> None:
        for attempt in range(io.retry_count + 1):
            try:
                io.call(part, op, ctx)
                part.phase = outcome
                return
            except (TimeoutExpired, TransportError):
                continue
        part.phase = "unreachable"
        with ctx._lock:
            ctx.heuristic.append(part.role)
        log.warning("tx %d: participant %s unreachable during %s (heuristic outcome)",
                    ctx.tx_token, part.role, op)

    if not ctx.participants:
        return
    with ThreadPoolExecutor(max_workers=max(1, len(ctx.participants))) as pool:
        list(pool.map(one, list(ctx.participants)))


def decide(ctx: TransactionContext, outcome_hint: str, io: TxIo) -> TransactionContext:
    """Run the commit protocol to a terminal phase.

    ``outcome_hint`` is ``"try_commit"`` or ``"force_rollback"``. The forced
    path skips voting: the decision is already rollback no matter what the
    participants would answer. Once started, the fan-out runs to completion.
    """
    with ctx._lock:
        if ctx.phase != PHASE_ACTIVE:
            raise WrongPhase(f"decide on {ctx.phase} context")
        ctx.phase = PHASE_PREPARING

    if outcome_hint == "try_commit" and _prepare_all(ctx, io):
        _phase_two(ctx, "commit", io)
        ctx.settle(PHASE_COMMITTED)
    else:
        _phase_two(ctx, "rollback", io)
        ctx.settle(PHASE_ROLLED_BACK)
    return ctx


class TransactionManager:
    """Per-device registry of transaction contexts keyed by both tokens."""

    def __init__(self, role: str):
        self.role = role
        self._lock = threading.RLock()
        self._by_exec: dict[int, TransactionContext] = {}
        self._by_tx: dict[int, TransactionContext] = {}

    def begin(self, exec_token: int, tx_token: int, coordinator_endpoint: str | None) -> TransactionContext:
        with self._lock:
            existing = self._by_exec.get(exec_token)
            if existing is not None and existing.phase in (PHASE_ACTIVE, PHASE_PREPARING):
                raise AlreadyOpen(f"execution {exec_token} already has an open transaction")
            ctx = begin(exec_token, self.role, tx_token=tx_token, coordinator_endpoint=coordinator_endpoint)
            self._by_exec[exec_token] = ctx
            self._by_tx[tx_token] = ctx
            return ctx

    def join(self, exec_token: int, tx_info: dict) -> TransactionContext | None:
        """Adopt the transaction carried piggyback on a choreography message."""
        tx_token = tx_info.get("token")
        if not isinstance(tx_token, int):
            return None
        with self._lock:
            ctx = self._by_tx.get(tx_token)
            if ctx is None:
                ctx = TransactionContext(
                    tx_token=tx_token,
                    exec_token=exec_token,
                    coordinator_role=str(tx_info.get("root", "")),
                    coordinator_endpoint=tx_info.get("coordinator"),
                    is_root=False,
                )
                self._by_exec[exec_token] = ctx
                self._by_tx[tx_token] = ctx
            return ctx

    def adopt(self, ctx: TransactionContext) -> None:
        """Register a context created while processing a piggybacked message."""
        with self._lock:
            self._by_exec.setdefault(ctx.exec_token, ctx)
            self._by_tx.setdefault(ctx.tx_token, ctx)

    def by_tx(self, tx_token: int) -> TransactionContext | None:
        with self._lock:
            return self._by_tx.get(tx_token)

    def by_exec(self, exec_token: int) -> TransactionContext | None:
        with self._lock:
            return self._by_exec.get(exec_token)

    def contexts(self) -> list[TransactionContext]:
        with self._lock:
            return list(self._by_tx.values())


def poll_coordinator(ctx: TransactionContext, io: TxIo, *, interval_s: float,
                     unknown_budget: int = 8, unreachable_budget: int = 2) -> str:
    """Termination protocol: ask the root coordinator for the decision.

    Returns the learned phase, or ``rolled_back`` by presumed abort when the
    coordinator stays silent or unreachable.
    """
    if not ctx.coordinator_endpoint:
        return PHASE_ROLLED_BACK
    coordinator = Participant(ctx.coordinator_role, ctx.coordinator_endpoint)
    unknown_seen = 0
    unreachable_seen = 0
    while unknown_seen < unknown_budget and unreachable_seen < unreachable_budget:
        if ctx.decided.wait(timeout=interval_s):
            return ctx.phase
        try:
            response = io.call(coordinator, "status", ctx)
        except (TimeoutExpired, TransportError):
            unreachable_seen += 1
            continue
        answer = _result_of(response)
        if answer in (PHASE_COMMITTED, PHASE_ROLLED_BACK):
            return answer
        unknown_seen += 1
    return PHASE_ROLLED_BACK


def apply_decision(service, ctx: TransactionContext, op: str) -> str:
    """Apply commit/rollback locally, cascade it, and settle the context."""
    outcome = PHASE_COMMITTED if op == "commit" else PHASE_ROLLED_BACK
    with ctx._lock:
        if ctx.phase == outcome:
            return outcome
        already_terminal = ctx.phase in (PHASE_COMMITTED, PHASE_ROLLED_BACK)
    if already_terminal:
        # A conflicting decision should be impossible under the protocol;
        # answer what actually happened rather than pretend.
        log.error("tx %d: received %s after %s", ctx.tx_token, op, ctx.phase)
        return ctx.phase
    service.apply_tx_outcome(ctx.exec_token, outcome)
    _phase_two(ctx, op, service.tx_io())
    ctx.settle(outcome)
    return outcome


def run_prepare(service, ctx: TransactionContext) -> str:
    """Participant side of phase one, cascading through enlisted children."""
    if ctx.phase == PHASE_COMMITTED:
        return ANSWER_PREPARED
    if ctx.phase == PHASE_ROLLED_BACK:
        return ANSWER_ABORT
    status = service.wait_until_terminal(ctx.exec_token)
    if status != "completed":
        return ANSWER_ABORT
    if not _prepare_all(ctx, service.tx_io()):
        return ANSWER_ABORT
    service.freeze_execution(ctx.exec_token)
    with ctx._lock:
        ctx.prepared_answered = True
    return ANSWER_PREPARED


def start_decision_watchdog(service, ctx: TransactionContext) -> None:
    """Resolve a context that never hears a decision.

    After the decision window passes, the participant polls the root
    coordinator; if the coordinator is gone or stays silent, the presumed
    outcome is abort.
    """
    with ctx._lock:
        if ctx.is_root or getattr(ctx, "_watchdog_started", False):
            return
        ctx._watchdog_started = True

    def run() -> None:
        timeout_s = service.config.decision_timeout_s
        if ctx.decided.wait(timeout=timeout_s):
            return
        io = service.tx_io()
        interval = max(0.05, timeout_s / 4)
        outcome = poll_coordinator(ctx, io, interval_s=interval)
        if ctx.decided.is_set():
            return
        log.info("tx %d at %s: no decision heard, resolving as %s",
                 ctx.tx_token, service.role, outcome)
        apply_decision(service, ctx, "commit" if outcome == PHASE_COMMITTED else "rollback")

    threading.Thread(target=run, daemon=True, name=f"txwatch-{service.role}-{ctx.tx_token}").start()


class TxHandler:
    """Transport handler for the ``tx`` service of one device."""

    def __init__(self, service):
        self.service = service

    def initialize(self, request: RestRequest) -> bool:
        return self.service.is_started()

    def handle(self, request: RestRequest) -> RestResponse:
        if len(request.segments) < 3:
            return service_unavailable()
        try:
            tx_token = int(request.segments[1])
        except ValueError:
            return service_unavailable()
        op = request.segments[2]

        expected_verb = Verb.GET if op == "status" else Verb.PUT
        if request.verb is not expected_verb:
            return method_not_allowed()

        ctx = self.service.tx_manager.by_tx(tx_token)
        requester = str(request.json_body().get("from", "")) or "unknown"
        if ctx is None or op not in ("prepare", "commit", "rollback", "status"):
            response = service_unavailable()
        else:
            if op == "prepare":
                result = run_prepare(self.service, ctx)
            elif op == "status":
                result = ctx.phase if ctx.decided.is_set() else "unknown"
            else:
                result = apply_decision(self.service, ctx, op)
            response = ok(result, tx_token)

        self.service.trace_event(
            token=ctx.exec_token if ctx is not None else None,
            from_role=requester,
            to_role=self.service.role,
            operation=f"tx:{op}",
            verb=request.verb.name,
            direction="response",
            status=str(response.status.code),
            endpoint=self.service.endpoint,
        )
        return response
