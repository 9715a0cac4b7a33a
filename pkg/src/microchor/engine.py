"""Per-device transition loop over a role projection.

The cycle for one device is always the same: check for transaction work,
determine which transitions are enabled, perform them, and assign the
resulting state. Receives advance when a matching message arrives; sends are
fired by the device itself once their payload variables are available, with
timeout, retry and clone failover applied on the way out.

One engine execution exists per execution token. A token whose execution hits
a send timeout is marked unusable for a quarantine window: any message that
tries to continue it is rejected with 503 until the window passes.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from . import clones as clones_mod
from . import transactions as tx_mod
from .model import (
    Activity,
    CdlExpression,
    GetVariable,
    Interaction,
    IsVariableAvailable,
    Parallel,
    Perform,
    Sequence,
    WorkUnit,
)
from .projection import RoleProjection
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

ABORT_OPERATION = "abortExecution"
SUMMARY_OPERATION = "executionSummary"


class InvalidProjection(Exception):
    pass


class UnboundVariable(Exception):
    pass


class EngineStatus(Enum):
    IDLE = "idle"
    ACTIVE = "active"
    COMPLETED = "completed"
    ABORTED = "aborted"

    @property
    def terminal(self) -> bool:
        return self in (EngineStatus.COMPLETED, EngineStatus.ABORTED)


class TransitionKind(Enum):
    SEND = "send"
    RECEIVE = "receive"
    GUARD_WAIT = "guard_wait"
    PERFORM_ENTER = "perform_enter"
    PERFORM_EXIT = "perform_exit"
    COMPLETE = "complete"


INTERNAL_KINDS = (TransitionKind.PERFORM_ENTER, TransitionKind.PERFORM_EXIT, TransitionKind.COMPLETE)


@dataclass(frozen=True)
class Transition:
    kind: TransitionKind
    position: tuple[int, ...]
    name: str
    operation: str | None = None


@dataclass
class EngineConfig:
    """Runtime knobs for one device; all loadable from a scenario file."""

    default_timeout_s: float = 35.0
    quarantine_s: float = 60.0
    retry_count: int = 0
    tick_ms: int = 500
    # When set, every send uses this timeout instead of the document value;
    # scenarios use it to scale the 35 s document timeouts down for tests.
    timeout_override_s: float | None = None
    # How long an enlisted participant waits for a transaction decision
    # before falling back to the termination protocol.
    decision_timeout_s: float = 60.0
    # Timeout for prepare/commit/rollback calls; a prepare that runs out
    # counts as an abort vote. Defaults to the engine timeout.
    prepare_timeout_s: float | None = None
    endpoints: dict[str, str] = field(default_factory=dict)
    rewrite_base: str = "api"

    def timeout_for(self, interaction: Interaction) -> float:
        if self.timeout_override_s is not None:
            return self.timeout_override_s
        if interaction.timeout is not None:
            return float(interaction.timeout.seconds)
        return self.default_timeout_s

    def tx_timeout(self) -> float:
        if self.prepare_timeout_s is not None:
            return self.prepare_timeout_s
        if self.timeout_override_s is not None:
            return self.timeout_override_s
        return self.default_timeout_s


def service_name(role: str) -> str:
    """Path segment a role's service is registered under (``BalizaRole`` -> ``baliza``)."""
    base = role[:-4] if role.endswith("Role") else role
    return base.lower()


@dataclass
class _Node:
    path: tuple[int, ...]
    kind: str  # sequence|parallel|workunit|interaction|perform
    children: list["_Node"] = field(default_factory=list)
    interaction: Interaction | None = None
    guard: CdlExpression | None = None
    name: str = ""


def _compile(activity: Activity, path: tuple[int, ...], projection: RoleProjection,
             stack: tuple[str, ...]) -> _Node:
    if isinstance(activity, Interaction):
        return _Node(path, "interaction", interaction=activity, name=activity.name)
    if isinstance(activity, Sequence):
        node = _Node(path, "sequence")
        node.children = [_compile(c, path + (i,), projection, stack) for i, c in enumerate(activity.children)]
        return node
    if isinstance(activity, Parallel):
        node = _Node(path, "parallel")
        node.children = [_compile(c, path + (i,), projection, stack) for i, c in enumerate(activity.children)]
        return node
    if isinstance(activity, WorkUnit):
        node = _Node(path, "workunit", guard=activity.guard, name=activity.name)
        node.children = [_compile(activity.body, path + (0,), projection, stack)]
        return node
    if isinstance(activity, Perform):
        target = projection.package.choreography(activity.choreography_name)
        if target is None:
            raise InvalidProjection(f"perform targets missing choreography {activity.choreography_name!r}")
        if activity.choreography_name in stack:
            raise InvalidProjection(f"perform cycle through {activity.choreography_name!r}")
        node = _Node(path, "perform", name=activity.choreography_name)
        node.children = [
            _compile(target.body, path + (0,), projection, stack + (activity.choreography_name,))
        ]
        return node
    raise InvalidProjection(f"unsupported activity node {activity!r}")


def _compile_projection(projection: RoleProjection) -> list[_Node]:
    """Build the live-at-start program trees.

    The root choreography starts immediately. Choreographies that no kept
    perform references have no caller on this device, so they start alongside
    it (their guards or pending receives keep them quiet until triggered).
    """
    performed: set[str] = set()
    for chor in projection.package.choreographies:
        for node in _walk_model(chor.body):
            if isinstance(node, Perform):
                performed.add(node.choreography_name)

    trees: list[_Node] = []
    for index, chor in enumerate(projection.package.choreographies):
        if chor.root or chor.name not in performed:
            trees.append(_compile(chor.body, (index,), projection, (chor.name,)))
    return trees


def _walk_model(activity: Activity):
    yield activity
    if isinstance(activity, (Sequence, Parallel)):
        for child in activity.children:
            yield from _walk_model(child)
    elif isinstance(activity, WorkUnit):
        yield from _walk_model(activity.body)


class Execution:
    """Live state of one choreography execution at one device."""

    def __init__(self, projection: RoleProjection, config: EngineConfig, *,
                 initial_data: dict[str, str] | None = None,
                 clone_registry: clones_mod.CloneRegistry | None = None,
                 trace=None):
        self.role = projection.role
        self.projection = projection
        self.config = config
        self.clone_registry = clone_registry or clones_mod.CloneRegistry()
        self.trace = trace
        self.lock = threading.RLock()
        self.token: int | None = None
        self.store: dict[str, str] = dict(initial_data or {})
        self.write_log: list[tuple[str, bool, str | None]] = []
        self.tx: tx_mod.TransactionContext | None = None
        self.frozen = False
        self.unusable_until: float | None = None
        self.contacted: dict[str, str] = {}  # role -> endpoint successfully reached
        self._trees = _compile_projection(projection)
        self._nodes: dict[tuple[int, ...], _Node] = {}
        for tree in self._trees:
            self._index(tree)
        self._done: set[tuple[int, ...]] = set()
        self._entered: set[tuple[int, ...]] = set()
        self._exited: set[tuple[int, ...]] = set()
        self._in_flight: set[tuple[int, ...]] = set()
        self._response_cache: dict[str, bytes] = {}
        self.status = EngineStatus.COMPLETED if not self._trees else EngineStatus.IDLE

    def _index(self, node: _Node) -> None:
        self._nodes[node.path] = node
        for child in node.children:
            self._index(child)

    # -- completion bookkeeping ------------------------------------------------

    def _is_done(self, node: _Node) -> bool:
        if node.kind == "interaction":
            return node.path in self._done
        if node.kind == "perform":
            return node.path in self._exited
        return all(self._is_done(child) for child in node.children)

    def node_at(self, position: tuple[int, ...]) -> _Node:
        return self._nodes[position]

    @property
    def cursors(self) -> frozenset[tuple[int, ...]]:
        if self.status.terminal:
            return frozenset()
        return frozenset(t.position for t in self.next_transitions())

    # -- transition enumeration -------------------------------------------------

    def next_transitions(self) -> set[Transition]:
        if self.status.terminal:
            return set()
        out: set[Transition] = set()
        for tree in self._trees:
            out.update(self._frontier(tree))
        if not out and all(self._is_done(tree) for tree in self._trees):
            out.add(Transition(TransitionKind.COMPLETE, (), "complete"))
        return out

    def _frontier(self, node: _Node) -> list[Transition]:
        if self._is_done(node):
            return []
        if node.kind == "sequence":
            for child in node.children:
                if not self._is_done(child):
                    return self._frontier(child)
            return []
        if node.kind == "parallel":
            out: list[Transition] = []
            for child in node.children:
                if not self._is_done(child):
                    out.extend(self._frontier(child))
            return out
        if node.kind == "workunit":
            if node.guard is not None and not self._guard_holds(node.guard):
                return [Transition(TransitionKind.GUARD_WAIT, node.path, node.name)]
            return self._frontier(node.children[0])
        if node.kind == "perform":
            if node.path not in self._entered:
                return [Transition(TransitionKind.PERFORM_ENTER, node.path, node.name)]
            if self._is_done(node.children[0]):
                return [Transition(TransitionKind.PERFORM_EXIT, node.path, node.name)]
            return self._frontier(node.children[0])
        inter = node.interaction
        if inter.from_role == self.role:
            if node.path in self._in_flight or not self._send_ready(inter):
                return []
            return [Transition(TransitionKind.SEND, node.path, inter.name, inter.operation)]
        return [Transition(TransitionKind.RECEIVE, node.path, inter.name, inter.operation)]

    def _send_ready(self, interaction: Interaction) -> bool:
        for exch in interaction.exchanges:
            if exch.send_expr.role == self.role and exch.send_expr.variable not in self.store:
                return False
        return True

    def _guard_holds(self, guard: CdlExpression) -> bool:
        if isinstance(guard, IsVariableAvailable):
            return guard.variable in self.store
        return bool(self.store.get(guard.variable))

    # -- store ------------------------------------------------------------------

    def write(self, variable: str, value: str) -> None:
        if self.frozen:
            return
        had = variable in self.store
        self.write_log.append((variable, had, self.store.get(variable)))
        self.store[variable] = value

    def undo_writes(self) -> None:
        for variable, had, old in reversed(self.write_log):
            if had:
                self.store[variable] = old
            else:
                self.store.pop(variable, None)
        self.write_log.clear()

    def release_writes(self) -> None:
        self.write_log.clear()

    # -- internal transitions ----------------------------------------------------

    def advance_internal(self) -> None:
        """Eagerly pass through perform frames and completion.

        Sends and receives are never fired here; this only keeps the frontier
        honest so inbound matching does not depend on pump timing.
        """
        for _ in range(10_000):
            internal = [t for t in self.next_transitions() if t.kind in INTERNAL_KINDS]
            if not internal:
                return
            for transition in internal:
                self.fire_internal(transition)

    def fire_internal(self, transition: Transition) -> None:
        if transition.kind is TransitionKind.PERFORM_ENTER:
            self._entered.add(transition.position)
            self.status = EngineStatus.ACTIVE
        elif transition.kind is TransitionKind.PERFORM_EXIT:
            self._exited.add(transition.position)
        elif transition.kind is TransitionKind.COMPLETE:
            self.status = EngineStatus.COMPLETED
            self._emit_lifecycle("complete")
        else:
            raise ValueError(f"{transition.kind} is not an internal transition")

    def _emit_lifecycle(self, direction: str) -> None:
        if self.trace is None:
            return
        self.trace(
            token=self.token,
            from_role=self.role,
            to_role=self.role,
            operation="",
            verb="",
            direction=direction,
            status=self.status.value,
            endpoint=None,
        )

    # -- inbound ------------------------------------------------------------------

    def quarantined(self, now: float | None = None) -> bool:
        if self.status is not EngineStatus.ABORTED or self.unusable_until is None:
            return False
        return (now if now is not None else time.monotonic()) < self.unusable_until

    def _receive_target(self, operation: str) -> _Node | None:
        for transition in self.next_transitions():
            if transition.kind is TransitionKind.RECEIVE and transition.operation == operation:
                return self._nodes[transition.position]
        return None

    def apply_receive(self, node: _Node, value: str | None) -> str:
        """Store the payload, mark the interaction done, return the result string."""
        inter = node.interaction
        for exch in inter.exchanges:
            if exch.action.value == "request" and exch.receive_expr.role == self.role and value is not None:
                self.write(exch.receive_expr.variable, value)
        self._done.add(node.path)
        self.status = EngineStatus.ACTIVE
        result = f"{inter.operation} processed by {self.role}"
        for exch in inter.exchanges:
            if exch.action.value == "respond" and exch.send_expr.role == self.role:
                reply = self.store.get(exch.send_expr.variable)
                if reply is not None:
                    result = reply
        return result

    def mark_send_done(self, node: _Node, response_body: bytes) -> None:
        self._done.add(node.path)
        self._in_flight.discard(node.path)
        self.status = EngineStatus.ACTIVE
        inter = node.interaction
        respond_exchanges = [e for e in inter.exchanges if e.action.value == "respond"]
        if respond_exchanges:
            try:
                result = json.loads(response_body.decode("utf-8")).get("result")
            except (json.JSONDecodeError, UnicodeDecodeError, AttributeError):
                result = None
            if isinstance(result, str):
                for exch in respond_exchanges:
                    if exch.receive_expr.role == self.role:
                        self.write(exch.receive_expr.variable, result)


def start(projection: RoleProjection, config: EngineConfig | None = None, *,
          initial_data: dict[str, str] | None = None,
          clone_registry: clones_mod.CloneRegistry | None = None,
          trace=None) -> Execution:
    """Create the idle state for a projection; empty projections complete at once."""
    return Execution(
        projection,
        config or EngineConfig(),
        initial_data=initial_data,
        clone_registry=clone_registry,
        trace=trace,
    )


def next_transitions(state: Execution) -> set[Transition]:
    with state.lock:
        return state.next_transitions()


def evaluate_guard(expr: CdlExpression, state: Execution):
    """isVariableAvailable -> bool; getVariable -> the stored payload."""
    with state.lock:
        if isinstance(expr, IsVariableAvailable):
            return expr.variable in state.store
        if isinstance(expr, GetVariable):
            if expr.variable not in state.store:
                raise UnboundVariable(f"variable {expr.variable!r} is not bound at {state.role}")
            return state.store[expr.variable]
    raise TypeError(f"unsupported expression {expr!r}")


def ensure_token(state: Execution, rng: random.Random | None = None) -> int:
    """Initiators draw a random 64-bit token once; everyone else adopts."""
    with state.lock:
        if state.token is None:
            state.token = (rng or random).getrandbits(63)
        return state.token


def _request_body(state: Execution, value: str | None) -> bytes:
    payload: dict = {"token": state.token, "from": state.role}
    if state.tx is not None:
        payload["tx"] = state.tx.piggyback()
    if value is not None:
        payload["data"] = value
    return json.dumps(payload, separators=(",", ":")).encode("utf-8")


def _trace(state: Execution, *, to_role: str, operation: str, verb: str,
           direction: str, status: str | None, endpoint: str | None) -> None:
    if state.trace is None:
        return
    state.trace(
        token=state.token,
        from_role=state.role,
        to_role=to_role,
        operation=operation,
        verb=verb,
        direction=direction,
        status=status,
        endpoint=endpoint,
    )


def perform_send(state: Execution, transition: Transition, messenger=send_request) -> Execution:
    """Send one interaction request, with retries, clone failover and timeout.

    The messenger is ``callable(endpoint, request, timeout_s) -> RestResponse``
    raising TimeoutExpired/TransportError; tests inject fakes.
    """
    node = state.node_at(transition.position)
    inter = node.interaction
    config = state.config
    with state.lock:
        if state.status.terminal or node.path in state._done:
            return state
        state.status = EngineStatus.ACTIVE
        ensure_token(state)
        state._in_flight.add(node.path)
        value = None
        for exch in inter.exchanges:
            if exch.action.value == "request" and exch.send_expr.role == state.role:
                value = state.store.get(exch.send_expr.variable)
        body = _request_body(state, value)
        token = state.token

    request = RestRequest(
        verb=Verb.POST,
        segments=[service_name(inter.to_role), inter.operation],
        body=body,
        rewrite_base=config.rewrite_base,
    )
    timeout_s = config.timeout_for(inter)
    try:
        endpoint = clones_mod.resolve_endpoint(inter.to_role, token, state.clone_registry,
                                               config.endpoints)
    except clones_mod.UnknownRole as exc:
        # No deployment address at all: same terminal path as an unreachable peer.
        log.warning("%s: %s", state.role, exc)
        _trace(state, to_role=inter.to_role, operation=inter.operation, verb="POST",
               direction="timeout", status="unreachable", endpoint=None)
        with state.lock:
            state._in_flight.discard(node.path)
        return on_timeout(state, inter, config, messenger=messenger)
    retries_left = config.retry_count

    while True:
        _trace(state, to_role=inter.to_role, operation=inter.operation, verb="POST",
               direction="request", status=None, endpoint=endpoint)
        failure: Exception
        try:
            if timeout_s <= 0:
                raise TimeoutExpired("no time budget for this interaction")
            response = messenger(endpoint, request, timeout_s)
        except TimeoutExpired as exc:
            failure = exc
            _trace(state, to_role=inter.to_role, operation=inter.operation, verb="POST",
                   direction="timeout", status="timeout", endpoint=endpoint)
        except TransportError as exc:
            failure = exc
            _trace(state, to_role=inter.to_role, operation=inter.operation, verb="POST",
                   direction="timeout", status="unreachable", endpoint=endpoint)
            if retries_left > 0:
                retries_left -= 1
                continue
        else:
            if response.status.code == 200:
                with state.lock:
                    if state.status.terminal:
                        # A parallel branch already aborted this execution;
                        # leave the settled state untouched.
                        state._in_flight.discard(node.path)
                        return state
                    state.mark_send_done(node, response.body)
                    state.contacted[inter.to_role] = endpoint
                    if state.tx is not None:
                        try:
                            tx_mod.enlist(state.tx, inter.to_role, endpoint)
                        except tx_mod.WrongPhase:
                            pass
                clones_mod.clear_attempt(inter.to_role, token, state.clone_registry)
                return state
            failure = TransportError(f"{inter.operation} answered {response.status.line}")
            _trace(state, to_role=inter.to_role, operation=inter.operation, verb="POST",
                   direction="timeout", status=str(response.status.code), endpoint=endpoint)

        decision = clones_mod.on_send_failure(inter.to_role, token, state.clone_registry, failure)
        if decision.action == "retry_at":
            endpoint = decision.endpoint
            retries_left = config.retry_count
            continue
        clones_mod.clear_attempt(inter.to_role, token, state.clone_registry)
        with state.lock:
            state._in_flight.discard(node.path)
        return on_timeout(state, inter, config, messenger=messenger)


def fire(state: Execution, transition: Transition, messenger=send_request) -> Execution:
    """Perform one enabled transition and update the state."""
    if transition.kind in INTERNAL_KINDS:
        with state.lock:
            state.fire_internal(transition)
        return state
    if transition.kind is TransitionKind.SEND:
        return perform_send(state, transition, messenger)
    raise ValueError(f"{transition.kind} transitions are driven by inbound messages")


def on_timeout(state: Execution, interaction: Interaction, config: EngineConfig, *,
               messenger=send_request) -> Execution:
    """A send ran out of options: quarantine the execution and clean up.

    The execution becomes unusable for ``config.quarantine_s``; any open
    transaction is rolled back through its enlisted participants, and
    already-contacted participants get a best-effort abort notification.
    """
    with state.lock:
        if state.status is EngineStatus.ABORTED:
            # Already aborted (e.g. a rollback raced this timeout); the
            # timeout still opens the unusable window for the token.
            if state.unusable_until is None:
                state.unusable_until = time.monotonic() + config.quarantine_s
            return state
        state.status = EngineStatus.ABORTED
        state.unusable_until = time.monotonic() + config.quarantine_s
        ctx = state.tx
        contacted = dict(state.contacted)
        state._emit_lifecycle("abort")

    if ctx is not None and messenger is not None:
        try:
            tx_mod.decide(ctx, "force_rollback", _tx_io_for(state, messenger))
        except tx_mod.WrongPhase:
            pass
        with state.lock:
            state.undo_writes()

    if messenger is not None:
        for role, endpoint in contacted.items():
            _notify(state, role, endpoint, ABORT_OPERATION, None, messenger)
    return state


def _tx_io_for(state: Execution, messenger) -> tx_mod.TxIo:
    config = state.config
    return tx_mod.TxIo(
        role=state.role,
        messenger=messenger,
        timeout_s=config.tx_timeout(),
        retry_count=config.retry_count,
        rewrite_base=config.rewrite_base,
        trace=state.trace,
    )


def _notify(state: Execution, role: str, endpoint: str, operation: str, value: str | None,
            messenger) -> None:
    request = RestRequest(
        verb=Verb.POST,
        segments=[service_name(role), operation],
        body=_request_body(state, value),
        rewrite_base=state.config.rewrite_base,
    )
    _trace(state, to_role=role, operation=operation, verb="POST",
           direction="request", status=None, endpoint=endpoint)
    try:
        messenger(endpoint, request, state.config.timeout_override_s or state.config.default_timeout_s)
    except (TimeoutExpired, TransportError) as exc:
        _trace(state, to_role=role, operation=operation, verb="POST",
               direction="timeout", status="unreachable", endpoint=endpoint)
        log.info("best-effort %s to %s (%s) undeliverable: %s", operation, role, endpoint, exc)


def handle_message(state: Execution, request: RestRequest) -> tuple[RestResponse, Execution]:
    """Process one inbound request against a single execution's state.

    Duplicate deliveries replay the cached 200 response without advancing
    anything; a quarantined execution answers 503 and stays unchanged.
    """
    operation = request.method
    if request.verb is not Verb.POST:
        return method_not_allowed(), state

    with state.lock:
        if state.quarantined():
            return service_unavailable(), state

        token = request.token
        if state.token is None and token is not None:
            state.token = token
        if token is not None and state.token is not None and token != state.token:
            return service_unavailable(), state

        cached = state._response_cache.get(operation)
        if cached is not None:
            return RestResponse(Status.OK, cached), state

        if operation == ABORT_OPERATION:
            if not state.status.terminal:
                state.status = EngineStatus.ABORTED
                state._emit_lifecycle("abort")
            return ok("acknowledged", state.token or 0), state
        if operation == SUMMARY_OPERATION:
            return ok("acknowledged", state.token or 0), state

        state.advance_internal()
        node = state._receive_target(operation)
        if node is None:
            return service_unavailable(), state

        tx_info = request.json_body().get("tx")
        if isinstance(tx_info, dict) and state.tx is None:
            token_value = tx_info.get("token")
            if isinstance(token_value, int):
                state.tx = tx_mod.TransactionContext(
                    tx_token=token_value,
                    exec_token=state.token or 0,
                    coordinator_role=str(tx_info.get("root", "")),
                    coordinator_endpoint=tx_info.get("coordinator"),
                    is_root=False,
                )

        value = request.json_body().get("data")
        result = state.apply_receive(node, value if isinstance(value, str) else None)
        response = ok(result, state.token or 0)
        state._response_cache[operation] = response.body
        state.advance_internal()
        return response, state


def run_to_quiescence(state: Execution, messenger=send_request, max_steps: int = 10_000) -> Execution:
    """Drive the loop synchronously until no transition can fire.

    Sends run sequentially here; the threaded service runtime is what gives
    parallel branches real concurrency. Intended for tests and single-shot
    tools.
    """
    for _ in range(max_steps):
        transitions = next_transitions(state)
        internal = [t for t in transitions if t.kind in INTERNAL_KINDS]
        if internal:
            fire(state, internal[0], messenger)
            continue
        sends = sorted(
            (t for t in transitions if t.kind is TransitionKind.SEND),
            key=lambda t: t.position,
        )
        if not sends:
            return state
        fire(state, sends[0], messenger)
        if state.status.terminal:
            return state
    raise RuntimeError("transition loop did not quiesce")
