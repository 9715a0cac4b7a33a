"""Threaded device runtime around the engine's transition loop.

A :class:`RoleService` is the single logical owner of every execution on one
device: inbound message handling and the pump thread serialize through one
lock, so observers never see a torn cursor or store. Outbound sends from
parallel branches run on their own worker threads concurrently.

Executions are keyed by execution token; a fresh token simply starts a fresh
execution from the projection, so one device serves any number of choreography
instances back to back.
"""

from __future__ import annotations

import logging
import random
import threading
import time

from . import clones as clones_mod
from . import transactions as tx_mod
from .clones import CloneRegistry
from .engine import (
    ABORT_OPERATION,
    SUMMARY_OPERATION,
    EngineConfig,
    EngineStatus,
    Execution,
    INTERNAL_KINDS,
    Transition,
    TransitionKind,
    _notify,
    handle_message,
    perform_send,
    service_name,
    start,
)
from .transport import (
    Handler,
    RestRequest,
    RestResponse,
    send_request,
    service_unavailable,
)

log = logging.getLogger(__name__)


class RoleService:
    """One device's engine runtime, exposed as a transport handler."""

    def __init__(
        self,
        projection,
        config: EngineConfig,
        *,
        endpoint: str | None = None,
        initial_data: dict[str, str] | None = None,
        clone_registry: CloneRegistry | None = None,
        trace=None,
        messenger=send_request,
        transactional: bool = False,
        rng: random.Random | None = None,
    ):
        self.projection = projection
        self.role = projection.role
        self.config = config
        self.endpoint = endpoint
        self.initial_data = dict(initial_data or {})
        self.clone_registry = clone_registry or CloneRegistry()
        self.trace = trace
        self.messenger = messenger
        self.transactional = transactional
        self.rng = rng or random.Random()
        self.tx_manager = tx_mod.TransactionManager(self.role)

        self.lock = threading.RLock()
        self.cond = threading.Condition(self.lock)
        self.executions: dict[int, Execution] = {}
        # May be a bool or a zero-argument callable (harness fault clocks).
        self.halted = False
        self._started = False
        self._stop = threading.Event()
        self._pump = threading.Thread(target=self._pump_loop, daemon=True, name=f"pump-{self.role}")
        self._terminal_seen: set[int] = set()

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> "RoleService":
        self._started = True
        self._pump.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        with self.cond:
            self.cond.notify_all()
        self._pump.join(timeout=2.0)

    def is_started(self) -> bool:
        return self._started

    def is_halted(self) -> bool:
        halted = self.halted
        return bool(halted() if callable(halted) else halted)

    def wake(self) -> None:
        with self.cond:
            self.cond.notify_all()

    # -- execution bookkeeping -----------------------------------------------------

    def _new_execution(self, token: int | None) -> Execution:
        execution = start(
            self.projection,
            self.config,
            initial_data=self.initial_data,
            clone_registry=self.clone_registry,
            trace=self.trace,
        )
        execution.lock = self.lock  # single-owner serialization for the whole device
        execution.token = token
        return execution

    def execution_for(self, token: int) -> Execution | None:
        with self.lock:
            return self.executions.get(token)

    def start_execution(self, token: int | None = None) -> Execution:
        """Initiator entry point: create an execution and let the pump drive it."""
        with self.cond:
            if token is None:
                token = self.rng.getrandbits(63)
            execution = self._new_execution(token)
            self.executions[token] = execution
            if self.transactional and not execution.status.terminal:
                tx_token = self.rng.getrandbits(63)
                execution.tx = self.tx_manager.begin(token, tx_token, self.endpoint)
            self.cond.notify_all()
        return execution

    def _adopt_execution(self, token: int) -> Execution:
        execution = self._new_execution(token)
        self.executions[token] = execution
        return execution

    # -- transport handler interface -------------------------------------------------

    def initialize(self, request: RestRequest) -> bool:
        return self._started

    def handle(self, request: RestRequest) -> RestResponse:
        token = request.token
        if token is None:
            return service_unavailable()
        with self.cond:
            execution = self.executions.get(token)
            if execution is None:
                if request.method in (ABORT_OPERATION, SUMMARY_OPERATION):
                    # Fire-and-forget notifications never start an execution.
                    from .transport import ok

                    return ok("acknowledged", token)
                execution = self._adopt_execution(token)
            elif execution.quarantined():
                self._trace_response(request, execution, "503")
                return service_unavailable()
            elif execution.status is EngineStatus.ABORTED and execution.unusable_until is not None:
                # Quarantine expired: the token may start over from scratch.
                execution = self._adopt_execution(token)

            response, _ = handle_message(execution, request)

            if execution.tx is not None:
                known = self.tx_manager.by_tx(execution.tx.tx_token)
                if known is None:
                    self.tx_manager.adopt(execution.tx)

            self._trace_response(request, execution, str(response.status.code))
            self.cond.notify_all()
        return response

    def _trace_response(self, request: RestRequest, execution: Execution, status: str) -> None:
        if self.trace is None:
            return
        body = request.json_body()
        self.trace(
            token=request.token,
            from_role=str(body.get("from", "")) or "unknown",
            to_role=self.role,
            operation=request.method,
            verb=request.verb.name,
            direction="response",
            status=status,
            endpoint=self.endpoint,
        )

    # -- pump ---------------------------------------------------------------------

    def _pump_loop(self) -> None:
        while not self._stop.is_set():
            with self.cond:
                progressed = self._pump_once()
                if not progressed:
                    self.cond.wait(timeout=self.config.tick_ms / 1000.0)

    def _pump_once(self) -> bool:
        if self.is_halted():
            return False
        progressed = False
        for token, execution in list(self.executions.items()):
            if execution.status.terminal:
                if token not in self._terminal_seen:
                    self._terminal_seen.add(token)
                    self._spawn(self._after_terminal, execution)
                    progressed = True
                continue
            transitions = execution.next_transitions()
            for transition in transitions:
                if transition.kind in INTERNAL_KINDS:
                    execution.fire_internal(transition)
                    progressed = True
            if any(t.kind in INTERNAL_KINDS for t in transitions):
                continue  # re-enumerate next round with fresh frontier
            for transition in transitions:
                if transition.kind is TransitionKind.SEND:
                    execution._in_flight.add(transition.position)
                    self._spawn(self._send_worker, execution, transition)
                    progressed = True
        return progressed

    def _spawn(self, target, *args) -> None:
        threading.Thread(target=target, args=args, daemon=True).start()

    def _send_worker(self, execution: Execution, transition: Transition) -> None:
        with self.lock:
            if self.is_halted() or execution.status.terminal:
                execution._in_flight.discard(transition.position)
                return
        try:
            perform_send(execution, transition, self.messenger)
        except Exception:
            log.exception("send worker for %s failed", transition.name)
        self.wake()

    # -- terminal hooks --------------------------------------------------------------

    def _after_terminal(self, execution: Execution) -> None:
        ctx = execution.tx
        if ctx is not None:
            if ctx.is_root and not ctx.decided.is_set():
                hint = "try_commit" if execution.status is EngineStatus.COMPLETED else "force_rollback"
                try:
                    tx_mod.decide(ctx, hint, self.tx_io())
                except tx_mod.WrongPhase:
                    pass
                else:
                    self.apply_tx_outcome(ctx.exec_token, ctx.phase)
            elif not ctx.is_root and not ctx.decided.is_set():
                tx_mod.start_decision_watchdog(self, ctx)

        if execution.status is EngineStatus.COMPLETED:
            self._notify_reconnects(execution)
        self.wake()

    def _notify_reconnects(self, execution: Execution) -> None:
        """Tell originals whose clones answered that the execution finished."""
        token = execution.token
        if token is None:
            return
        for role in list(self.clone_registry.entries):
            sticky = self.clone_registry.sticky_endpoint(role, token)
            if sticky is None:
                continue
            primary = self.config.endpoints.get(role)
            if primary is None or primary == sticky:
                continue
            summary = f"completed via {sticky}"
            _notify(execution, role, primary, SUMMARY_OPERATION, summary, self.messenger)

    # -- transaction support interface (used by transactions.TxHandler) ---------------

    def tx_io(self) -> tx_mod.TxIo:
        return tx_mod.TxIo(
            role=self.role,
            messenger=self.messenger,
            timeout_s=self.config.tx_timeout(),
            retry_count=self.config.retry_count,
            rewrite_base=self.config.rewrite_base,
            trace=self.trace,
        )

    def trace_event(self, **fields) -> None:
        if self.trace is not None:
            self.trace(**fields)

    def wait_until_terminal(self, exec_token: int) -> str:
        """Block until the execution settles, bounded by the prepare window."""
        cap = self.config.tx_timeout() * 0.9
        deadline = time.monotonic() + cap
        with self.cond:
            while True:
                execution = self.executions.get(exec_token)
                if execution is not None and execution.status.terminal:
                    return execution.status.value
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return execution.status.value if execution is not None else "unknown"
                self.cond.wait(timeout=min(remaining, 0.1))

    def freeze_execution(self, exec_token: int) -> None:
        with self.lock:
            execution = self.executions.get(exec_token)
            if execution is not None:
                execution.frozen = True

    def apply_tx_outcome(self, exec_token: int, outcome: str) -> None:
        with self.cond:
            execution = self.executions.get(exec_token)
            if execution is None:
                return
            if outcome == tx_mod.PHASE_ROLLED_BACK:
                execution.undo_writes()
                if execution.status is not EngineStatus.ABORTED:
                    execution.status = EngineStatus.ABORTED
                    execution._emit_lifecycle("abort")
            else:
                execution.release_writes()
            self.cond.notify_all()

    # -- introspection for harness/tests -------------------------------------------

    def snapshot(self, token: int) -> dict:
        with self.lock:
            execution = self.executions.get(token)
            if execution is None:
                return {"status": None, "tx_phase": None}
            return {
                "status": execution.status.value,
                "tx_phase": execution.tx.phase if execution.tx is not None else None,
                "store": dict(execution.store),
            }

    def quiescent_for(self, token: int) -> bool:
        """True when this device has nothing pending for the given execution."""
        with self.lock:
            execution = self.executions.get(token)
            if execution is None:
                return True
            if not execution.status.terminal:
                return False
            if execution._in_flight:
                return False
            ctx = execution.tx
            if ctx is not None and not ctx.decided.is_set():
                return False
            return True


def build_device_registry(service: RoleService) -> dict[str, Handler]:
    """The transport registry for one device: its role service plus tx endpoints."""
    return {
        service_name(service.role): service,
        "tx": tx_mod.TxHandler(service),
    }
