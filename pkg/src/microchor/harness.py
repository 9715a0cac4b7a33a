"""Multi-device simulator: one engine+transport per role on loopback ports.

A scenario file names the package, maps every role to a device (endpoint,
faults, artificial latency, seed data), optionally adds clone devices, and
fixes the engine knobs. Each repetition draws a fresh execution token,
triggers the initiator, and waits until every live device has settled; the
shared trace collector and the per-run records feed the diagram and
histogram renderers.

Faults model misbehaving devices: ``disappear`` resets connections and
freezes the device's own loop (from a relative time or after a named
operation, optionally for a bounded duration), ``never_respond`` swallows
requests so callers run into their timeouts, and ``drop_every_nth`` loses
every n-th inbound request.
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from .clones import CloneRegistry
from .engine import EngineConfig, service_name
from .model import ChoreographyPackage, CloneType, CloneUsage, Diagnostic, iter_interactions
from .parser import parse_package, serialize_package
from .projection import RoleProjection, project
from .render import latency_histogram, render_sequence_diagram, runs_csv
from .runtime import RoleService, build_device_registry
from .trace import TraceCollector, TraceEvent, pair_requests, write_trace
from .transport import DropConnection, HoldConnection, RestServer, parse_request
from . import model

log = logging.getLogger(__name__)

COMMITTED = "committed"
ROLLED_BACK = "rolled_back"


class ScenarioInvalid(Exception):
    def __init__(self, message: str, diagnostics: list[Diagnostic] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class FaultSpec:
    kind: str  # disappear | never_respond | drop_every_nth
    from_time_s: float = 0.0
    from_event: str | None = None  # operation name that triggers the fault
    duration_s: float | None = None  # None: lasts for the rest of the run
    n: int = 0  # for drop_every_nth

    def __post_init__(self):
        if self.kind not in ("disappear", "never_respond", "drop_every_nth"):
            raise ScenarioInvalid(f"unknown fault kind {self.kind!r}")
        if self.duration_s is not None and self.duration_s < 0:
            raise ScenarioInvalid("fault duration must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "FaultSpec":
        return cls(
            kind=data.get("kind", ""),
            from_time_s=float(data.get("from_time_s", 0.0)),
            from_event=data.get("from_event"),
            duration_s=None if data.get("duration_s") is None else float(data["duration_s"]),
            n=int(data.get("n", 0)),
        )


@dataclass(frozen=True)
class DeviceSpec:
    role: str
    endpoint: str = "127.0.0.1:0"
    faults: tuple[FaultSpec, ...] = ()
    latency_ms: float | tuple[float, float] | None = None
    data: dict[str, str] = field(default_factory=dict)
    resource_budget: int | None = None

    @classmethod
    def from_dict(cls, role: str, data: dict) -> "DeviceSpec":
        latency = data.get("latency_ms")
        if isinstance(latency, (list, tuple)):
            latency = (float(latency[0]), float(latency[1]))
        elif latency is not None:
            latency = float(latency)
        return cls(
            role=role,
            endpoint=data.get("endpoint", "127.0.0.1:0"),
            faults=tuple(FaultSpec.from_dict(f) for f in data.get("faults", [])),
            latency_ms=latency,
            data=dict(data.get("data", {})),
            resource_budget=data.get("resource_budget"),
        )


@dataclass(frozen=True)
class CloneSpec:
    name: str
    role: str
    usage: CloneUsage = CloneUsage.PERMANENT
    endpoint: str = "127.0.0.1:0"

    @classmethod
    def from_dict(cls, name: str, data: dict) -> "CloneSpec":
        usage_raw = data.get("type", "permanent")
        try:
            usage = CloneUsage(usage_raw)
        except ValueError:
            raise ScenarioInvalid(f"clone {name!r} has unknown type {usage_raw!r}") from None
        return cls(name=name, role=data["role"], usage=usage,
                   endpoint=data.get("endpoint", "127.0.0.1:0"))


@dataclass
class Scenario:
    package_path: Path
    devices: dict[str, DeviceSpec]
    clones: dict[str, CloneSpec] = field(default_factory=dict)
    transactional: bool = True
    repetitions: int = 1
    seed: int = 0
    global_deadline_s: float = 30.0
    engine: dict = field(default_factory=dict)
    fault_plan: dict | None = None  # {"kind": "random_single_disappear", "window_s": W}
    latency_preset: str | None = None

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "Scenario":
        base = base_dir or Path.cwd()
        package_path = Path(data["package"])
        if not package_path.is_absolute():
            package_path = base / package_path
        devices = {
            role: DeviceSpec.from_dict(role, spec)
            for role, spec in data.get("devices", {}).items()
        }
        clones = {
            name: CloneSpec.from_dict(name, spec)
            for name, spec in data.get("clones", {}).items()
        }
        return cls(
            package_path=package_path,
            devices=devices,
            clones=clones,
            transactional=bool(data.get("transactional", True)),
            repetitions=int(data.get("repetitions", 1)),
            seed=int(data.get("seed", 0)),
            global_deadline_s=float(data.get("global_deadline_s", 30.0)),
            engine=dict(data.get("engine", {})),
            fault_plan=data.get("fault_plan"),
            latency_preset=data.get("latency_preset"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioInvalid(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def engine_config(self, endpoints: dict[str, str]) -> EngineConfig:
        known = {f.name for f in EngineConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(self.engine) - known
        if unknown:
            raise ScenarioInvalid(f"unknown engine settings: {sorted(unknown)}")
        return EngineConfig(endpoints=endpoints, **self.engine)


@dataclass
class _ArmedFault:
    spec: FaultSpec
    triggered_at: float | None = None  # set for event-triggered faults


class SimulatedDevice:
    """One role (or clone) instance: service, server, fault and latency state."""

    def __init__(self, label: str, spec: DeviceSpec, projection: RoleProjection,
                 service: RoleService, rng: random.Random, rewrite_base: str):
        self.label = label
        self.spec = spec
        self.projection = projection
        self.service = service
        self.rng = rng
        self.rewrite_base = rewrite_base
        self.rep_start = time.monotonic()
        self._armed: list[_ArmedFault] = []
        self._request_count = 0
        registry = build_device_registry(service)
        self.server = RestServer(spec.endpoint, registry, rewrite_base=rewrite_base,
                                 connection_filter=self._connection_filter)
        self.endpoint = self.server.endpoint
        service.endpoint = self.endpoint
        service.halted = self.is_disappeared

    def start(self) -> None:
        self.server.start()
        self.service.start()

    def stop(self) -> None:
        self.service.stop()
        self.server.stop()

    def arm(self, rep_start: float, extra_faults: tuple[FaultSpec, ...] = ()) -> None:
        self.rep_start = rep_start
        self._armed = [_ArmedFault(spec) for spec in (*self.spec.faults, *extra_faults)]
        self._request_count = 0
        self.service.wake()

    def _fault_active(self, armed: _ArmedFault, now: float) -> bool:
        spec = armed.spec
        if spec.from_event is not None:
            if armed.triggered_at is None:
                return False
            started_at = armed.triggered_at
        else:
            started_at = self.rep_start + spec.from_time_s
            if now < started_at:
                return False
        if spec.duration_s is None:
            return True
        return now < started_at + spec.duration_s

    def is_disappeared(self, now: float | None = None) -> bool:
        now = time.monotonic() if now is None else now
        return any(a.spec.kind == "disappear" and self._fault_active(a, now) for a in self._armed)

    def _connection_filter(self, raw: bytes) -> None:
        now = time.monotonic()
        self._request_count += 1
        count = self._request_count

        for armed in self._armed:
            kind = armed.spec.kind
            if kind == "disappear" and self._fault_active(armed, now):
                raise DropConnection()
            if kind == "never_respond" and self._fault_active(armed, now):
                raise HoldConnection()
            if kind == "drop_every_nth" and armed.spec.n > 0 and count % armed.spec.n == 0:
                raise DropConnection()

        # The request that carries the triggering operation is still served;
        # the fault takes hold afterwards.
        request = parse_request(raw, self.rewrite_base)
        if request is not None:
            for armed in self._armed:
                if armed.spec.from_event is not None and armed.triggered_at is None \
                        and request.method == armed.spec.from_event:
                    armed.triggered_at = now

        latency = self.spec.latency_ms
        if latency is not None:
            delay = self.rng.uniform(*latency) if isinstance(latency, tuple) else latency
            time.sleep(delay / 1000.0)

    def snapshot(self, token: int) -> dict:
        return self.service.snapshot(token)

    def quiescent_for(self, token: int) -> bool:
        return self.service.quiescent_for(token)


@dataclass
class RunRecord:
    """Outcome of one repetition."""

    index: int
    token: int
    duration_s: float
    completed: bool
    error: str | None
    statuses: dict[str, str | None]
    tx_phases: dict[str, str | None]
    excluded: tuple[str, ...]
    heuristic_count: int

    @property
    def discarded(self) -> bool:
        return self.error is not None

    def decided_phases(self) -> set[str]:
        """Transaction phases of included participants (brute-force sweep)."""
        return {
            phase
            for label, phase in self.tx_phases.items()
            if phase is not None and label not in self.excluded
        }

    @property
    def mixed_outcome(self) -> bool:
        phases = self.decided_phases()
        if not phases:
            return False
        return not (phases <= {COMMITTED} or phases <= {ROLLED_BACK})


@dataclass
class ScenarioResult:
    scenario: Scenario
    runs: list[RunRecord]
    events: list[TraceEvent]

    def durations(self) -> list[float]:
        return [run.duration_s for run in self.runs]

    def failed_flags(self) -> list[bool]:
        return [run.discarded for run in self.runs]

    def run_events(self, run: RunRecord) -> list[TraceEvent]:
        return [e for e in self.events if e.token == run.token]

    def write_artifacts(self, out_dir: str | Path, bins: int = 20) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"trace": out / "trace.ndjson"}
        write_trace(self.events, paths["trace"])

        reference = next((r for r in self.runs if not r.discarded), self.runs[0] if self.runs else None)
        if reference is not None:
            diagram = render_sequence_diagram(self.run_events(reference))
            paths["diagram"] = out / "diagram.txt"
            paths["diagram"].write_text(diagram, encoding="utf-8")

        paths["histogram_csv"] = out / "histogram.csv"
        paths["histogram_csv"].write_text(
            runs_csv(self.durations(), self.failed_flags(), [r.error for r in self.runs]),
            encoding="utf-8",
        )
        if any(not r.discarded for r in self.runs):
            histogram = latency_histogram(self.durations(), self.failed_flags(), bins=bins)
            paths["histogram_txt"] = out / "histogram.txt"
            paths["histogram_txt"].write_text(histogram.to_text(), encoding="utf-8")
        return paths

    def check_invariants(self) -> list[str]:
        """Cross-run invariants: pairing, atomicity, fault-free completion."""
        problems: list[str] = []
        for run in self.runs:
            events = self.run_events(run)
            for request, match in pair_requests(events):
                if match is None:
                    problems.append(
                        f"run {run.index}: request {request.operation} from "
                        f"{request.from_role} has no response or timeout marker"
                    )
            if run.mixed_outcome:
                problems.append(f"run {run.index}: mixed transaction outcome {run.tx_phases}")
        fault_free = not self.scenario.fault_plan and all(
            not spec.faults for spec in self.scenario.devices.values()
        )
        if fault_free:
            for run in self.runs:
                if not run.completed:
                    problems.append(f"run {run.index}: did not complete ({run.error})")
                if run.heuristic_count:
                    problems.append(f"run {run.index}: heuristic outcomes in a fault-free run")
        return problems


def find_initiator(pkg: ChoreographyPackage) -> str:
    for chor in pkg.choreographies:
        for inter in iter_interactions(chor.body):
            if inter.initiate:
                return inter.from_role
    raise ScenarioInvalid("no interaction is marked initiate=true")


class Simulation:
    """A booted scenario: all devices bound and running, ready for repetitions."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.rng = random.Random(scenario.seed)
        self.trace = TraceCollector()
        self.devices: dict[str, SimulatedDevice] = {}
        self._started = False

        try:
            text = scenario.package_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioInvalid(f"cannot read package: {exc}") from exc
        warnings: list[Diagnostic] = []
        self.package = parse_package(text, warnings=warnings)
        diagnostics = warnings + model.validate_package(self.package)
        if model.has_errors(diagnostics):
            raise ScenarioInvalid("package does not validate", diagnostics)

        roles = self.package.role_names()
        missing = roles - set(scenario.devices)
        if missing:
            raise ScenarioInvalid(f"scenario does not map roles: {sorted(missing)}")
        for name, clone in scenario.clones.items():
            if clone.role not in roles:
                raise ScenarioInvalid(f"clone {name!r} references unknown role {clone.role!r}")

        self.initiator_role = find_initiator(self.package)
        self._build_devices()

    def _latency_for(self, spec: DeviceSpec) -> DeviceSpec:
        if self.scenario.latency_preset is None or spec.latency_ms is not None:
            return spec
        if self.scenario.latency_preset == "paper-like":
            return DeviceSpec(
                role=spec.role, endpoint=spec.endpoint, faults=spec.faults,
                latency_ms=(100.0, 800.0), data=spec.data, resource_budget=spec.resource_budget,
            )
        raise ScenarioInvalid(f"unknown latency preset {self.scenario.latency_preset!r}")

    def _build_devices(self) -> None:
        scenario = self.scenario
        projections: dict[str, RoleProjection] = {
            role: project(self.package, role) for role in sorted(self.package.role_names())
        }
        for role, spec in scenario.devices.items():
            if spec.resource_budget is not None:
                size = len(serialize_package(projections[role].package).encode("utf-8"))
                if size > spec.resource_budget:
                    raise ScenarioInvalid(
                        f"BUDGET_EXCEEDED: {role} projection is {size} bytes, "
                        f"budget is {spec.resource_budget}"
                    )

        endpoints: dict[str, str] = {}
        pending: list[tuple[str, DeviceSpec, RoleProjection, bool]] = []
        for role, spec in scenario.devices.items():
            pending.append((role, self._latency_for(spec), projections[role], False))
        for name, clone in scenario.clones.items():
            spec = DeviceSpec(role=clone.role, endpoint=clone.endpoint,
                              data=dict(scenario.devices[clone.role].data))
            pending.append((name, spec, projections[clone.role], True))

        # Bind all servers first so auto-assigned ports are known, then hand
        # every service the final endpoint map and clone registry.
        built: list[tuple[str, SimulatedDevice, bool]] = []
        for label, spec, projection, is_clone in pending:
            service = RoleService(
                projection,
                EngineConfig(),  # replaced once every endpoint is known
                initial_data=spec.data,
                trace=self.trace.record,
                transactional=scenario.transactional,
                rng=random.Random(self.rng.getrandbits(64)),
            )
            device = SimulatedDevice(
                label, spec, projection, service,
                rng=random.Random(self.rng.getrandbits(64)),
                rewrite_base=scenario.engine.get("rewrite_base", "api"),
            )
            built.append((label, device, is_clone))
            if not is_clone:
                endpoints[projection.role] = device.endpoint

        config = self.scenario.engine_config(endpoints)
        clone_types = []
        for label, device, is_clone in built:
            if is_clone:
                clone = scenario.clones[label]
                clone_types.append(CloneType(
                    name=label, role_refs=(clone.role,), usage=clone.usage,
                    endpoint=device.endpoint,
                ))
        for label, device, _ in built:
            device.service.config = config
            device.service.clone_registry = CloneRegistry.from_clone_types(clone_types)
            self.devices[label] = device

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "Simulation":
        for device in self.devices.values():
            device.start()
        self._started = True
        return self

    def stop(self) -> None:
        for device in self.devices.values():
            device.stop()
        self._started = False

    def __enter__(self) -> "Simulation":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def device(self, label: str) -> SimulatedDevice:
        return self.devices[label]

    # -- running -----------------------------------------------------------------

    def _plan_faults(self) -> dict[str, tuple[FaultSpec, ...]]:
        plan = self.scenario.fault_plan
        if not plan:
            return {}
        if plan.get("kind") != "random_single_disappear":
            raise ScenarioInvalid(f"unknown fault plan {plan!r}")
        window = float(plan.get("window_s", 1.0))
        labels = [label for label, device in self.devices.items()]
        victim = self.rng.choice(sorted(labels))
        offset = self.rng.uniform(0.0, window)
        return {victim: (FaultSpec(kind="disappear", from_time_s=offset),)}

    def run_repetition(self, index: int) -> RunRecord:
        if not self._started:
            raise RuntimeError("simulation not started")
        token = self.rng.getrandbits(63)
        extras = self._plan_faults()
        rep_start = time.monotonic()
        for label, device in self.devices.items():
            device.arm(rep_start, extras.get(label, ()))

        initiator = self.devices[self.initiator_role]
        error: str | None = None
        if initiator.is_disappeared():
            error = "initiator_disappeared"
        else:
            initiator.service.start_execution(token)

        deadline = rep_start + self.scenario.global_deadline_s
        if error is None:
            while time.monotonic() < deadline:
                live = [d for d in self.devices.values() if not d.is_disappeared()]
                if all(d.quiescent_for(token) for d in live):
                    break
                time.sleep(0.004)
            else:
                error = "deadline_exceeded"
        duration = time.monotonic() - rep_start

        statuses: dict[str, str | None] = {}
        tx_phases: dict[str, str | None] = {}
        excluded: list[str] = []
        heuristic = 0
        for label, device in self.devices.items():
            snap = device.snapshot(token)
            statuses[label] = snap["status"]
            tx_phases[label] = snap["tx_phase"]
            if device.is_disappeared():
                excluded.append(label)
            ctx = device.service.tx_manager.by_exec(token)
            if ctx is not None:
                heuristic += len(ctx.heuristic)

        participating = [s for label, s in statuses.items()
                         if s is not None and label not in excluded]
        if error is None:
            if statuses.get(self.initiator_role) != "completed":
                error = f"initiator_{statuses.get(self.initiator_role)}"
            elif any(s == "aborted" for s in participating):
                error = "aborted_participant"
        completed = error is None and bool(participating) and all(
            s == "completed" for s in participating
        )
        return RunRecord(
            index=index,
            token=token,
            duration_s=duration,
            completed=completed,
            error=error,
            statuses=statuses,
            tx_phases=tx_phases,
            excluded=tuple(excluded),
            heuristic_count=heuristic,
        )

    def run_all(self) -> ScenarioResult:
        runs = [self.run_repetition(i) for i in range(self.scenario.repetitions)]
        return ScenarioResult(self.scenario, runs, self.trace.events())


def run_scenario(scenario: Scenario | str | Path) -> ScenarioResult:
    """Boot a scenario, run every repetition, and tear the devices down."""
    if not isinstance(scenario, Scenario):
        scenario = Scenario.load(scenario)
    with Simulation(scenario) as sim:
        return sim.run_all()
