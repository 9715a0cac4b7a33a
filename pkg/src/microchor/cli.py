"""Command-line entry point: validate, project, serve, simulate, render.

Exit codes are stable: 0 success, 1 validation failure, 2 usage error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import signal
import sys
import time
from pathlib import Path

from . import model
from .clones import CloneRegistry
from .engine import EngineConfig
from .harness import Scenario, ScenarioInvalid, run_scenario
from .model import CloneType, CloneUsage
from .parser import ParseError, parse_package, serialize_package
from .projection import UnknownRole, project
from .render import NoData, latency_histogram, render_sequence_diagram, runs_csv
from .runtime import RoleService, build_device_registry
from .trace import read_trace, write_trace
from .transport import RestServer

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

DEFAULT_CONFIG_ENV = "MICROCHOR_CONFIG"

log = logging.getLogger(__name__)


def _load_package(path: str, warnings: list | None = None):
    text = Path(path).read_text(encoding="utf-8")
    return parse_package(text, warnings=warnings)


def cmd_validate(args: argparse.Namespace) -> int:
    warnings: list[model.Diagnostic] = []
    try:
        pkg = _load_package(args.package, warnings)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    diagnostics = warnings + model.validate_package(pkg)
    for diagnostic in diagnostics:
        print(diagnostic)
    if model.has_errors(diagnostics):
        return EXIT_VALIDATION
    print(f"{pkg.name}: {len(pkg.role_types)} roles, "
          f"{len(pkg.choreographies)} choreographies, no errors")
    return EXIT_OK


def cmd_project(args: argparse.Namespace) -> int:
    try:
        pkg = _load_package(args.package)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    diagnostics = model.validate_package(pkg)
    if model.has_errors(diagnostics):
        for diagnostic in diagnostics:
            print(diagnostic, file=sys.stderr)
        return EXIT_VALIDATION
    try:
        projection = project(pkg, args.role)
    except UnknownRole as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if projection.is_empty():
        print(f"warning: {args.role} takes part in no interaction", file=sys.stderr)
    text = serialize_package(projection.package)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text, encoding="utf-8")
        print(f"wrote {args.output} ({len(text.encode('utf-8'))} bytes)")
    return EXIT_OK


def _device_config(path: str | None) -> dict:
    if path is None:
        path = os.environ.get(DEFAULT_CONFIG_ENV)
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        pkg = _load_package(args.projection)
        config_data = _device_config(args.config)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ParseError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        projection = project(pkg, args.role)
    except UnknownRole as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    engine_settings = dict(config_data.get("engine", {}))
    config = EngineConfig(endpoints=dict(config_data.get("endpoints", {})), **engine_settings)

    clone_types = []
    for name, clone in config_data.get("clones", {}).items():
        clone_types.append(CloneType(
            name=name,
            role_refs=(clone["role"],),
            usage=CloneUsage(clone.get("type", "permanent")),
            endpoint=clone.get("endpoint"),
        ))

    collector = None
    trace_sink = None
    if args.trace_out:
        from .trace import TraceCollector

        collector = TraceCollector()
        trace_sink = collector.record

    service = RoleService(
        projection,
        config,
        initial_data=dict(config_data.get("data", {})),
        clone_registry=CloneRegistry.from_clone_types(clone_types),
        trace=trace_sink,
        transactional=bool(config_data.get("transactional", False)),
        rng=random.Random(args.seed),
    )
    try:
        server = RestServer(args.endpoint, build_device_registry(service),
                            rewrite_base=config.rewrite_base)
    except OSError as exc:
        print(f"error: cannot bind {args.endpoint}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    service.endpoint = server.endpoint
    server.start()
    service.start()
    print(f"{args.role} serving on {server.endpoint}", flush=True)

    stop = {"requested": False}

    def _handle_signal(signum, frame):
        stop["requested"] = True

    signal.signal(signal.SIGTERM, _handle_signal)
    signal.signal(signal.SIGINT, _handle_signal)

    execution = None
    if args.initiate:
        execution = service.start_execution(args.token)
        print(f"initiated execution {execution.token}", flush=True)

    exit_code = EXIT_OK
    try:
        while not stop["requested"]:
            if args.once and execution is not None and service.quiescent_for(execution.token):
                break
            time.sleep(0.05)
        if args.once and execution is not None:
            status = service.snapshot(execution.token)["status"]
            print(f"execution {execution.token} {status}", flush=True)
            if status != "completed":
                exit_code = EXIT_RUNTIME
    finally:
        if collector is not None:
            write_trace(collector.events(), args.trace_out)
        service.stop()
        server.stop()
    return exit_code


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except ScenarioInvalid as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.runs is not None:
        scenario.repetitions = args.runs
    if args.seed is not None:
        scenario.seed = args.seed

    try:
        result = run_scenario(scenario)
    except ScenarioInvalid as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        for diagnostic in exc.diagnostics:
            print(diagnostic, file=sys.stderr)
        return EXIT_VALIDATION

    completed = sum(1 for run in result.runs if run.completed)
    discarded = sum(1 for run in result.runs if run.discarded)
    print(f"{len(result.runs)} runs: {completed} completed, {discarded} discarded")
    if args.out:
        paths = result.write_artifacts(args.out, bins=args.bins)
        for kind, path in paths.items():
            print(f"  {kind}: {path}")

    if args.check:
        problems = result.check_invariants()
        for problem in problems:
            print(f"invariant violated: {problem}", file=sys.stderr)
        if problems:
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    try:
        events = read_trace(args.trace)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if args.format == "diagram":
        if not events:
            print("error: empty trace", file=sys.stderr)
            return EXIT_RUNTIME
        tokens = []
        for event in events:
            if event.token is not None and event.token not in tokens:
                tokens.append(event.token)
        if args.token is not None:
            selected = [e for e in events if e.token == args.token]
        elif tokens:
            selected = [e for e in events if e.token == tokens[0]]
        else:
            selected = events
        sys.stdout.write(render_sequence_diagram(selected))
        return EXIT_OK

    # histogram over per-token durations reconstructed from the trace
    by_token: dict[int, list[float]] = {}
    for event in events:
        if event.token is None:
            continue
        by_token.setdefault(event.token, []).append(event.timestamp)
    durations = [max(ts) - min(ts) for ts in by_token.values() if len(ts) > 1]
    try:
        histogram = latency_histogram(durations, bins=args.bins)
    except NoData:
        print("error: no runs in trace", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(runs_csv(durations, [False] * len(durations), [None] * len(durations)))
    sys.stdout.write(histogram.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microchor",
        description="Decentralized choreography runtime and simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="validate a package document")
    p_validate.add_argument("package")
    p_validate.set_defaults(func=cmd_validate)

    p_project = sub.add_parser("project", help="write one role's projection document")
    p_project.add_argument("package")
    p_project.add_argument("--role", required=True)
    p_project.add_argument("-o", "--output", default="-")
    p_project.set_defaults(func=cmd_project)

    p_serve = sub.add_parser("serve", help="run one device engine until terminated")
    p_serve.add_argument("projection", help="projection (or full package) document")
    p_serve.add_argument("--role", required=True)
    p_serve.add_argument("--endpoint", default="127.0.0.1:0")
    p_serve.add_argument("--config", help=f"device config JSON (default ${DEFAULT_CONFIG_ENV})")
    p_serve.add_argument("--initiate", action="store_true", help="start an execution at boot")
    p_serve.add_argument("--token", type=int, help="execution token to initiate with")
    p_serve.add_argument("--once", action="store_true", help="exit when the initiated execution settles")
    p_serve.add_argument("--seed", type=int, default=None)
    p_serve.add_argument("--trace-out", help="write this device's trace on exit")
    p_serve.set_defaults(func=cmd_serve)

    p_simulate = sub.add_parser("simulate", help="run a multi-device scenario")
    p_simulate.add_argument("scenario")
    p_simulate.add_argument("--runs", type=int, default=None)
    p_simulate.add_argument("--seed", type=int, default=None)
    p_simulate.add_argument("--out", help="directory for trace/diagram/histogram artifacts")
    p_simulate.add_argument("--bins", type=int, default=20)
    p_simulate.add_argument("--check", action="store_true",
                            help="fail when a run violates the trace/transaction invariants")
    p_simulate.set_defaults(func=cmd_simulate)

    p_render = sub.add_parser("render", help="regenerate artifacts from a trace file")
    p_render.add_argument("trace")
    p_render.add_argument("--format", choices=("diagram", "histogram"), required=True)
    p_render.add_argument("--token", type=int, default=None, help="execution to diagram")
    p_render.add_argument("--bins", type=int, default=20)
    p_render.set_defaults(func=cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MICROCHOR_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
