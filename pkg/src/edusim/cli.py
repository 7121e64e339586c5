"""Command-line entry point: ``edusim validate|run|replay|analyze|mutate|fixtures``.

Exit codes:

====  ==============================================
0     success
1     invalid configuration or scenery
2     usage error
3     unreadable or unwritable file
4     run rejected by the budget check
5     trace integrity failure (or unsupported version)
6     trace incomplete (the run was aborted)
7     snapshot file missing
8     constraint verdict: invalid trajectory
====  ==============================================
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .analysis import (
    METRICS,
    OBSERVABLES,
    calibration_distance,
    check_constraints,
    emit_report,
    lesson_metrics,
    load_constraints,
    load_histogram,
    network_from_state,
    observable_distribution,
)
from .config import (
    ConfigError,
    ProjectConfig,
    build_config,
    diagnose,
    fixture_names,
    fixture_path,
    read_config_doc,
    with_seed,
)
from .engine import TraceWriter, read_trace, replay, run
from .engine.core import budget_estimate
from .errors import (
    BudgetExceeded,
    FormatVersionError,
    IncompleteTraceError,
    IntegrityError,
    MissingSnapshotError,
    ValidationError,
)
from .scenery import DIMENSIONS, load_scenery, mutate_scenery, save_scenery

log = logging.getLogger("edusim")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_BUDGET = 4
EXIT_INTEGRITY = 5
EXIT_INCOMPLETE = 6
EXIT_NO_SNAPSHOT = 7
EXIT_CONSTRAINTS = 8

_FORMATS = {"text": "text-table", "json": "structured"}


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"edusim: {msg}", file=sys.stderr)


def _config_source(args: argparse.Namespace) -> tuple[Path, Path]:
    """Return (config path, base directory for relative scenery files)."""
    if args.config and args.fixture:
        raise UsageError("give either --config or --fixture, not both")
    if args.fixture:
        try:
            path = fixture_path(args.fixture)
        except ValidationError as exc:
            raise UsageError(str(exc)) from None
        return path, path.parent
    if not args.config:
        raise UsageError("--config or --fixture is required")
    path = Path(args.config)
    return path, path.resolve().parent


def _load_project(args: argparse.Namespace) -> ProjectConfig:
    path, base = _config_source(args)
    doc = with_seed(read_config_doc(path), getattr(args, "seed", None))
    return build_config(doc, base)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    path, base = _config_source(args)
    try:
        doc = read_config_doc(path)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(d)
        return EXIT_INVALID
    _, problems = diagnose(with_seed(doc, args.seed), base)
    for d in problems:
        print(d)
    if problems:
        print(f"{len(problems)} problem(s) in {path}")
        return EXIT_INVALID
    print(f"{path}: ok")
    return EXIT_OK


def _reports_for(project: ProjectConfig, state: dict, metrics: Sequence[str]) -> list:
    reports = []
    if "lesson" in metrics:
        reports.append(lesson_metrics(state))
    if "network" in metrics:
        reports.append(network_from_state(state))
    return reports


def cmd_run(args: argparse.Namespace) -> int:
    try:
        project = _load_project(args)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(d)
        return EXIT_INVALID
    config = project.run
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / f"{config.name}.trace"
    try:
        trace = run(config, sink=TraceWriter(trace_path))
    except BudgetExceeded as exc:
        _err(f"run rejected: estimate_budget = {exc.estimate:g} exceeds budget_cap = {exc.cap:g}")
        return EXIT_BUDGET
    except Exception as exc:  # the engine has already flushed a partial trace marked incomplete
        _err(f"run aborted, partial trace marked incomplete: {exc}")
        return EXIT_INCOMPLETE
    metrics = [m for m in (args.metrics.split(",") if args.metrics else project.metrics) if m != "calibration"]
    reports = _reports_for(project, trace.final_state, metrics)
    for fmt in project.formats:
        suffix = "json" if fmt == "structured" else "txt"
        (out / f"{config.name}.report.{suffix}").write_text(emit_report(reports, fmt), encoding="utf-8")
    print(f"trace: {trace_path}")
    print(f"events: {len(trace.events)}  steps: {trace.final_state['t']}  "
          f"budget estimate: {budget_estimate(config, _policy_costs(config)):g}")
    sys.stdout.write(emit_report(reports, _FORMATS[args.format]))
    return EXIT_OK


def _policy_costs(config):
    from .policy import make_policy

    return {a: make_policy(b, config.coefficients.to_dict()) for a, b in config.bindings.items()}


def cmd_replay(args: argparse.Namespace) -> int:
    path = args.trace_path or args.trace
    if not path:
        raise UsageError("a trace path is required")
    state = replay(path)
    print(f"{path}: replay matches snapshot (t={state['t']}, events={state['history']['events']})")
    return EXIT_OK


def _pairs(items: Sequence[str], flag: str) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key or not value:
            raise UsageError(f"{flag} expects OBSERVABLE=VALUE, got {item!r}")
        out[key] = value
    return out


def cmd_analyze(args: argparse.Namespace) -> int:
    path = args.trace_path or args.trace
    if not path:
        raise UsageError("a trace path is required")
    metrics = args.metrics.split(",") if args.metrics else ["lesson"]
    for m in metrics:
        if m not in ("lesson", "network", "calibration"):
            raise UsageError(f"unknown metric {m!r}")
    real_paths = _pairs(args.real_dist, "--real-dist")
    weights_raw = _pairs(args.weight, "--weight")
    if "calibration" in metrics:
        if not real_paths:
            raise UsageError("calibration requires --real-dist OBSERVABLE=PATH")
        if set(weights_raw) != set(real_paths):
            raise UsageError("calibration requires one --weight OBSERVABLE=W per --real-dist")
        for z in real_paths:
            if z not in OBSERVABLES:
                raise UsageError(f"unknown observable {z!r}; choose from {', '.join(OBSERVABLES)}")
    trace = read_trace(path)
    reports: list = []
    if "lesson" in metrics:
        reports.append(lesson_metrics(trace))
    if "network" in metrics:
        reports.append(network_from_state(trace.final_state))
    if "calibration" in metrics:
        real = {z: load_histogram(p) for z, p in real_paths.items()}
        sim = {z: observable_distribution(trace, z, support=real[z]) for z in real}
        try:
            weights = {z: float(w) for z, w in weights_raw.items()}
        except ValueError:
            raise UsageError("weights must be numbers") from None
        reports.append(calibration_distance(sim, real, weights, args.distance))
    verdict = None
    if args.constraints:
        verdict = check_constraints(trace, load_constraints(args.constraints))
        reports.append(verdict)
    fmt = _FORMATS[args.format]
    text = emit_report(reports, fmt)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(path).name.removesuffix(".trace")
        (out / f"{stem}.analysis.{'json' if fmt == 'structured' else 'txt'}").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if verdict is not None and not verdict.valid:
        return EXIT_CONSTRAINTS
    return EXIT_OK


def cmd_mutate(args: argparse.Namespace) -> int:
    if args.dimension not in DIMENSIONS:
        raise UsageError(f"unknown dimension {args.dimension!r}; choose from {', '.join(DIMENSIONS)}")
    base = load_scenery(args.scenery)
    try:
        mutant = mutate_scenery(base, args.dimension, args.seed)
    except ValidationError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else Path(f"{base.id}.{args.dimension}.{args.seed}.json")
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_scenery(out, mutant, {"base": base.id, "dimension": args.dimension, "seed": args.seed})
    print(f"{out}: {args.dimension} {base.dims.get(args.dimension)!r} -> {mutant.dims.get(args.dimension)!r}")
    return EXIT_OK


def cmd_fixtures(args: argparse.Namespace) -> int:
    names = fixture_names()
    if args.export:
        out = Path(args.export)
        out.mkdir(parents=True, exist_ok=True)
        for name in names:
            (out / f"{name}.json").write_text(fixture_path(name).read_text(encoding="utf-8"), encoding="utf-8")
        print(f"exported {len(names)} fixtures to {out}")
        return EXIT_OK
    for name in names:
        print(name)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edusim", description="Deterministic multi-agent classroom simulator.")
    parser.add_argument("--version", action="version", version=f"edusim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="project config file")
        p.add_argument("--fixture", help="bundled fixture name (see `edusim fixtures`)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("validate", help="check a config and list every problem")
    config_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run a config; writes trace, snapshot and reports")
    config_flags(p)
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--metrics", help="comma-separated: lesson,network (default: from config)")
    p.add_argument("--format", choices=sorted(_FORMATS), default="text", help="stdout report format")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="rebuild the final state from a trace and compare with its snapshot")
    p.add_argument("trace_path", nargs="?")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("analyze", help="compute reports over a trace")
    p.add_argument("trace_path", nargs="?")
    p.add_argument("--trace")
    p.add_argument("--metrics", help="comma-separated: lesson,network,calibration (default: lesson)")
    p.add_argument("--constraints", help="constraint spec file")
    p.add_argument("--real-dist", action="append", metavar="OBS=PATH",
                   help="real histogram for an observable (repeatable)")
    p.add_argument("--weight", action="append", metavar="OBS=W", help="calibration weight (repeatable)")
    p.add_argument("--distance", choices=METRICS, default="total-variation")
    p.add_argument("--format", choices=sorted(_FORMATS), default="text")
    p.add_argument("--out", help="also write the report into this directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("mutate", help="mutate one dimension of a scenery file")
    p.add_argument("--scenery", required=True)
    p.add_argument("--dimension", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="mutant path (default: <id>.<dimension>.<seed>.json)")
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("fixtures", help="list or export the bundled fixture configs")
    p.add_argument("--export", metavar="DIR")
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _err(str(exc))
        return EXIT_USAGE
    except IncompleteTraceError as exc:
        _err(f"incomplete trace: {exc}")
        return EXIT_INCOMPLETE
    except IntegrityError as exc:
        _err(f"integrity failure at seq {exc.seq}: {exc}")
        return EXIT_INTEGRITY
    except FormatVersionError as exc:
        _err(str(exc))
        return EXIT_INTEGRITY
    except MissingSnapshotError as exc:
        _err(f"missing snapshot: {exc}")
        return EXIT_NO_SNAPSHOT
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(d)
        return EXIT_INVALID
    except ValidationError as exc:
        _err(str(exc))
        return EXIT_INVALID
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

