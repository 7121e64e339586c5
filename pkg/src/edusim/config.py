"""Project configuration documents: parsing, diagnostics, and bundled fixtures.

A config is one canonical-JSON document::

    {"format": "edusim-config", "version": "1.0", "name": ..., "seed": ...,
     "horizon": ..., "budget_cap": ..., "granularity": 1,
     "coefficients": {...},
     "scenes": [{"template": ..., "params": {...}} | {"file": "scenery.json"}],
     "students": [...], "teachers": [...],
     "policies": {agent_id: {"kind": ..., "params": {...}}},
     "output": {"metrics": [...], "formats": [...]}}

Validation collects every problem with its field path instead of stopping
at the first one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

from .codec import loads
from .cognition import KnowledgeGraph, LearnerParams, Misconception, StudentState
from .engine.state import Coefficients, RunConfig
from .errors import EdusimError, ValidationError
from .pedagogy import ContentEntry, TeacherState
from .policy import PolicyBinding
from .scenery import Scenery, compose_schedule, instantiate_template, load_scenery

CONFIG_FORMAT = "edusim-config"
CONFIG_VERSION = "1.0"
METRIC_NAMES = ("lesson", "network", "calibration")
REPORT_FORMATS = ("text-table", "structured")
MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class Diagnostic:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


class ConfigError(EdusimError):
    def __init__(self, diagnostics: list[Diagnostic]) -> None:
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ProjectConfig:
    run: RunConfig
    metrics: tuple[str, ...] = ("lesson",)
    formats: tuple[str, ...] = ("text-table",)
    fixture: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)


class _Collector:
    def __init__(self) -> None:
        self.items: list[Diagnostic] = []

    def add(self, path: str, message: str) -> None:
        self.items.append(Diagnostic(path, message))

    def attempt(self, path: str, fn: Callable[[], Any]) -> Any:
        try:
            return fn()
        except ValidationError as exc:
            text = str(exc)
            inner = exc.field
            if inner and text.startswith(f"{inner}: "):
                text = text[len(inner) + 2:]
            where = path if not inner else f"{path}.{inner}" if not inner.startswith(path) else inner
            self.add(where, text)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            self.add(path, f"{type(exc).__name__}: {exc}")
        except EdusimError as exc:
            self.add(path, str(exc))
        return None


def _int_field(doc: Mapping[str, Any], name: str, diag: _Collector, minimum: int) -> int | None:
    value = doc.get(name)
    if isinstance(value, bool) or not isinstance(value, int):
        diag.add(name, f"must be an integer, got {value!r}")
        return None
    if value < minimum:
        diag.add(name, f"must be >= {minimum}, got {value}")
        return None
    return value


def _student(data: Mapping[str, Any]) -> StudentState:
    graph = KnowledgeGraph.create(data.get("mastery", data.get("graph", {}).get("mastery", {})),
                                  data.get("edges", data.get("graph", {}).get("edges", ())))
    mis = data.get("misconceptions", [])
    items = mis.values() if isinstance(mis, Mapping) else mis
    state = StudentState(
        id=str(data["id"]),
        graph=graph,
        params=LearnerParams.from_dict(data.get("params", {})),
        memory=(),
        workflows={k: float(v) for k, v in sorted(data.get("workflows", {}).items())},
        misconceptions={m["id"]: Misconception.from_dict(m) for m in sorted(items, key=lambda m: m["id"])},
    )
    state.validate()
    return state


def _teacher(data: Mapping[str, Any]) -> TeacherState:
    teacher = TeacherState(
        id=str(data["id"]),
        knowledge={c: ContentEntry.from_dict(e) for c, e in sorted(data.get("knowledge", {}).items())},
        beliefs={k: float(v) for k, v in sorted(data.get("beliefs", {}).items())},
        style={k: float(v) for k, v in sorted(data.get("style", {}).items())},
    )
    teacher.validate()
    return teacher


def _resolve_file(name: str, base_dir: Path) -> Path:
    p = Path(name)
    if p.is_absolute():
        return p
    if p.exists():
        return p
    return base_dir / p


def _scene(entry: Mapping[str, Any], roster: Mapping[str, str], base_dir: Path, index: int) -> Scenery:
    if "file" in entry:
        path = _resolve_file(str(entry["file"]), base_dir)
        if not path.exists():
            raise ValidationError(f"scenery file {entry['file']!r} not found", f"scenes[{index}].file")
        return load_scenery(path)
    template = entry.get("template")
    if not isinstance(template, str):
        raise ValidationError("scene needs a template or a file", f"scenes[{index}]")
    params = dict(entry.get("params", {}))
    if "roster" not in params:
        params["roster"] = {a: r for a, r in roster.items()
                            if not (template == "informal-recess" and r == "teacher")}
    params.setdefault("id", f"{template}-{index}")
    return instantiate_template(template, params)


def diagnose(doc: Any, base_dir: str | Path = ".") -> tuple[ProjectConfig | None, list[Diagnostic]]:
    """Build a project config, returning it (or None) with every diagnostic found."""
    base = Path(base_dir)
    diag = _Collector()
    if not isinstance(doc, Mapping):
        return None, [Diagnostic("", "config must be an object")]
    if doc.get("format") != CONFIG_FORMAT:
        diag.add("format", f"expected {CONFIG_FORMAT!r}, got {doc.get('format')!r}")
    version = str(doc.get("version", ""))
    if version.split(".")[0] != CONFIG_VERSION.split(".")[0]:
        diag.add("version", f"unsupported config version {version!r}")
    name = str(doc.get("name", "run"))
    seed = _int_field(doc, "seed", diag, 0)
    if seed is not None and seed > MAX_SEED:
        diag.add("seed", "must fit in 64 unsigned bits")
    horizon = _int_field(doc, "horizon", diag, 1)
    granularity = doc.get("granularity", 1)
    if isinstance(granularity, bool) or not isinstance(granularity, int) or granularity < 1:
        diag.add("granularity", f"must be a positive integer, got {granularity!r}")
    cap = doc.get("budget_cap", math.inf)
    if cap is None:
        cap = math.inf
    if isinstance(cap, bool) or not isinstance(cap, (int, float)) or not cap > 0:
        diag.add("budget_cap", f"must be a positive number, got {cap!r}")
    coeffs = diag.attempt("coefficients", lambda: Coefficients.from_dict(doc.get("coefficients")))

    students: dict[str, StudentState] = {}
    for i, raw in enumerate(doc.get("students") or []):
        s = diag.attempt(f"students[{i}]", lambda raw=raw: _student(raw))
        if s is not None:
            if s.id in students:
                diag.add(f"students[{i}].id", f"duplicate id {s.id!r}")
            students[s.id] = s
    if not doc.get("students"):
        diag.add("students", "at least one student is required")
    teachers: dict[str, TeacherState] = {}
    for i, raw in enumerate(doc.get("teachers") or []):
        t = diag.attempt(f"teachers[{i}]", lambda raw=raw: _teacher(raw))
        if t is not None:
            if t.id in teachers or t.id in students:
                diag.add(f"teachers[{i}].id", f"duplicate id {t.id!r}")
            teachers[t.id] = t
    roster = {**{s: "student" for s in students}, **{t: "teacher" for t in teachers}}

    scenes = []
    raw_scenes = doc.get("scenes")
    if not isinstance(raw_scenes, list) or not raw_scenes:
        diag.add("scenes", "at least one scene is required")
        raw_scenes = []
    for i, entry in enumerate(raw_scenes):
        if not isinstance(entry, Mapping):
            diag.add(f"scenes[{i}]", "scene entries must be objects")
            continue
        sc = diag.attempt(f"scenes[{i}]", lambda entry=entry, i=i: _scene(entry, roster, base, i))
        if sc is None:
            continue
        for agent, role in sc.participants.items():
            if roster.get(agent) != role:
                diag.add(f"scenes[{i}].participants.{agent}", f"{role} {agent!r} is not declared in the roster")
        lesson = sc.lesson
        if lesson is not None:
            tid = lesson.get("teacher")
            if tid is not None and tid not in sc.teachers:
                diag.add(f"scenes[{i}].params.lesson.teacher", f"{tid!r} is not a teacher in this scene")
            for c in lesson.get("objectives", ()):
                for t in ([tid] if tid else sc.teachers):
                    if t in teachers and c not in teachers[t].knowledge:
                        diag.add(f"scenes[{i}].params.lesson.objectives", f"{c!r} unknown to teacher {t!r}")
        scenes.append(sc)
    schedule = diag.attempt("scenes", lambda: compose_schedule(scenes)) if scenes else None

    bindings: dict[str, PolicyBinding] = {}
    policies = doc.get("policies") or {}
    if not isinstance(policies, Mapping):
        diag.add("policies", "must map agent ids to bindings")
        policies = {}
    for agent, raw in sorted(policies.items()):
        if agent not in roster:
            diag.add(f"policies.{agent}", "binding for an unknown agent")
            continue
        if not isinstance(raw, Mapping):
            diag.add(f"policies.{agent}", "binding must be an object")
            continue
        b = PolicyBinding.from_dict(agent, raw)
        if diag.attempt(f"policies.{agent}", lambda b=b, agent=agent: b.validate(roster[agent]) or True):
            bindings[agent] = b
    for agent in sorted(roster):
        if agent not in policies:
            diag.add(f"policies.{agent}", "every agent needs exactly one policy binding")

    output = doc.get("output") or {}
    metrics = tuple(output.get("metrics", ("lesson",)))
    for m in metrics:
        if m not in METRIC_NAMES:
            diag.add("output.metrics", f"unknown metric {m!r}")
    formats = tuple(output.get("formats", ("text-table",)))
    for f in formats:
        if f not in REPORT_FORMATS:
            diag.add("output.formats", f"unknown report format {f!r}")

    if diag.items:
        return None, diag.items
    run = RunConfig(
        name=name,
        seed=seed,
        schedule=schedule,
        students=students,
        teachers=teachers,
        bindings=bindings,
        horizon=horizon,
        granularity=granularity,
        budget_cap=float(cap),
        coefficients=coeffs,
        source=dict(doc),
    )
    return ProjectConfig(run, metrics, formats, doc.get("fixture"), base), []


def build_config(doc: Any, base_dir: str | Path = ".") -> ProjectConfig:
    config, problems = diagnose(doc, base_dir)
    if config is None:
        raise ConfigError(problems)
    return config


def read_config_doc(path: str | Path) -> dict[str, Any]:
    """Parse a config file; OSError propagates, bad JSON becomes ConfigError."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = loads(text)
    except ValueError as exc:
        raise ConfigError([Diagnostic("", f"not valid JSON: {exc}")]) from None
    return doc


def with_seed(doc: Mapping[str, Any], seed: int | None) -> dict[str, Any]:
    out = dict(doc)
    if seed is not None:
        out["seed"] = seed
    return out


def load_config(path: str | Path, seed: int | None = None) -> ProjectConfig:
    doc = with_seed(read_config_doc(path), seed)
    return build_config(doc, Path(path).resolve().parent)


# --------------------------------------------------------------------------
# Bundled fixtures
# --------------------------------------------------------------------------


def fixtures_dir() -> Path:
    return Path(str(resources.files("edusim") / "fixtures"))


def fixture_names() -> list[str]:
    return sorted(p.stem for p in fixtures_dir().glob("*.json"))


def fixture_path(name: str) -> Path:
    path = fixtures_dir() / f"{name}.json"
    if not path.exists():
        raise ValidationError(f"unknown fixture {name!r}; available: {', '.join(fixture_names())}", "fixture")
    return path


def load_fixture(name: str, seed: int | None = None) -> ProjectConfig:
    return load_config(fixture_path(name), seed)
