"""Learning-field specifications: templates, norms, mutation, and scoring.

A :class:`Scenery` fixes who participates and in what role, initial tie
weights, resources, admissible activities per role, participation norms,
rhythm, and an interaction-graph prior. Sceneries are immutable once built.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .codec import canon, dumps, loads, pair_key, split_pair
from .errors import UnknownIdError, ValidationError

if TYPE_CHECKING:  # pragma: no cover
    from .engine.trace import Trace

TEMPLATES = ("traditional-classroom", "open-classroom", "online", "informal-recess")
ROLES = ("teacher", "student")
CHANNELS = ("one-to-one", "broadcast", "group-chat")
GRANULARITIES = ("turn", "compressed")
TOPOLOGIES = ("teacher-centered-star", "clustered-groups", "artifact-mediated", "open-peer")

INSTRUCTIONAL_KINDS = (
    "explanation",
    "questioning",
    "demonstration",
    "grouping",
    "hinting",
    "feedback",
    "encouragement",
    "misconception-challenge",
    "task-redesign",
)
PEER_KINDS = frozenset({"peer-explain", "group-message"})

DIMENSIONS = ("spatial-layout", "teacher-role", "ai-tool-access", "grouping-policy", "assessment-mode")
DIMENSION_OPTIONS: dict[str, tuple[Any, ...]] = {
    "spatial-layout": ("rows", "clusters", "circle", "u-shape", "virtual", "open-space"),
    "teacher-role": ("lecturer", "facilitator", "co-learner", "moderator"),
    "ai-tool-access": ("none", "teacher-only", "student-shared", "individual-tutor"),
    "grouping-policy": (2, 3, 4, 6),
    "assessment-mode": ("quiz", "portfolio", "oral", "peer-review"),
}

DEFAULT_PROBABILITIES = {
    "teacher_student": 0.8,   # traditional star
    "peer": 0.05,
    "within": 0.6,            # open classroom clusters
    "cross": 0.1,
    "open_teacher": 0.3,
    "online_teacher": 0.5,    # artifact-mediated
    "online_peer": 0.3,
    "uniform": 0.2,           # informal recess
}

HOSTILITY_FLOOR = 0.1
FILTER_LOW = 0.2
FILTER_HIGH = 0.8

_TEMPLATE_DIMS: dict[str, dict[str, Any]] = {
    "traditional-classroom": {"spatial-layout": "rows", "teacher-role": "lecturer",
                              "ai-tool-access": "none", "grouping-policy": 4, "assessment-mode": "quiz"},
    "open-classroom": {"spatial-layout": "clusters", "teacher-role": "facilitator",
                       "ai-tool-access": "none", "grouping-policy": 4, "assessment-mode": "portfolio"},
    "online": {"spatial-layout": "virtual", "teacher-role": "moderator",
               "ai-tool-access": "student-shared", "grouping-policy": 4, "assessment-mode": "quiz"},
    "informal-recess": {"spatial-layout": "open-space", "teacher-role": None,
                        "ai-tool-access": "none", "grouping-policy": 5, "assessment-mode": None},
}

_TEACHER_KINDS = frozenset(INSTRUCTIONAL_KINDS) | {"listen"}
_STUDENT_KINDS = {
    "traditional-classroom": frozenset({"respond", "question-when-invited", "listen"}) | PEER_KINDS,
    "open-classroom": frozenset({"respond", "ask-question", "listen", "broadcast"}) | PEER_KINDS,
    "online": frozenset({"respond", "ask-question", "listen", "post-artifact"}) | PEER_KINDS,
    "informal-recess": frozenset({"initiate-topic", "join-topic", "exit-topic", "listen", "broadcast"})
    | PEER_KINDS,
}


@dataclass(frozen=True)
class Norms:
    max_group_size: int
    channels: Mapping[str, tuple[str, ...]]
    peer_chat_phases: tuple[str, ...] | None = None  # None: peer chat always allowed
    persistent_artifacts: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_group_size": self.max_group_size,
            "channels": {r: list(self.channels[r]) for r in sorted(self.channels)},
            "peer_chat_phases": None if self.peer_chat_phases is None else list(self.peer_chat_phases),
            "persistent_artifacts": self.persistent_artifacts,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Norms":
        phases = data.get("peer_chat_phases")
        return cls(
            max_group_size=int(data["max_group_size"]),
            channels={r: tuple(c) for r, c in data["channels"].items()},
            peer_chat_phases=None if phases is None else tuple(phases),
            persistent_artifacts=bool(data.get("persistent_artifacts", False)),
        )


@dataclass(frozen=True)
class Rhythm:
    steps: int
    granularity: str = "turn"
    asynchronous: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"steps": self.steps, "granularity": self.granularity, "asynchronous": self.asynchronous}


@dataclass(frozen=True)
class InteractionGraphPrior:
    """Initiation probability per undirected pair plus the template's topology label."""

    edges: Mapping[str, float]
    topology: str

    def initiation(self, agent: str) -> float:
        probs = [p for key, p in self.edges.items() if agent in split_pair(key)]
        return math.fsum(probs) / len(probs) if probs else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"topology": self.topology, "edges": {k: self.edges[k] for k in sorted(self.edges)}}


@dataclass(frozen=True)
class SceneryScore:
    learning: float
    equity: float
    feasibility: float
    safety: float
    novelty: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.learning, self.equity, self.feasibility, self.safety, self.novelty)

    @property
    def flagged(self) -> bool:
        """True when one criterion is very poor while another is very good."""
        values = self.as_tuple()
        return min(values) < FILTER_LOW and max(values) > FILTER_HIGH

    def to_dict(self) -> dict[str, Any]:
        return {"learning": self.learning, "equity": self.equity, "feasibility": self.feasibility,
                "safety": self.safety, "novelty": self.novelty, "flagged": self.flagged}


@dataclass(frozen=True)
class Scenery:
    id: str
    template: str
    participants: Mapping[str, str]
    relations: Mapping[str, float]
    resources: tuple[str, ...]
    activities: Mapping[str, frozenset[str]]
    norms: Norms
    rhythm: Rhythm
    prior: InteractionGraphPrior
    dims: Mapping[str, Any]
    base_dims: Mapping[str, Any]
    groups: tuple[tuple[str, ...], ...] = ()
    lesson: Mapping[str, Any] | None = None
    summary: tuple[Mapping[str, Any], ...] = ()

    @property
    def students(self) -> list[str]:
        return sorted(a for a, r in self.participants.items() if r == "student")

    @property
    def teachers(self) -> list[str]:
        return sorted(a for a, r in self.participants.items() if r == "teacher")

    def validate(self) -> None:
        if self.template not in TEMPLATES:
            raise ValidationError(f"unknown template {self.template!r}", "template")
        for agent, role in self.participants.items():
            if role not in ROLES:
                raise ValidationError(f"unknown role {role!r} for {agent!r}", "participants")
        for key, w in self.relations.items():
            a, b = split_pair(key)
            if a not in self.participants or b not in self.participants:
                raise ValidationError(f"relation {key!r} references a non-participant", "relations")
            if not 0.0 <= w <= 1.0:
                raise ValidationError(f"relation weight {w!r} outside [0, 1]", "relations")
        for key, p in self.prior.edges.items():
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"prior probability {p!r} outside [0, 1]", "prior")
        roles = set(self.participants.values())
        for role in list(self.norms.channels) + list(self.activities):
            if role not in roles:
                raise ValidationError(f"norm references undefined role {role!r}", "norms")
        for role, chans in self.norms.channels.items():
            for c in chans:
                if c not in CHANNELS:
                    raise ValidationError(f"unknown channel {c!r}", f"norms.channels.{role}")
        if self.norms.max_group_size < 1:
            raise ValidationError("max group size must be >= 1", "norms.max_group_size")
        if self.rhythm.granularity not in GRANULARITIES:
            raise ValidationError(f"unknown granularity {self.rhythm.granularity!r}", "rhythm")
        if self.rhythm.steps < 0:
            raise ValidationError("steps must be >= 0", "rhythm.steps")
        if self.prior.topology not in TOPOLOGIES:
            raise ValidationError(f"unknown topology {self.prior.topology!r}", "prior.topology")
        grouped = [a for g in self.groups for a in g]
        if len(grouped) != len(set(grouped)) or any(a not in self.participants for a in grouped):
            raise ValidationError("groups must partition participants", "groups")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "template": self.template,
            "participants": {a: self.participants[a] for a in sorted(self.participants)},
            "relations": {k: self.relations[k] for k in sorted(self.relations)},
            "resources": list(self.resources),
            "activities": {r: sorted(self.activities[r]) for r in sorted(self.activities)},
            "norms": self.norms.to_dict(),
            "rhythm": self.rhythm.to_dict(),
            "prior": self.prior.to_dict(),
            "dims": {d: self.dims.get(d) for d in DIMENSIONS},
            "base_dims": {d: self.base_dims.get(d) for d in DIMENSIONS},
            "groups": [list(g) for g in self.groups],
            "lesson": None if self.lesson is None else dict(self.lesson),
            "summary": [dict(u) for u in self.summary],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Scenery":
        rhythm = data["rhythm"]
        scenery = cls(
            id=data["id"],
            template=data["template"],
            participants=dict(sorted(data["participants"].items())),
            relations={k: float(v) for k, v in sorted(data.get("relations", {}).items())},
            resources=tuple(data.get("resources", ())),
            activities={r: frozenset(k) for r, k in data["activities"].items()},
            norms=Norms.from_dict(data["norms"]),
            rhythm=Rhythm(int(rhythm["steps"]), rhythm.get("granularity", "turn"),
                          bool(rhythm.get("asynchronous", False))),
            prior=InteractionGraphPrior(
                {k: float(v) for k, v in sorted(data["prior"]["edges"].items())},
                data["prior"]["topology"]),
            dims=dict(data["dims"]),
            base_dims=dict(data.get("base_dims", data["dims"])),
            groups=tuple(tuple(g) for g in data.get("groups", ())),
            lesson=data.get("lesson"),
            summary=tuple(data.get("summary", ())),
        )
        scenery.validate()
        return scenery


@dataclass(frozen=True)
class Schedule:
    scenes: tuple[Scenery, ...]

    @property
    def students(self) -> list[str]:
        return self.scenes[0].students

    @property
    def agents(self) -> list[str]:
        return sorted({a for s in self.scenes for a in s.participants})


# --------------------------------------------------------------------------
# Templates
# --------------------------------------------------------------------------


def _roster(params: Mapping[str, Any]) -> dict[str, str]:
    raw = params.get("roster")
    if not raw:
        raise ValidationError("params must include a participant roster", "roster")
    if isinstance(raw, Mapping):
        roster = dict(raw)
    else:
        roster = {entry["id"]: entry["role"] for entry in raw}
    for agent, role in roster.items():
        if "|" in agent or not agent:
            raise ValidationError(f"invalid agent id {agent!r}", "roster")
        if role not in ROLES:
            raise ValidationError(f"unknown role {role!r} for {agent!r}", "roster")
    return dict(sorted(roster.items()))


def _relations(raw: Any, roster: Mapping[str, str]) -> dict[str, float]:
    if raw is None:
        return {}
    items = raw.items() if isinstance(raw, Mapping) else ((pair_key(a, b), w) for a, b, w in raw)
    out: dict[str, float] = {}
    for key, w in items:
        a, b = split_pair(key)
        out[pair_key(a, b)] = float(w)
    for key in out:
        for end in split_pair(key):
            if end not in roster:
                raise ValidationError(f"relation endpoint {end!r} not in roster", "relations")
    return dict(sorted(out.items()))


def _chunk(items: Sequence[str], size: int) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(items[i:i + size]) for i in range(0, len(items), size))


def _clustered_prior(students: Sequence[str], teachers: Sequence[str], groups, probs) -> dict[str, float]:
    group_of = {a: i for i, g in enumerate(groups) for a in g}
    edges = {}
    for a, b in combinations(students, 2):
        edges[pair_key(a, b)] = probs["within"] if group_of[a] == group_of[b] else probs["cross"]
    for t in teachers:
        for s in students:
            edges[pair_key(t, s)] = probs["open_teacher"]
    return edges


def instantiate_template(name: str, params: Mapping[str, Any]) -> Scenery:
    """Build a scenery from one of the predefined templates.

    ``params`` must contain ``roster`` (agent id to role). Optional keys:
    ``id``, ``steps``, ``group_size``, ``relations``, ``resources``,
    ``prior_overrides`` (agent id to initiation probability), ``probabilities``,
    ``granularity``, ``lesson``, ``summary``, and any of the five
    mutable dimensions by name.
    """
    if name not in TEMPLATES:
        raise ValidationError(f"unknown template {name!r}", "template")
    roster = _roster(params)
    students = sorted(a for a, r in roster.items() if r == "student")
    teachers = sorted(a for a, r in roster.items() if r == "teacher")
    if not students:
        raise ValidationError("a scenery needs at least one student", "roster")
    if name == "informal-recess":
        if teachers:
            raise ValidationError("informal-recess takes no teachers", "roster")
    elif not teachers:
        raise ValidationError(f"{name} requires at least one teacher", "roster")

    probs = dict(DEFAULT_PROBABILITIES)
    probs.update({k: float(v) for k, v in params.get("probabilities", {}).items()})
    dims = dict(_TEMPLATE_DIMS[name])
    for dim in DIMENSIONS:
        if dim in params:
            dims[dim] = params[dim]
    if "group_size" in params:
        dims["grouping-policy"] = int(params["group_size"])
    group_size = int(dims["grouping-policy"])

    groups: tuple[tuple[str, ...], ...] = ()
    steps_default = 40
    if name == "traditional-classroom":
        edges = {pair_key(t, s): probs["teacher_student"] for t in teachers for s in students}
        edges.update({pair_key(a, b): probs["peer"] for a, b in combinations(students, 2)})
        topology = "teacher-centered-star"
        norms = Norms(group_size, {"teacher": ("broadcast", "one-to-one", "group-chat"),
                                   "student": ("one-to-one", "group-chat")},
                      peer_chat_phases=("collaborative-learning",))
    elif name == "open-classroom":
        groups = _chunk(students, group_size)
        edges = _clustered_prior(students, teachers, groups, probs)
        topology = "clustered-groups"
        norms = Norms(group_size, {"teacher": ("broadcast", "one-to-one", "group-chat"),
                                   "student": ("broadcast", "one-to-one", "group-chat")})
    elif name == "online":
        edges = {pair_key(t, s): probs["online_teacher"] for t in teachers for s in students}
        edges.update({pair_key(a, b): probs["online_peer"] for a, b in combinations(students, 2)})
        topology = "artifact-mediated"
        norms = Norms(group_size, {"teacher": CHANNELS, "student": CHANNELS},
                      persistent_artifacts=True)
    else:
        edges = {pair_key(a, b): probs["uniform"] for a, b in combinations(students, 2)}
        overrides = params.get("prior_overrides", {})
        for agent, p in overrides.items():
            if agent not in roster:
                raise ValidationError(f"prior override for unknown agent {agent!r}", "prior_overrides")
        for key in edges:
            a, b = split_pair(key)
            for end in (a, b):
                if end in overrides:
                    edges[key] = min(edges[key], float(overrides[end]))
        topology = "open-peer"
        norms = Norms(group_size, {"student": CHANNELS})
        steps_default = 300

    activities: dict[str, frozenset[str]] = {"student": _STUDENT_KINDS[name]}
    if teachers:
        activities["teacher"] = _TEACHER_KINDS
    granularity = params.get("granularity", "turn")
    rhythm = Rhythm(int(params.get("steps", steps_default)), granularity, name == "online")
    scenery = Scenery(
        id=str(params.get("id", name)),
        template=name,
        participants=roster,
        relations=_relations(params.get("relations"), roster),
        resources=tuple(params.get("resources", ())),
        activities=activities,
        norms=norms,
        rhythm=rhythm,
        prior=InteractionGraphPrior(dict(sorted(edges.items())), topology),
        dims=dims,
        base_dims=dict(dims),
        groups=groups,
        lesson=params.get("lesson"),
        summary=tuple(params.get("summary", ())),
    )
    scenery.validate()
    return scenery


def admissible_actions(scenery: Scenery, role: str, phase: str | None = None) -> frozenset[str]:
    """Action kinds a role may take in this scenery during ``phase``."""
    if role not in scenery.activities:
        raise UnknownIdError(f"role {role!r} is not defined in scenery {scenery.id!r}")
    kinds = scenery.activities[role]
    if role == "student" and scenery.norms.peer_chat_phases is not None:
        if phase not in scenery.norms.peer_chat_phases:
            kinds = kinds - PEER_KINDS
    return kinds


def may_use_channel(scenery: Scenery, role: str, channel: str) -> bool:
    return channel in scenery.norms.channels.get(role, ())


def compose_schedule(scenes: Sequence[Scenery]) -> Schedule:
    """Sequence scenes; the student roster must match across all of them."""
    if not scenes:
        raise ValidationError("a schedule needs at least one scene", "schedule")
    roster = scenes[0].students
    for i, scene in enumerate(scenes[1:], start=1):
        if scene.students != roster:
            raise ValidationError(f"scene {i} ({scene.id}) has a different student roster", "schedule")
    return Schedule(tuple(scenes))


# --------------------------------------------------------------------------
# Evolutionary mutation
# --------------------------------------------------------------------------


def mutation_options(base: Scenery, dimension: str) -> tuple[Any, ...]:
    if dimension not in DIMENSIONS:
        raise ValidationError(f"unknown dimension {dimension!r}", "dimension")
    if base.dims.get(dimension) is None:
        raise ValidationError(f"dimension {dimension!r} does not apply to {base.template}", "dimension")
    return tuple(v for v in DIMENSION_OPTIONS[dimension] if v != base.dims[dimension])


def mutate_scenery(base: Scenery, dimension: str, seed: int) -> Scenery:
    """Change exactly one dimension to a seed-chosen alternative from its option set."""
    options = mutation_options(base, dimension)
    rng = np.random.default_rng(seed)
    value = options[int(rng.integers(len(options)))]
    dims = dict(base.dims)
    dims[dimension] = value
    changes: dict[str, Any] = {"dims": dims, "id": f"{base.id}+{dimension}={value}"}
    if dimension == "grouping-policy":
        changes["norms"] = replace(base.norms, max_group_size=int(value))
        if base.template == "open-classroom":
            groups = _chunk(base.students, int(value))
            changes["groups"] = groups
            changes["prior"] = InteractionGraphPrior(
                dict(sorted(_clustered_prior(base.students, base.teachers, groups,
                                             _probs_from_prior(base)).items())),
                base.prior.topology)
    mutant = replace(base, **changes)
    try:
        mutant.validate()
    except ValidationError:
        mutant = replace(mutant, groups=_chunk(mutant.students, max(1, mutant.norms.max_group_size)))
        mutant.validate()
    return mutant


def _probs_from_prior(base: Scenery) -> dict[str, float]:
    """Recover within/cross/teacher probabilities from an open-classroom prior."""
    probs = dict(DEFAULT_PROBABILITIES)
    group_of = {a: i for i, g in enumerate(base.groups) for a in g}
    for key, p in base.prior.edges.items():
        a, b = split_pair(key)
        if a in group_of and b in group_of:
            probs["within" if group_of[a] == group_of[b] else "cross"] = p
        else:
            probs["open_teacher"] = p
    return probs


def novelty(candidate: Scenery) -> float:
    """Normalized Hamming distance between the dimension vector and its instantiated base."""
    differing = sum(1 for d in DIMENSIONS if candidate.dims.get(d) != candidate.base_dims.get(d))
    return differing / len(DIMENSIONS)


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------


Evaluator = Callable[[Scenery, "Trace"], float]


def score_scenery(
    candidate: Scenery,
    trace: "Trace",
    evaluators: Mapping[str, Evaluator] | None = None,
) -> SceneryScore:
    from . import analysis  # analysis reads traces; imported lazily to keep scenery standalone

    if candidate.id not in trace.scenery_ids:
        raise ValidationError(f"trace was not produced under scenery {candidate.id!r}", "trace")
    final = trace.final_state
    lesson = analysis.lesson_metrics(final)
    per_student = [s.avg_mastery for s in lesson.students if s.avg_mastery is not None]
    if per_student:
        spread = float(np.std(per_student))
        equity = 1.0 - min(1.0, spread / 0.5)
    else:
        equity = 1.0
    acted = [e for e in trace.events if e.payload.get("event") == "action"]
    repairs = [e for e in trace.events if e.payload.get("event") == "repair"]
    feasibility = 1.0 - (len(repairs) / len(acted) if acted else 0.0)
    feasibility = min(1.0, max(0.0, feasibility))
    unsafe_steps = 0
    n_steps = 0
    for _step, state in analysis.step_states(trace):
        n_steps += 1
        if any(w < HOSTILITY_FLOOR for w in state["ties"].values()):
            unsafe_steps += 1
    safety = 1.0 - (unsafe_steps / n_steps if n_steps else 0.0)
    values = {
        "learning": lesson.avg_mastery if lesson.avg_mastery is not None else 0.0,
        "equity": equity,
        "feasibility": feasibility,
        "safety": safety,
        "novelty": novelty(candidate),
    }
    for name, fn in (evaluators or {}).items():
        if name not in values:
            raise ValidationError(f"unknown criterion {name!r}", "evaluators")
        values[name] = float(fn(candidate, trace))
    for name, v in values.items():
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"criterion {name} = {v!r} outside [0, 1]", "evaluators")
    return SceneryScore(**values)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

SCENERY_FORMAT = "edusim-scenery"
SCENERY_VERSION = "1.0"


def save_scenery(path: str | Path, scenery: Scenery, provenance: Mapping[str, Any] | None = None) -> None:
    doc = {"format": SCENERY_FORMAT, "version": SCENERY_VERSION,
           "provenance": dict(provenance) if provenance else None, "scenery": scenery.to_dict()}
    Path(path).write_text(json.dumps(canon(doc), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_scenery(path: str | Path) -> Scenery:
    doc = loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != SCENERY_FORMAT:
        raise ValidationError(f"{path} is not a scenery document", "format")
    _check_version(doc.get("version", ""))
    return Scenery.from_dict(doc["scenery"])


def _check_version(version: str) -> None:
    from .errors import FormatVersionError

    major = version.split(".")[0]
    if major != SCENERY_VERSION.split(".")[0]:
        raise FormatVersionError(f"unsupported scenery format version {version!r}")


def save_library(directory: str | Path, sceneries: Iterable[Scenery]) -> Path:
    """Persist sceneries as one document each plus an ``index.json``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    index = {}
    for scenery in sorted(sceneries, key=lambda s: s.id):
        filename = _safe_name(scenery.id) + ".json"
        save_scenery(root / filename, scenery)
        index[scenery.id] = {"file": filename, "template": scenery.template}
    path = root / "index.json"
    path.write_text(dumps({"format": "edusim-scenery-index", "version": SCENERY_VERSION,
                           "sceneries": index}) + "\n", encoding="utf-8")
    return path


def load_library(directory: str | Path) -> dict[str, Scenery]:
    root = Path(directory)
    index = loads((root / "index.json").read_text(encoding="utf-8"))
    return {sid: load_scenery(root / entry["file"]) for sid, entry in index["sceneries"].items()}


def _safe_name(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)
