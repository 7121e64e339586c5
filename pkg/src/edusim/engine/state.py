"""Global simulation state, run configuration, and state-delta construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Mapping, Sequence

from ..cognition import (
    DEFAULT_CHALLENGE_COEF,
    DEFAULT_DECAY_UNIT,
    DEFAULT_RECENCY,
    DEFAULT_RETIRE_BELOW,
    EvidenceItem,
    StudentState,
    VisibleEvent,
)
from ..errors import ValidationError
from ..pedagogy import DEFAULT_BAND, DEFAULT_HEADROOM, THETA_ZONE, TeacherState
from ..scenery import Schedule

Delta = list  # [path, old, new]; None on either side means "absent"


@dataclass(frozen=True)
class Coefficients:
    """Engine-wide coefficient table; learner rates live on each student's params."""

    decay_unit: float = DEFAULT_DECAY_UNIT
    challenge_coef: float = DEFAULT_CHALLENGE_COEF
    retire_below: float = DEFAULT_RETIRE_BELOW
    recency: float = DEFAULT_RECENCY
    theta_zone: float = THETA_ZONE
    headroom: float = DEFAULT_HEADROOM
    band: float = DEFAULT_BAND
    tie_affiliative: float = 0.1
    tie_conflict: float = 0.2
    tie_homophily: float = 0.02
    remote_cost: float = 50.0
    memory_capacity: int = 24
    retrieve_k: int = 5

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"must be a finite value >= 0, got {value!r}", f"coefficients.{f.name}")
        if self.band <= 0:
            raise ValidationError("must be > 0", "coefficients.band")
        if self.memory_capacity < 1 or self.retrieve_k < 1:
            raise ValidationError("memory capacity and k must be >= 1", "coefficients")

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "Coefficients":
        data = dict(data or {})
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValidationError(f"unknown coefficients {unknown}", "coefficients")
        out = {}
        for name, value in data.items():
            if name in ("memory_capacity", "retrieve_k"):
                out[name] = int(value)
            else:
                out[name] = float(value)
        return cls(**out)


@dataclass(frozen=True)
class EvalSignal:
    """Per-agent (task id, score) pairs exposed for logging; never optimized."""

    scores: Mapping[str, tuple[str, float]]

    def __post_init__(self) -> None:
        for agent, (_, score) in self.scores.items():
            if not 0.0 <= score <= 1.0:
                raise ValidationError(f"score {score!r} outside [0, 1]", f"eval.{agent}")

    def to_dict(self) -> dict[str, Any]:
        return {a: [t, s] for a, (t, s) in sorted(self.scores.items())}


@dataclass(frozen=True)
class RunConfig:
    name: str
    seed: int
    schedule: Schedule
    students: Mapping[str, StudentState]
    teachers: Mapping[str, TeacherState]
    bindings: Mapping[str, Any]  # agent id -> policy.PolicyBinding
    horizon: int
    granularity: int = 1
    budget_cap: float = math.inf
    coefficients: Coefficients = field(default_factory=Coefficients)
    source: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def agents(self) -> list[str]:
        return sorted(set(self.students) | set(self.teachers))


@dataclass
class SimulationState:
    """Global state: agents, active scene, tie graph, evidence, and a history pointer.

    ``pending`` holds the visible events produced by the previous step. It is
    transient and deliberately excluded from snapshots.
    """

    t: int
    students: dict[str, StudentState]
    teachers: dict[str, TeacherState]
    scene: dict[str, Any]
    ties: dict[str, float]
    evidence: dict[str, tuple[EvidenceItem, ...]]
    history: dict[str, Any] = field(default_factory=lambda: {"events": 0, "last": -1})
    pending: tuple[VisibleEvent, ...] = ()

    def validate(self) -> None:
        overlap = set(self.students) & set(self.teachers)
        if overlap:
            raise ValidationError(f"agents in two role maps: {sorted(overlap)}", "state")
        for key, w in self.ties.items():
            if not 0.0 <= w <= 1.0:
                raise ValidationError(f"tie {key} = {w!r} outside [0, 1]", "ties")

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "students": {s: self.students[s].to_dict() for s in sorted(self.students)},
            "teachers": {s: self.teachers[s].to_dict() for s in sorted(self.teachers)},
            "scene": _plain_copy(self.scene),
            "ties": {k: self.ties[k] for k in sorted(self.ties)},
            "evidence": {s: [e.to_dict() for e in self.evidence[s]] for s in sorted(self.evidence)},
            "history": dict(self.history),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimulationState":
        return cls(
            t=int(data["t"]),
            students={s: StudentState.from_dict(v) for s, v in data["students"].items()},
            teachers={s: TeacherState.from_dict(v) for s, v in data["teachers"].items()},
            scene=_plain_copy(data["scene"]),
            ties={k: float(v) for k, v in data["ties"].items()},
            evidence={s: tuple(EvidenceItem.from_dict(e) for e in v) for s, v in data["evidence"].items()},
            history=dict(data.get("history", {"events": 0, "last": -1})),
        )


def _plain_copy(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _plain_copy(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain_copy(v) for v in value]
    return value


# --------------------------------------------------------------------------
# Delta construction
# --------------------------------------------------------------------------


def seq_deltas(path: list, old: Sequence[Any], new: Sequence[Any],
               encode: Callable[[Any], Any]) -> list[Delta]:
    """Index-level deltas turning ``old`` into ``new`` (elements compared by identity).

    Handles the common shapes cheaply: pure appends, one deletion followed by
    appends (bounded-memory eviction), and falls back to index-wise edits.
    """
    out: list[Delta] = []
    n_old, n_new = len(old), len(new)
    p = 0
    while p < n_old and p < n_new and old[p] is new[p]:
        p += 1
    if p == n_old:
        for i in range(p, n_new):
            out.append([path + [i], None, encode(new[i])])
        return out
    rest = n_old - p - 1
    if n_new - p >= rest and all(old[p + 1 + j] is new[p + j] for j in range(rest)):
        out.append([path + [p], encode(old[p]), None])
        for i in range(p + rest, n_new):
            out.append([path + [i], None, encode(new[i])])
        return out
    common = min(n_old, n_new)
    for i in range(p, common):
        if old[i] is not new[i]:
            out.append([path + [i], encode(old[i]), encode(new[i])])
    for i in range(common, n_new):
        out.append([path + [i], None, encode(new[i])])
    for i in range(n_old - 1, common - 1, -1):
        out.append([path + [i], encode(old[i]), None])
    return out


def map_deltas(path: list, old: Mapping[str, Any], new: Mapping[str, Any],
               encode: Callable[[Any], Any]) -> list[Delta]:
    out: list[Delta] = []
    for key in sorted(set(old) | set(new)):
        a, b = old.get(key), new.get(key)
        if a is b or (a is not None and b is not None and a == b):
            continue
        out.append([path + [key], None if a is None else encode(a), None if b is None else encode(b)])
    return out


def _to_dict(x: Any) -> Any:
    return x.to_dict()


def student_deltas(sid: str, old: StudentState, new: StudentState) -> list[Delta]:
    base = ["students", sid]
    out: list[Delta] = []
    if old.graph is not new.graph:
        if old.graph.nodes != new.graph.nodes or old.graph.edges != new.graph.edges:
            out.append([base + ["graph"], old.graph.to_dict(), new.graph.to_dict()])
        else:
            for node in sorted(new.graph.mastery):
                a, b = old.graph.mastery[node], new.graph.mastery[node]
                if a != b:
                    out.append([base + ["graph", "mastery", node], a, b])
    if old.memory is not new.memory:
        out.extend(seq_deltas(base + ["memory"], old.memory, new.memory, _to_dict))
    if old.misconceptions is not new.misconceptions:
        out.extend(map_deltas(base + ["misconceptions"], old.misconceptions, new.misconceptions, _to_dict))
    if old.params != new.params:
        out.append([base + ["params"], old.params.to_dict(), new.params.to_dict()])
    if old.workflows != new.workflows:
        out.extend(map_deltas(base + ["workflows"], old.workflows, new.workflows, lambda v: v))
    return out


def teacher_deltas(tid: str, old: TeacherState, new: TeacherState) -> list[Delta]:
    base = ["teachers", tid]
    out: list[Delta] = []
    if old.plan is not new.plan:
        out.append([base + ["plan"],
                    None if old.plan is None else old.plan.to_dict(),
                    None if new.plan is None else new.plan.to_dict()])
    if old.records is not new.records:
        out.extend(seq_deltas(base + ["records"], old.records, new.records, _to_dict))
    rest_old = replace(old, plan=None, records=())
    rest_new = replace(new, plan=None, records=())
    if rest_old != rest_new:
        a, b = rest_old.to_dict(), rest_new.to_dict()
        for key in ("knowledge", "beliefs", "style"):
            if a[key] != b[key]:
                out.append([base + [key], a[key], b[key]])
    return out
