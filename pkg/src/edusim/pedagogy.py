"""Teacher-agent state, the instructional cycle, ZPD scoring, and reflection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Mapping, Protocol, Sequence

from .actions import BROADCAST, Action
from .cognition import InferredProfile
from .errors import PhaseError, ValidationError
from .scenery import INSTRUCTIONAL_KINDS, Scenery, admissible_actions

if TYPE_CHECKING:  # pragma: no cover
    pass

MOVES = (
    "establish-scaffolds",
    "contextual-engagement",
    "independent-exploration",
    "collaborative-learning",
    "outcome-assessment",
)
PHASES = ("planning",) + MOVES + ("reflection",)
STYLE_KEYS = ("direct-instruction-preference", "uncertainty-tolerance", "collaboration-emphasis")

THETA_ZONE = 0.5
CHALLENGE_PERSISTENCE = 0.3
DEFAULT_HEADROOM = 0.15
DEFAULT_BAND = 0.15
DEFAULT_TARGET_MASTERY = 0.8

# default (exposure quality q, scaffold strength s) per instructional kind
EXPOSURE = {
    "explanation": (0.8, 0.2),
    "questioning": (0.3, 0.2),
    "demonstration": (0.7, 0.3),
    "grouping": (0.0, 0.0),
    "hinting": (0.5, 0.5),
    "feedback": (0.4, 0.3),
    "encouragement": (0.0, 0.1),
    "misconception-challenge": (0.6, 0.3),
    "task-redesign": (0.2, 0.4),
}

# the instructional kind the adaptive teacher uses in each delivery move
MOVE_KIND = {
    "establish-scaffolds": "explanation",
    "contextual-engagement": "demonstration",
    "independent-exploration": "hinting",
    "collaborative-learning": "feedback",
    "outcome-assessment": "questioning",
}


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ContentEntry:
    explanation: str = ""
    level: float = 0.5
    demands: Mapping[str, float] = field(default_factory=dict)

    def demand(self, kind: str) -> float:
        return float(self.demands.get(kind, self.level))

    def to_dict(self) -> dict[str, Any]:
        return {"explanation": self.explanation, "level": self.level,
                "demands": {k: self.demands[k] for k in sorted(self.demands)}}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ContentEntry":
        return cls(data.get("explanation", ""), float(data.get("level", 0.5)),
                   {k: float(v) for k, v in data.get("demands", {}).items()})


@dataclass(frozen=True)
class Activity:
    move: str
    concepts: tuple[str, ...]
    budget: int

    def to_dict(self) -> dict[str, Any]:
        return {"move": self.move, "concepts": list(self.concepts), "budget": self.budget}


@dataclass(frozen=True)
class LessonPlan:
    objectives: tuple[tuple[str, float], ...]
    activities: tuple[Activity, ...]
    total_budget: int

    def validate(self) -> None:
        for concept, target in self.objectives:
            if not 0.0 <= target <= 1.0:
                raise ValidationError(f"target mastery {target!r} for {concept!r} outside [0, 1]",
                                      "plan.objectives")
        for act in self.activities:
            if act.move not in MOVES:
                raise ValidationError(f"unknown move {act.move!r}", "plan.activities")
            if act.budget < 0:
                raise ValidationError("activity budget must be >= 0", "plan.activities")
        if self.used_budget > self.total_budget:
            raise ValidationError(
                f"activity budgets sum to {self.used_budget} > total {self.total_budget}", "plan")

    @property
    def used_budget(self) -> int:
        return sum(a.budget for a in self.activities)

    @property
    def concepts(self) -> set[str]:
        return {c for c, _ in self.objectives} | {c for a in self.activities for c in a.concepts}

    def activity(self, move: str) -> Activity | None:
        for act in self.activities:
            if act.move == move:
                return act
        return None

    def budget_for(self, move: str) -> int:
        return sum(a.budget for a in self.activities if a.move == move)

    def to_dict(self) -> dict[str, Any]:
        return {
            "objectives": [[c, t] for c, t in self.objectives],
            "activities": [a.to_dict() for a in self.activities],
            "total_budget": self.total_budget,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LessonPlan":
        return cls(
            objectives=tuple((c, float(t)) for c, t in data["objectives"]),
            activities=tuple(Activity(a["move"], tuple(a["concepts"]), int(a["budget"]))
                             for a in data["activities"]),
            total_budget=int(data["total_budget"]),
        )


@dataclass(frozen=True)
class ReflectionRecord:
    lesson_id: str
    scenery_id: str
    students: tuple[str, ...]
    plan: LessonPlan | None
    profiles: tuple[InferredProfile, ...]
    actions: tuple[Mapping[str, Any], ...]
    knowledge_deltas: Mapping[str, Mapping[str, float]]
    evaluation: Mapping[str, float]

    def validate(self) -> None:
        if not self.lesson_id:
            raise ValidationError("reflection record needs a lesson id", "record.lesson_id")
        present = set(self.students)
        for sid in self.knowledge_deltas:
            if sid not in present:
                raise ValidationError(f"knowledge delta for absent student {sid!r}",
                                      "record.knowledge_deltas")
        for p in self.profiles:
            if p.student not in present:
                raise ValidationError(f"profile for absent student {p.student!r}", "record.profiles")

    def to_dict(self) -> dict[str, Any]:
        return {
            "lesson_id": self.lesson_id,
            "scenery_id": self.scenery_id,
            "students": list(self.students),
            "plan": None if self.plan is None else self.plan.to_dict(),
            "profiles": [p.to_dict() for p in self.profiles],
            "actions": [dict(a) for a in self.actions],
            "knowledge_deltas": {s: {c: d[c] for c in sorted(d)}
                                 for s, d in sorted(self.knowledge_deltas.items())},
            "evaluation": {k: self.evaluation[k] for k in sorted(self.evaluation)},
        }


@dataclass(frozen=True)
class TeacherState:
    id: str
    knowledge: Mapping[str, ContentEntry]
    records: tuple[ReflectionRecord, ...] = ()
    beliefs: Mapping[str, float] = field(default_factory=dict)
    plan: LessonPlan | None = None
    style: Mapping[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        for name, group in (("beliefs", self.beliefs), ("style", self.style)):
            for key, value in group.items():
                if not 0.0 <= value <= 1.0:
                    raise ValidationError(f"{value!r} outside [0, 1]", f"teachers.{self.id}.{name}.{key}")
        for key in self.style:
            if key not in STYLE_KEYS:
                raise ValidationError(f"unknown style key {key!r}", f"teachers.{self.id}.style")
        if self.plan is not None:
            self.plan.validate()
            missing = self.plan.concepts - set(self.knowledge)
            if missing:
                raise ValidationError(f"plan references unknown concepts {sorted(missing)}",
                                      f"teachers.{self.id}.plan")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "knowledge": {c: self.knowledge[c].to_dict() for c in sorted(self.knowledge)},
            "records": [r.to_dict() for r in self.records],
            "beliefs": {k: self.beliefs[k] for k in sorted(self.beliefs)},
            "style": {k: self.style[k] for k in sorted(self.style)},
        }
        if self.plan is not None:
            out["plan"] = self.plan.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TeacherState":
        plan = data.get("plan")
        teacher = cls(
            id=data["id"],
            knowledge={c: ContentEntry.from_dict(e) for c, e in sorted(data.get("knowledge", {}).items())},
            beliefs={k: float(v) for k, v in sorted(data.get("beliefs", {}).items())},
            plan=None if plan is None else LessonPlan.from_dict(plan),
            style={k: float(v) for k, v in sorted(data.get("style", {}).items())},
        )
        teacher.validate()
        return teacher


# --------------------------------------------------------------------------
# ZPD
# --------------------------------------------------------------------------


def zpd_score(demand: float, mastery: float, headroom: float, band: float) -> float:
    """Gaussian compatibility between task demand and mastery-plus-headroom."""
    if not band > 0.0:
        raise ValidationError(f"band must be > 0, got {band!r}", "sigma")
    offset = demand - (mastery + headroom)
    return math.exp(-(offset * offset) / (2.0 * band * band))


def classify_challenge(score: float, demand: float, mastery: float, theta: float = THETA_ZONE) -> str:
    """Label a task ``too-easy``, ``in-zone`` or ``too-hard`` for a learner."""
    if not 0.0 < score <= 1.0:
        raise ValidationError(f"score must be in (0, 1], got {score!r}", "score")
    if demand < mastery:
        return "too-easy"
    if score >= theta:
        return "in-zone"
    return "too-hard"


# --------------------------------------------------------------------------
# Planning
# --------------------------------------------------------------------------


class PlanningPolicy(Protocol):
    def plan(self, teacher: TeacherState, objectives: Sequence[str],
             profiles: Sequence[InferredProfile], budget: int) -> LessonPlan | None: ...


def default_plan(objectives: Sequence[str], budget: int,
                 target: float = DEFAULT_TARGET_MASTERY) -> LessonPlan:
    """One activity per move, equal split, remainder to outcome assessment."""
    share, rest = divmod(budget, len(MOVES))
    concepts = tuple(objectives)
    activities = tuple(
        Activity(move, concepts, share + (rest if move == "outcome-assessment" else 0)) for move in MOVES
    )
    return LessonPlan(tuple((c, target) for c in concepts), activities, budget)


def _truncate(plan: LessonPlan) -> LessonPlan:
    remaining = plan.total_budget
    activities = []
    for act in plan.activities:
        budget = max(0, min(act.budget, remaining))
        remaining -= budget
        activities.append(replace(act, budget=budget))
    return replace(plan, activities=tuple(activities))


def plan_lesson(
    teacher: TeacherState,
    objectives: Sequence[str],
    profiles: Sequence[InferredProfile],
    budget: int,
    policy: PlanningPolicy | None = None,
) -> tuple[LessonPlan, list[str]]:
    """Produce a validated lesson plan; returns the plan and any repair notes."""
    unknown = [c for c in objectives if c not in teacher.knowledge]
    if unknown:
        raise ValidationError(f"objectives not in declarative knowledge: {unknown}", "objectives")
    if budget < len(MOVES):
        raise ValidationError(f"budget {budget} cannot cover {len(MOVES)} moves", "budget")
    plan = policy.plan(teacher, objectives, profiles, budget) if policy is not None else None
    if plan is None:
        plan = default_plan(objectives, budget)
    repairs: list[str] = []
    if plan.total_budget != budget:
        repairs.append(f"total budget {plan.total_budget} reset to {budget}")
        plan = replace(plan, total_budget=budget)
    if plan.used_budget > plan.total_budget:
        repairs.append(f"activities summed to {plan.used_budget}; truncated to {plan.total_budget}")
        plan = _truncate(plan)
    plan.validate()
    missing = plan.concepts - set(teacher.knowledge)
    if missing:
        raise ValidationError(f"plan references unknown concepts {sorted(missing)}", "plan")
    return plan, repairs


# --------------------------------------------------------------------------
# Action selection
# --------------------------------------------------------------------------


class TeachingPolicy(Protocol):
    def select(self, teacher: TeacherState, profiles: Sequence[InferredProfile],
               scenery: Scenery, phase: str) -> Action: ...


def class_estimate(profiles: Sequence[InferredProfile], concept: str) -> float:
    """Mean estimated mastery across students with evidence on ``concept`` (0 if none)."""
    values = [p.estimates[concept] for p in profiles if concept in p.estimates]
    return math.fsum(values) / len(values) if values else 0.0


def adaptive_action(
    teacher: TeacherState,
    profiles: Sequence[InferredProfile],
    phase: str,
    headroom: float = DEFAULT_HEADROOM,
) -> Action:
    """Misconception-first, then the weakest concept at peak-ZPD demand."""
    flagged = []
    for profile in profiles:
        for mid in profile.flagged:
            concept, rho = profile.revealed[mid]
            if rho >= CHALLENGE_PERSISTENCE:
                flagged.append((-rho, concept, profile.student, mid))
    if flagged:
        _, concept, student, mid = min(flagged)
        profile = next(p for p in profiles if p.student == student)
        estimate = profile.estimates.get(concept, 0.0)
        q, s = EXPOSURE["misconception-challenge"]
        return Action(
            "misconception-challenge", target=student, concept=concept, demand=estimate + headroom,
            payload={"text": _text(teacher, concept, "misconception-challenge"), "q": q, "s": s,
                     "e": q, "misconception": mid, "estimate": estimate},
            rationale=f"challenge {mid} (persistence {-min(flagged)[0]:.3g})",
        )
    candidates = _candidate_concepts(teacher, phase)
    if not candidates:
        return Action("feedback", target=BROADCAST, payload={"text": "", "q": 0.0, "s": 0.0},
                      rationale="nothing to teach")
    concept = min(candidates, key=lambda c: (class_estimate(profiles, c), c))
    estimate = class_estimate(profiles, concept)
    kind = MOVE_KIND.get(phase, "explanation")
    q, s = EXPOSURE[kind]
    return Action(
        kind, target=BROADCAST, concept=concept, demand=estimate + headroom,
        payload={"text": _text(teacher, concept, kind), "q": q, "s": s, "estimate": estimate},
        rationale=f"lowest estimated mastery on {concept}",
    )


def _candidate_concepts(teacher: TeacherState, phase: str) -> list[str]:
    if teacher.plan is not None:
        act = teacher.plan.activity(phase)
        if act is not None and act.concepts:
            return sorted(act.concepts)
        if teacher.plan.objectives:
            return sorted(c for c, _ in teacher.plan.objectives)
    return sorted(teacher.knowledge)


def _text(teacher: TeacherState, concept: str, kind: str) -> str:
    entry = teacher.knowledge.get(concept)
    body = entry.explanation if entry is not None and entry.explanation else concept
    return f"[{kind}] {body}"


def select_action(
    teacher: TeacherState,
    profiles: Sequence[InferredProfile],
    scenery: Scenery,
    phase: str,
    policy: TeachingPolicy | None = None,
    headroom: float = DEFAULT_HEADROOM,
) -> tuple[Action, list[str]]:
    """Choose the teacher's next action; inadmissible choices become a no-op feedback.

    Returns the action and a list of violation notes (empty when admissible).
    """
    if phase not in MOVES:
        raise PhaseError(f"no instructional action during {phase!r}")
    admissible = admissible_actions(scenery, "teacher", phase)
    if policy is None:
        action = adaptive_action(teacher, profiles, phase, headroom)
    else:
        action = policy.select(teacher, profiles, scenery, phase)
    if action.kind not in admissible or action.kind not in INSTRUCTIONAL_KINDS:
        note = f"inadmissible kind {action.kind!r} in {scenery.id} during {phase}"
        return Action("feedback", target=BROADCAST, payload={"text": "", "q": 0.0, "s": 0.0},
                      rationale="no-op substitute"), [note]
    return action, []


# --------------------------------------------------------------------------
# Cycle and reflection
# --------------------------------------------------------------------------


def next_phase(phase: str) -> str:
    if phase not in PHASES:
        raise PhaseError(f"unknown phase {phase!r}")
    if phase == "reflection":
        raise PhaseError("reflection is terminal for the lesson")
    return PHASES[PHASES.index(phase) + 1]


def cycle_advance(phase: str, plan: LessonPlan | None, elapsed: int) -> str:
    """Advance once the current move's time budget is spent."""
    if phase == "planning":
        return next_phase(phase)
    if phase == "reflection":
        raise PhaseError("reflection is terminal for the lesson")
    if phase not in MOVES:
        raise PhaseError(f"unknown phase {phase!r}")
    if plan is None:
        raise PhaseError(f"no lesson plan while in {phase!r}")
    if elapsed >= plan.budget_for(phase):
        return next_phase(phase)
    return phase


def reflect(teacher: TeacherState, record: ReflectionRecord) -> TeacherState:
    """Append a lesson's reflection record to the experiential base."""
    record.validate()
    return replace(teacher, records=teacher.records + (record,))
