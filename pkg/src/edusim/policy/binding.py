"""Policy bindings and the provider contract shared by built-in and remote policies."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence, runtime_checkable

from ..actions import Action
from ..cognition import InferredProfile, Observation
from ..errors import ValidationError
from ..pedagogy import LessonPlan, TeacherState

BINDING_KINDS = ("scripted-teacher", "adaptive-scripted-teacher", "rule-student", "scripted-student", "remote")
TEACHER_KINDS = frozenset({"scripted-teacher", "adaptive-scripted-teacher", "remote"})
STUDENT_KINDS = frozenset({"rule-student", "scripted-student", "remote"})
ENDPOINT_ENV = "EDUSIM_POLICY_ENDPOINT"


@dataclass(frozen=True)
class Decision:
    """A policy's chosen action plus any numeric corrections made on the way."""

    action: Action
    clamps: tuple[Mapping[str, Any], ...] = ()


@runtime_checkable
class Policy(Protocol):
    cost: float
    remote: bool

    def decide(self, observation: Observation) -> Action | Decision: ...


class PlanningPolicy(Protocol):
    def plan(self, teacher: TeacherState, objectives: Sequence[str],
             profiles: Sequence[InferredProfile], budget: int) -> LessonPlan | None: ...


@dataclass(frozen=True)
class PolicyBinding:
    agent: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def validate(self, role: str | None = None) -> None:
        where = f"policies.{self.agent}"
        if self.kind not in BINDING_KINDS:
            raise ValidationError(f"unknown policy kind {self.kind!r}", f"{where}.kind")
        if self.kind == "remote":
            if not self.params.get("endpoint"):
                raise ValidationError("remote bindings need an endpoint", f"{where}.params.endpoint")
            timeout = self.params.get("timeout")
            if not isinstance(timeout, (int, float)) or isinstance(timeout, bool) or timeout <= 0:
                raise ValidationError("remote bindings need a positive timeout", f"{where}.params.timeout")
            retries = self.params.get("retries", 0)
            if not isinstance(retries, int) or retries < 0:
                raise ValidationError("retries must be a non-negative integer", f"{where}.params.retries")
        if self.kind in ("scripted-teacher", "scripted-student"):
            script = self.params.get("script")
            if not isinstance(script, list):
                raise ValidationError("scripted bindings need a script list", f"{where}.params.script")
            for i, entry in enumerate(script):
                if not isinstance(entry, Mapping) or not isinstance(entry.get("kind"), str):
                    raise ValidationError("script entries need a kind", f"{where}.params.script[{i}]")
        if role == "teacher" and self.kind not in TEACHER_KINDS:
            raise ValidationError(f"{self.kind} cannot drive a teacher", f"{where}.kind")
        if role == "student" and self.kind not in STUDENT_KINDS:
            raise ValidationError(f"{self.kind} cannot drive a student", f"{where}.kind")

    def to_dict(self) -> dict[str, Any]:
        return {"agent": self.agent, "kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, agent: str, data: Mapping[str, Any]) -> "PolicyBinding":
        return cls(agent, str(data.get("kind", "")), dict(data.get("params", {})))


def make_policy(binding: PolicyBinding, coefficients: Mapping[str, Any] | None = None) -> Policy:
    """Instantiate the provider for one binding."""
    from .builtin import AdaptiveTeacher, RuleStudent, ScriptedStudent, ScriptedTeacher
    from .wire import RemotePolicy

    binding.validate()
    p = binding.params
    if binding.kind == "scripted-teacher":
        return ScriptedTeacher(tuple(p["script"]), loop=bool(p.get("loop", False)))
    if binding.kind == "adaptive-scripted-teacher":
        return AdaptiveTeacher(headroom=p.get("headroom"))
    if binding.kind == "rule-student":
        return RuleStudent(
            correct_at=float(p.get("correct_at", 0.5)),
            question_below=float(p.get("question_below", 0.2)),
            uptake=p.get("uptake"),
            post_rate=float(p.get("post_rate", 0.5)),
            join_existing=float(p.get("join_existing", 0.7)),
        )
    if binding.kind == "scripted-student":
        return ScriptedStudent(tuple(p["script"]), loop=bool(p.get("loop", False)))
    coeffs = dict(coefficients or {})
    endpoint = os.environ.get(ENDPOINT_ENV) or p["endpoint"]
    return RemotePolicy(endpoint, float(p["timeout"]), int(p.get("retries", 0)),
                        cost=float(coeffs.get("remote_cost", 50.0)), coefficients=coeffs)
