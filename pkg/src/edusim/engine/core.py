"""The four-phase step loop, scene scheduling, budget check, and run driver.

Within a step: observe (build local observations), act (collect decisions,
remote calls concurrently), apply (validate and apply in ascending agent id),
log (decay, instructional-cycle advance, scene changes, clock). Every state
change is recorded as a ``[path, old, new]`` delta on some trace event.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Any, Mapping, Sequence

import numpy as np

from ..actions import BROADCAST, NOOP, Action
from ..codec import digest, pair_key
from ..cognition import (
    EvidenceItem,
    InferredProfile,
    MemoryRecord,
    Observation,
    Rubric,
    StudentState,
    append_memory,
    apply_decay_tick,
    build_observation,
    challenge_misconception,
    clip01,
    infer_profile,
    update_mastery,
)
from ..errors import (
    BudgetExceeded,
    ChannelError,
    EdusimError,
    PhaseError,
    PolicyFailure,
    ValidationError,
    Violation,
)
from ..pedagogy import (
    EXPOSURE,
    MOVES,
    ReflectionRecord,
    TeacherState,
    class_estimate,
    classify_challenge,
    cycle_advance,
    plan_lesson,
    reflect,
    zpd_score,
)
from ..policy import Decision, Policy, make_policy
from ..scenery import INSTRUCTIONAL_KINDS, Scenery, admissible_actions
from .comm import Delivery, broadcast, group_chat, one_to_one, update_tie
from .state import Coefficients, RunConfig, SimulationState, map_deltas, student_deltas, teacher_deltas
from .trace import ENGINE_VERSION, FORMAT_VERSION, TRACE_FORMAT, Trace, TraceEvent, TraceWriter

log = logging.getLogger(__name__)

SYSTEM = "engine"
N_DRAWS = 4
_QUESTION_KINDS = ("ask-question", "question-when-invited")
_RESPONSE_KINDS = ("respond",) + _QUESTION_KINDS
_TOPIC_KINDS = ("initiate-topic", "join-topic", "exit-topic")
_BROADCAST_KINDS = ("broadcast", "post-artifact")


def estimate_budget(n_agents: float, horizon: float, granularity: float, c_step: float) -> float:
    """B = N * H * (1 / dt) * c_step."""
    for name, value in (("N", n_agents), ("H", horizon), ("dt", granularity), ("c_step", c_step)):
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            raise ValidationError(f"{name} must be > 0, got {value!r}", name)
    return n_agents * horizon * (1.0 / granularity) * c_step


def _lesson_id(scenery: Scenery, index: int) -> str:
    lesson = scenery.lesson or {}
    return str(lesson.get("id", f"{scenery.id}#{index}"))


def scene_dict(index: int, scenery: Scenery, t: int) -> dict[str, Any]:
    scene: dict[str, Any] = {
        "index": index,
        "id": scenery.id,
        "template": scenery.template,
        "start": t,
        "steps": 0,
        "groups": {f"group-{i + 1}": list(g) for i, g in enumerate(scenery.groups)},
    }
    if scenery.lesson is not None:
        lesson = scenery.lesson
        teacher = lesson.get("teacher") or (scenery.teachers[0] if scenery.teachers else None)
        scene["phase"] = "planning"
        scene["elapsed"] = 0
        scene["lesson"] = {
            "id": _lesson_id(scenery, index),
            "teacher": teacher,
            "objectives": list(lesson.get("objectives", ())),
            "budget": int(lesson.get("budget", 10)),
            "start": {},
            "actions": [],
        }
    return scene


def initial_state(config: RunConfig) -> SimulationState:
    first = config.schedule.scenes[0]
    return SimulationState(
        t=0,
        students=dict(sorted(config.students.items())),
        teachers=dict(sorted(config.teachers.items())),
        scene=scene_dict(0, first, 0),
        ties={k: w for k, w in sorted(first.relations.items())},
        evidence={s: () for s in sorted(config.students)},
    )


def compress_span(
    state: SimulationState,
    span: int,
    updates: Mapping[str, Any] | None,
    *,
    scenery: Scenery,
    coefficients: Coefficients | None = None,
    seq: int = 0,
) -> tuple[SimulationState, TraceEvent]:
    """Apply batched mastery and tie updates for a span of steps as one event.

    ``updates`` may hold ``mastery`` entries ``{student, concept, q, r, s, d}``
    and ``ties`` entries ``{a, b, u, v, h}``. Either everything applies or a
    :class:`ValidationError` is raised and ``state`` is left untouched.
    """
    coefficients = coefficients or Coefficients()
    if scenery.rhythm.granularity != "compressed":
        raise ValidationError(f"scenery {scenery.id!r} is not compressed", "granularity")
    if not isinstance(span, int) or span < 1:
        raise ValidationError(f"span must be >= 1, got {span!r}", "span")
    updates = updates or {}
    students = dict(state.students)
    ties = dict(state.ties)
    try:
        for entry in updates.get("mastery", ()):
            sid = entry["student"]
            if sid not in students:
                raise ValidationError(f"unknown student {sid!r}", "summary.mastery")
            student = students[sid]
            graph = update_mastery(student.graph, entry["concept"], float(entry.get("q", 0.0)),
                                   float(entry.get("r", 0.0)), float(entry.get("d", 0.0)),
                                   float(entry.get("s", 0.0)), student.params)
            students[sid] = replace(student, graph=graph)
        known = set(students) | set(state.teachers)
        for entry in updates.get("ties", ()):
            a, b = entry["a"], entry["b"]
            if a not in known or b not in known:
                raise ValidationError(f"tie update on unknown agents {a!r}, {b!r}", "summary.ties")
            key = pair_key(a, b)
            ties[key] = update_tie(ties.get(key, 0.0), float(entry.get("u", 0.0)),
                                   float(entry.get("v", 0.0)), float(entry.get("h", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid summary update: {exc}", "summary") from exc
    for sid in scenery.students:
        if sid in students:
            students[sid] = apply_decay_tick(students[sid], span, coefficients.decay_unit)
    deltas: list[list[Any]] = []
    for sid in sorted(students):
        if students[sid] is not state.students[sid]:
            deltas.extend(student_deltas(sid, state.students[sid], students[sid]))
    deltas.extend(map_deltas(["ties"], state.ties, ties, lambda v: v))
    deltas.append([["t"], state.t, state.t + span])
    new = replace(state, t=state.t + span, students=students, ties=ties, pending=())
    event = TraceEvent(seq, state.t, "apply", "system", SYSTEM, (),
                       {"event": "compress", "span": span,
                        "updates": {"mastery": len(updates.get("mastery", ())),
                                    "ties": len(updates.get("ties", ()))}},
                       deltas)
    return new, event


class Simulator:
    """Drives one run. ``state`` is replaced field by field as deltas are emitted."""

    def __init__(self, config: RunConfig, policies: Mapping[str, Policy] | None = None) -> None:
        self.config = config
        self.coeffs = config.coefficients
        self.scenes = config.schedule.scenes
        coeff_table = self.coeffs.to_dict()
        if policies is None:
            policies = {aid: make_policy(b, coeff_table) for aid, b in sorted(config.bindings.items())}
        self.policies = dict(policies)
        self.rubric = Rubric(recency=self.coeffs.recency)
        self.state = initial_state(config)
        self.agents = config.agents
        self.row = {aid: i for i, aid in enumerate(self.agents)}
        self.seq = 0
        self.done = False
        self._events: list[TraceEvent] = []
        self._profile_cache: dict[str, tuple[Any, InferredProfile]] = {}
        self._initiation_cache: dict[str, dict[str, float]] = {}
        self._pool: ThreadPoolExecutor | None = None

    # ---------------------------------------------------------------- helpers

    @property
    def scenery(self) -> Scenery:
        return self.scenes[self.state.scene["index"]]

    def _emit(self, phase: str, channel: str, actor: str, payload: dict[str, Any],
              deltas: list[list[Any]] | None = None, targets: Sequence[str] = ()) -> int:
        seq = self.seq
        self.seq += 1
        self._events.append(TraceEvent(seq, self.state.t, phase, channel, actor, tuple(targets),
                                       payload, deltas or []))
        self.state.history = {"events": self.state.history["events"] + 1, "last": seq}
        return seq

    def _set_student(self, sid: str, new: StudentState, deltas: list[list[Any]]) -> None:
        old = self.state.students[sid]
        if new is old:
            return
        deltas.extend(student_deltas(sid, old, new))
        self.state.students = dict(self.state.students)
        self.state.students[sid] = new

    def _set_teacher(self, tid: str, new: TeacherState, deltas: list[list[Any]]) -> None:
        old = self.state.teachers[tid]
        deltas.extend(teacher_deltas(tid, old, new))
        self.state.teachers = dict(self.state.teachers)
        self.state.teachers[tid] = new

    def _set_tie(self, key: str, value: float, deltas: list[list[Any]]) -> None:
        old = self.state.ties.get(key)
        if old == value or (old is None and value == 0.0):
            return
        deltas.append([["ties", key], old, value])
        self.state.ties = dict(self.state.ties)
        self.state.ties[key] = value

    def _set_scene(self, key: str, value: Any, deltas: list[list[Any]]) -> None:
        old = self.state.scene.get(key)
        deltas.append([["scene", key], old, value])
        self.state.scene = dict(self.state.scene)
        if value is None:
            del self.state.scene[key]
        else:
            self.state.scene[key] = value

    def _set_group(self, topic: str, members: list[str] | None, deltas: list[list[Any]]) -> None:
        groups = dict(self.state.scene["groups"])
        old = groups.get(topic)
        if members:
            groups[topic] = sorted(members)
        else:
            groups.pop(topic, None)
        deltas.append([["scene", "groups", topic], old, groups.get(topic)])
        self.state.scene = dict(self.state.scene)
        self.state.scene["groups"] = groups

    def _add_evidence(self, sid: str, item: EvidenceItem, deltas: list[list[Any]]) -> None:
        items = self.state.evidence.get(sid, ())
        deltas.append([["evidence", sid, len(items)], None, item.to_dict()])
        self.state.evidence = dict(self.state.evidence)
        self.state.evidence[sid] = items + (item,)

    def _remember(self, sid: str, record: MemoryRecord, deltas: list[list[Any]]) -> None:
        student = self.state.students.get(sid)
        if student is None:
            return
        self._set_student(sid, append_memory(student, record, self.coeffs.memory_capacity), deltas)

    def _profiles(self, students: Sequence[str]) -> list[InferredProfile]:
        out = []
        for sid in students:
            items = self.state.evidence.get(sid, ())
            cached = self._profile_cache.get(sid)
            if cached is None or cached[0] is not items:
                cached = (items, infer_profile(items, self.rubric, sid))
                self._profile_cache[sid] = cached
            out.append(cached[1])
        return out

    def _initiation(self, scenery: Scenery) -> dict[str, float]:
        cached = self._initiation_cache.get(scenery.id)
        if cached is None:
            cached = {a: scenery.prior.initiation(a) for a in scenery.participants}
            self._initiation_cache[scenery.id] = cached
        return cached

    def _group_of(self, agent: str) -> str | None:
        for topic, members in self.state.scene["groups"].items():
            if agent in members:
                return topic
        return None

    # ------------------------------------------------------------------ step

    def step(self) -> list[TraceEvent]:
        """Advance one step (or one compressed span); returns the events emitted."""
        self._events = []
        scenery = self.scenery
        if scenery.rhythm.granularity == "compressed":
            self._compressed_step(scenery)
        else:
            self._turn_step(scenery)
        return self._events

    def _compressed_step(self, scenery: Scenery) -> None:
        scene = self.state.scene
        done = scene["steps"]
        remaining = max(1, scenery.rhythm.steps - done)
        index = scene.get("summary_index", 0)
        if index < len(scenery.summary):
            entry = scenery.summary[index]
            span = int(entry.get("span", 1))
        else:
            entry, span = {}, remaining
        span = max(1, min(span, remaining, self.config.horizon - self.state.t))
        new, event = compress_span(self.state, span, entry, scenery=scenery,
                                   coefficients=self.coeffs, seq=self.seq)
        history = self.state.history
        self.state = new
        self.state.history = history
        deltas = event.deltas
        self.state.scene = dict(self.state.scene)
        deltas.append([["scene", "steps"], done, done + span])
        self.state.scene["steps"] = done + span
        old_index = scene.get("summary_index")
        deltas.append([["scene", "summary_index"], old_index, index + 1])
        self.state.scene["summary_index"] = index + 1
        self.seq += 1
        event.step = new.t - span
        self._events.append(event)
        self.state.history = {"events": history["events"] + 1, "last": event.seq}
        if self.state.scene["steps"] >= scenery.rhythm.steps:
            self._end_scene()

    def _turn_step(self, scenery: Scenery) -> None:
        t = self.state.t
        participants = sorted(scenery.participants)
        draws = np.random.default_rng([self.config.seed, t]).random((len(self.agents), N_DRAWS))
        phase = self.state.scene.get("phase")

        # phase 1: observe
        profiles = self._profiles(scenery.students) if scenery.teachers else []
        observations = {aid: self._observe(aid, scenery, draws[self.row[aid]], profiles)
                        for aid in participants}
        self._emit("observe", "system", SYSTEM, {
            "event": "observe",
            "visible": {aid: [e.seq for e in observations[aid].visible_events] for aid in participants},
        })

        # phase 2: act
        decisions = self._collect(observations)
        chosen: dict[str, Action] = {}
        for aid in participants:
            outcome = decisions[aid]
            if isinstance(outcome, PolicyFailure) or isinstance(outcome, Exception) and not isinstance(
                    outcome, Violation):
                kind = getattr(outcome, "kind", "error")
                self._emit("act", "system", aid, {"event": "failure", "kind": kind, "message": str(outcome)})
                chosen[aid] = Action(NOOP, rationale=f"substitute after {kind}")
                continue
            if isinstance(outcome, Violation):
                self._emit("act", "system", aid, {"event": "violation", "kind": outcome.kind or "violation",
                                                  "message": outcome.reason})
                chosen[aid] = Action(NOOP, rationale="substitute after violation")
                continue
            for clamp in outcome.clamps:
                self._emit("act", "system", aid, dict({"event": "clamp"}, **clamp))
            action = outcome.action
            chosen[aid] = action
            if action.kind != NOOP:
                self._emit("act", self._channel(scenery, aid, action), aid,
                           {"event": "action", "action": action.to_dict()},
                           targets=[action.target] if action.target else [])

        # phase 3: apply
        pending = []
        if phase == "planning":
            self._plan(scenery)
        for aid in participants:
            visible = self._apply(aid, chosen[aid], scenery, phase, chosen, profiles)
            if visible is not None:
                pending.append(visible)
        self.state.pending = tuple(pending)

        # phase 4: log
        self._log_phase(scenery)

    def _observe(self, aid: str, scenery: Scenery, row: np.ndarray,
                 profiles: list[InferredProfile]) -> Observation:
        scene = self.state.scene
        lesson = scene.get("lesson")
        group = self._group_of(aid)
        focus = list(lesson["objectives"]) if lesson else ([group] if group else [])
        obs = build_observation(self.state, scenery, aid, self.coeffs.retrieve_k, focus)
        view: dict[str, Any] = {"draws": [float(x) for x in row]}
        student = self.state.students.get(aid)
        if student is not None:
            ties = {}
            for key, w in self.state.ties.items():
                a, _, b = key.partition("|")
                if a == aid:
                    ties[b] = w
                elif b == aid:
                    ties[a] = w
            view.update(
                mastery=dict(student.graph.mastery),
                misconceptions=[{"id": m.id, "concept": m.concept, "persistence": m.persistence}
                                for m in student.misconceptions.values()],
                workflows=dict(student.workflows),
                group=group,
                topics={t: list(m) for t, m in sorted(scene["groups"].items())},
                ties=ties,
                initiation=self._initiation(scenery).get(aid, 0.0),
                max_group=scenery.norms.max_group_size,
                interests=list(student.params.interests),
            )
        teacher = self.state.teachers.get(aid)
        if teacher is not None:
            view.update(teacher=teacher, profiles=list(profiles), headroom=self.coeffs.headroom,
                        lesson=None if lesson is None else {"id": lesson["id"],
                                                            "objectives": list(lesson["objectives"])})
        return replace(obs, self_view=view)

    def _collect(self, observations: Mapping[str, Observation]) -> dict[str, Any]:
        out: dict[str, Any] = {}
        remote = [aid for aid in observations if getattr(self.policies.get(aid), "remote", False)]
        futures = {}
        if remote:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=max(4, len(remote)))
            for aid in remote:
                futures[aid] = self._pool.submit(self._decide, aid, observations[aid])
        for aid in sorted(observations):
            if aid not in futures:
                out[aid] = self._decide(aid, observations[aid])
        for aid, fut in futures.items():
            out[aid] = fut.result()
        return out

    def _decide(self, aid: str, obs: Observation) -> Any:
        policy = self.policies.get(aid)
        if policy is None:
            return PolicyFailure(f"no policy bound to {aid!r}")
        try:
            result = policy.decide(obs)
        except (PolicyFailure, Violation) as exc:
            return exc
        except Exception as exc:  # a misbehaving provider never aborts the step
            log.warning("policy for %s raised %r", aid, exc)
            return exc
        return result if isinstance(result, Decision) else Decision(result)

    def _channel(self, scenery: Scenery, aid: str, action: Action) -> str:
        if action.kind in _TOPIC_KINDS:
            return "system"
        if action.kind == "group-message":
            return "group-chat"
        if action.kind in _BROADCAST_KINDS or action.target in (None, BROADCAST):
            return "broadcast" if scenery.participants.get(aid) == "teacher" or action.kind in _BROADCAST_KINDS \
                else "system"
        return "one-to-one"

    # ------------------------------------------------------------- planning

    def _plan(self, scenery: Scenery) -> None:
        lesson = self.state.scene["lesson"]
        tid = lesson["teacher"]
        if tid not in self.state.teachers:
            return
        teacher = self.state.teachers[tid]
        policy = self.policies.get(tid)
        planner = policy if hasattr(policy, "plan") else None
        profiles = self._profiles(scenery.students)
        try:
            plan, repairs = plan_lesson(teacher, lesson["objectives"], profiles, lesson["budget"], planner)
        except (ValidationError, PolicyFailure) as exc:
            self._emit("apply", "system", tid, {"event": "plan-failure", "message": str(exc)})
            return
        for note in repairs:
            self._emit("apply", "system", tid, {"event": "plan-repair", "message": note})
        deltas: list[list[Any]] = []
        self._set_teacher(tid, replace(teacher, plan=plan), deltas)
        start = {sid: {c: self.state.students[sid].graph.mastery[c]
                       for c in sorted(self.state.students[sid].graph.mastery)}
                 for sid in scenery.students}
        deltas.append([["scene", "lesson", "start"], lesson["start"], start])
        self.state.scene = dict(self.state.scene)
        self.state.scene["lesson"] = dict(lesson, start=start)
        self._emit("apply", "system", tid, {"event": "plan", "lesson": lesson["id"],
                                            "plan": plan.to_dict()}, deltas)

    # ---------------------------------------------------------------- apply

    def _repair(self, aid: str, action: Action, reason: str, substitute: str) -> None:
        self._emit("apply", "system", aid, {"event": "repair", "reason": reason,
                                            "action": action.to_dict(), "substitute": substitute})

    def _apply(self, aid: str, action: Action, scenery: Scenery, phase: str | None,
               chosen: Mapping[str, Action], profiles: list[InferredProfile]) -> Any:
        if action.kind == NOOP:
            return None
        role = scenery.participants[aid]
        substitute = "feedback" if role == "teacher" else NOOP
        if action.kind not in admissible_actions(scenery, role, phase):
            self._repair(aid, action, f"{action.kind!r} is not admissible for {role} during {phase}", substitute)
            return None
        try:
            if role == "teacher":
                return self._apply_teacher(aid, action, scenery, phase, chosen, profiles)
            return self._apply_student(aid, action, scenery, phase, chosen)
        except (ChannelError, ValidationError, PhaseError) as exc:
            self._repair(aid, action, str(exc), substitute)
            return None

    def _uptake(self, sid: str, concept: str, chosen: Mapping[str, Action]) -> float:
        action = chosen.get(sid)
        if action is None:
            return 0.0
        value = action.payload.get("uptake", {}).get(concept) if isinstance(
            action.payload.get("uptake"), Mapping) else None
        if value is None and action.concept == concept:
            value = action.payload.get("r")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            return 0.0
        return clip01(float(value))

    def _unit(self, action: Action, name: str, default: float) -> float:
        value = action.payload.get(name, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name}={value!r} outside [0, 1]", f"payload.{name}")
        return float(value)

    def _text(self, action: Action) -> str:
        return str(action.payload.get("text", ""))

    def _apply_teacher(self, aid: str, action: Action, scenery: Scenery, phase: str | None,
                       chosen: Mapping[str, Action], profiles: list[InferredProfile]) -> Any:
        teacher = self.state.teachers[aid]
        concept = action.concept
        if concept is not None and concept not in teacher.knowledge:
            raise ValidationError(f"concept {concept!r} is not in {aid}'s declarative knowledge", "concept")
        target = action.target
        if target in (None, BROADCAST):
            delivery = broadcast(scenery, aid, action.payload)
        elif target in scenery.participants:
            delivery = one_to_one(scenery, aid, target, action.payload, phase)
        else:
            raise ChannelError(f"target {target!r} is not present")
        q0, s0 = EXPOSURE.get(action.kind, (0.0, 0.0))
        q = self._unit(action, "q", q0)
        s = self._unit(action, "s", s0)
        demand = action.demand
        if demand is None and concept is not None:
            demand = teacher.knowledge[concept].demand(action.kind)
        if demand is not None and not (math.isfinite(demand) and demand >= 0.0):
            raise ValidationError(f"demand {demand!r} must be >= 0", "demand")
        mid = action.payload.get("misconception")
        evidence_strength = self._unit(action, "e", q) if action.kind == "misconception-challenge" else 0.0

        payload: dict[str, Any] = {"event": "apply", "kind": action.kind, "concept": concept,
                                   "demand": demand, "q": q, "s": s}
        deltas: list[list[Any]] = []
        if concept is not None and demand is not None:
            estimate = action.payload.get("estimate")
            if not isinstance(estimate, (int, float)) or isinstance(estimate, bool):
                estimate = class_estimate(profiles, concept)
            estimate = clip01(float(estimate))
            score = zpd_score(demand, estimate, self.coeffs.headroom, self.coeffs.band)
            actual = {}
            for sid in delivery.recipients:
                student = self.state.students.get(sid)
                if student is not None and concept in student.graph.nodes:
                    actual[sid] = zpd_score(demand, student.graph.mastery[concept],
                                            student.params.delta, student.params.sigma)
            payload["zpd"] = {"estimate": estimate, "estimated": score,
                              "challenge": classify_challenge(score, demand, estimate,
                                                              self.coeffs.theta_zone),
                              "actual": actual}
        text = self._text(action)
        tags = frozenset({concept}) if concept else frozenset()
        exposed = []
        for sid in delivery.recipients:
            student = self.state.students.get(sid)
            if student is None:
                continue
            new = student
            if concept is not None and concept in student.graph.nodes and (q > 0.0 or s > 0.0):
                r = self._uptake(sid, concept, chosen)
                new = replace(new, graph=update_mastery(new.graph, concept, q, r, 0.0, s, new.params))
                exposed.append(sid)
            if action.kind == "misconception-challenge" and sid == target and mid in new.misconceptions:
                m = new.misconceptions[mid]
                new = challenge_misconception(new, mid, evidence_strength, self.coeffs.challenge_coef,
                                              self.coeffs.retire_below)
                after = new.misconceptions.get(mid)
                retired = after is None
                payload["challenge"] = {"misconception": mid, "before": m.persistence,
                                        "after": 0.0 if retired else after.persistence, "retired": retired}
                self._set_student(sid, new, deltas)
                new = self.state.students[sid]
                self._add_evidence(sid, EvidenceItem(self.state.t, "reaction to challenge", {}, (
                    (mid, m.concept, 0.0 if retired else after.persistence, not retired),)), deltas)
            self._set_student(sid, new, deltas)
            self._remember(sid, MemoryRecord(self.state.t, aid, text, tags, 0.6), deltas)
        payload["exposed"] = exposed
        seq = self._emit("apply", delivery.channel, aid, payload, deltas, delivery.recipients)
        lesson = self.state.scene.get("lesson")
        if lesson is not None and lesson.get("teacher") == aid:
            record = {"seq": seq, "step": self.state.t, "kind": action.kind, "concept": concept,
                      "target": target or BROADCAST}
            if "zpd" in payload:
                record["zpd"] = payload["zpd"]["estimated"]
            extra = [[["scene", "lesson", "actions", len(lesson["actions"])], None, record]]
            self.state.scene = dict(self.state.scene)
            self.state.scene["lesson"] = dict(lesson, actions=lesson["actions"] + [record])
            self._events[-1].deltas.extend(extra)
        return delivery.visible_event(seq, self.state.t, action.kind, text, concept, target)

    def _apply_student(self, aid: str, action: Action, scenery: Scenery, phase: str | None,
                       chosen: Mapping[str, Action]) -> Any:
        kind = action.kind
        if kind in _TOPIC_KINDS:
            self._apply_topic(aid, action, scenery)
            return None
        student = self.state.students[aid]
        text = self._text(action)
        concept = action.concept
        deltas: list[list[Any]] = []
        payload: dict[str, Any] = {"event": "apply", "kind": kind, "concept": concept}
        if kind in _RESPONSE_KINDS or kind == "peer-explain":
            delivery = one_to_one(scenery, aid, action.target, action.payload, phase)
            target = action.target
            if kind == "peer-explain":
                listener = self.state.students.get(target)
                if listener is None:
                    raise ChannelError(f"peer-explain target {target!r} is not a student")
                if concept is None or concept not in listener.graph.nodes:
                    raise ValidationError(f"concept {concept!r} unknown to {target}", "concept")
                q = self._unit(action, "q", 0.5)
                s = self._unit(action, "s", 0.0)
                r = self._uptake(target, concept, chosen)
                before = listener.graph.mastery[concept]
                listener = replace(listener, graph=update_mastery(listener.graph, concept, q, r, 0.0, s,
                                                                  listener.params))
                self._set_student(target, listener, deltas)
                payload.update(q=q, s=s, r=r, gain=listener.graph.mastery[concept] - before)
                self._tie_event(aid, target, hostile=False, deltas=deltas)
                self._remember(target, MemoryRecord(self.state.t, aid, text,
                                                    frozenset({concept}), 0.6), deltas)
            elif concept is not None and concept in student.graph.nodes:
                correct = bool(action.payload.get("correct", False)) if kind == "respond" else None
                score = self.rubric.score(kind, correct)
                revealed = []
                for mid in action.payload.get("misconceptions", ()) or ():
                    m = student.misconceptions.get(mid)
                    if m is not None:
                        revealed.append((m.id, m.concept, m.persistence, True))
                scores = {concept: score} if score is not None else {}
                self._add_evidence(aid, EvidenceItem(self.state.t, text, scores, tuple(revealed)), deltas)
                payload.update(correct=correct, score=score, revealed=[m[0] for m in revealed])
            tags = frozenset({concept}) if concept else frozenset()
            self._remember(aid, MemoryRecord(self.state.t, aid, text, tags, 0.6), deltas)
        elif kind == "group-message":
            topic = self._group_of(aid)
            if topic is None:
                raise ChannelError(f"{aid} is not in a group")
            delivery = group_chat(scenery, self.state.scene["groups"][topic], aid, action.payload, phase)
            hostile = bool(action.payload.get("hostile", False))
            for other in delivery.recipients:
                self._tie_event(aid, other, hostile=hostile, deltas=deltas)
            tags = frozenset({topic})
            self._remember(aid, MemoryRecord(self.state.t, aid, text, tags, 0.5), deltas)
            for other in delivery.recipients:
                self._remember(other, MemoryRecord(self.state.t, aid, text, tags, 0.8 if hostile else 0.5),
                               deltas)
            payload.update(topic=topic, hostile=hostile)
            target = topic
        elif kind in _BROADCAST_KINDS:
            delivery = broadcast(scenery, aid, action.payload)
            tags = frozenset({concept}) if concept else frozenset()
            self._remember(aid, MemoryRecord(self.state.t, aid, text, tags, 0.5), deltas)
            for other in delivery.recipients:
                self._remember(other, MemoryRecord(self.state.t, aid, text, tags, 0.4), deltas)
            target = BROADCAST
        else:
            raise ValidationError(f"no handler for student action {kind!r}", "kind")
        seq = self._emit("apply", delivery.channel, aid, payload, deltas, delivery.recipients)
        return delivery.visible_event(seq, self.state.t, kind, text, concept, target)

    def _tie_event(self, a: str, b: str, *, hostile: bool, deltas: list[list[Any]]) -> None:
        sa, sb = self.state.students.get(a), self.state.students.get(b)
        overlap = 0
        if sa is not None and sb is not None:
            overlap = len(set(sa.params.interests) & set(sb.params.interests))
        u = 0.0 if hostile else self.coeffs.tie_affiliative
        v = self.coeffs.tie_conflict if hostile else 0.0
        h = self.coeffs.tie_homophily * overlap
        key = pair_key(a, b)
        self._set_tie(key, update_tie(self.state.ties.get(key, 0.0), u, v, h), deltas)

    def _apply_topic(self, aid: str, action: Action, scenery: Scenery) -> None:
        groups = self.state.scene["groups"]
        current = self._group_of(aid)
        deltas: list[list[Any]] = []
        target = action.target
        if action.kind == "exit-topic":
            if current is None:
                raise ValidationError(f"{aid} is not in a group", "target")
            self._set_group(current, [m for m in groups[current] if m != aid], deltas)
            topic = current
        elif action.kind == "initiate-topic":
            if not isinstance(target, str) or not target or target in groups or target in scenery.participants:
                raise ValidationError(f"cannot open topic {target!r}", "target")
            if current is not None:
                self._set_group(current, [m for m in groups[current] if m != aid], deltas)
            self._set_group(target, [aid], deltas)
            topic = target
        else:
            if target not in groups:
                raise ValidationError(f"no open topic {target!r}", "target")
            if target == current:
                raise ValidationError(f"{aid} is already in {target!r}", "target")
            if len(groups[target]) >= scenery.norms.max_group_size:
                raise ChannelError(f"topic {target!r} is full")
            if current is not None:
                self._set_group(current, [m for m in self.state.scene["groups"][current] if m != aid], deltas)
            self._set_group(target, list(self.state.scene["groups"][target]) + [aid], deltas)
            topic = target
        members = self.state.scene["groups"].get(topic, [])
        self._emit("apply", "system", aid, {"event": "apply", "kind": action.kind, "topic": topic},
                   deltas, [m for m in members if m != aid])

    # ------------------------------------------------------------------ log

    def _log_phase(self, scenery: Scenery) -> None:
        deltas: list[list[Any]] = []
        for sid in scenery.students:
            student = self.state.students[sid]
            self._set_student(sid, apply_decay_tick(student, 1, self.coeffs.decay_unit), deltas)
        scene = self.state.scene
        end_scene = False
        steps = scene["steps"] + 1
        self._set_scene("steps", steps, deltas)
        lesson = scene.get("lesson")
        eval_signal = None
        if lesson is not None:
            eval_signal = self._eval_signal(scenery)
            phase = scene["phase"]
            tid = lesson["teacher"]
            plan = self.state.teachers[tid].plan if tid in self.state.teachers else None
            elapsed = scene["elapsed"] + (0 if phase == "planning" else 1)
            try:
                new_phase = cycle_advance(phase, plan, elapsed)
                while new_phase in MOVES and plan is not None and plan.budget_for(new_phase) == 0:
                    new_phase = cycle_advance(new_phase, plan, 0)
            except PhaseError as exc:
                self._emit("log", "system", SYSTEM, {"event": "phase-error", "message": str(exc)})
                new_phase = "reflection"
            if new_phase != phase:
                self._set_scene("phase", new_phase, deltas)
                self._set_scene("elapsed", 0, deltas)
                self._emit("log", "system", SYSTEM, {"event": "phase", "from": phase, "to": new_phase}, deltas)
                deltas = []
                if new_phase == "reflection":
                    self._reflect(scenery)
                    end_scene = True
            else:
                self._set_scene("elapsed", elapsed, deltas)
        elif steps >= scenery.rhythm.steps:
            end_scene = True
        payload: dict[str, Any] = {"event": "step-end"}
        if eval_signal is not None:
            payload["eval"] = eval_signal
        deltas.append([["t"], self.state.t, self.state.t + 1])
        self._emit("log", "system", SYSTEM, payload, deltas)
        self.state.t += 1
        if end_scene:
            self._end_scene()

    def _eval_signal(self, scenery: Scenery) -> dict[str, Any]:
        lesson = self.state.scene["lesson"]
        out = {}
        for sid in scenery.students:
            student = self.state.students[sid]
            concepts = [c for c in lesson["objectives"] if c in student.graph.nodes]
            if concepts:
                score = math.fsum(student.graph.mastery[c] for c in concepts) / len(concepts)
                out[sid] = [lesson["id"], clip01(score)]
        return out

    def _reflect(self, scenery: Scenery) -> None:
        lesson = self.state.scene["lesson"]
        tid = lesson["teacher"]
        teacher = self.state.teachers.get(tid)
        if teacher is None:
            return
        students = scenery.students
        deltas_k: dict[str, dict[str, float]] = {}
        values = []
        high = low = misc = 0
        for sid in students:
            student = self.state.students[sid]
            start = lesson["start"].get(sid, {})
            deltas_k[sid] = {c: student.graph.mastery[c] - start[c] for c in sorted(start)
                             if c in student.graph.mastery}
            for mu in student.graph.mastery.values():
                values.append(mu)
                high += mu >= 0.8
                low += mu < 0.2
            misc += len(student.misconceptions)
        evaluation = {"avg_mastery": math.fsum(values) / len(values) if values else 0.0,
                      "high_nodes": float(high), "low_nodes": float(low), "misconceptions": float(misc)}
        record = ReflectionRecord(
            lesson_id=lesson["id"],
            scenery_id=scenery.id,
            students=tuple(students),
            plan=teacher.plan,
            profiles=tuple(self._profiles(students)),
            actions=tuple(lesson["actions"]),
            knowledge_deltas=deltas_k,
            evaluation=evaluation,
        )
        deltas: list[list[Any]] = []
        self._set_teacher(tid, reflect(teacher, record), deltas)
        self._emit("log", "system", tid, {"event": "reflect", "lesson": lesson["id"],
                                          "evaluation": evaluation}, deltas)

    def _end_scene(self) -> None:
        index = self.state.scene["index"]
        self._emit("log", "system", SYSTEM, {"event": "scene-end", "scene": self.state.scene["id"]})
        if index + 1 >= len(self.scenes):
            deltas: list[list[Any]] = []
            self._set_scene("complete", True, deltas)
            self._events[-1].deltas.extend(deltas)
            self.done = True
            return
        nxt = self.scenes[index + 1]
        new_scene = scene_dict(index + 1, nxt, self.state.t)
        deltas = map_deltas(["scene"], self.state.scene, new_scene, lambda v: v)
        self.state.scene = new_scene
        self.state.pending = ()
        self._emit("log", "system", SYSTEM, {"event": "scene-start", "scene": nxt.id}, deltas)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None


def step(sim: Simulator) -> tuple[SimulationState, list[TraceEvent]]:
    """Advance ``sim`` by one step; returns the new state and the events emitted."""
    events = sim.step()
    return sim.state, events


def budget_estimate(config: RunConfig, policies: Mapping[str, Policy]) -> float:
    n = len(config.agents)
    costs = [float(getattr(policies.get(a), "cost", 1.0)) for a in config.agents]
    c_step = math.fsum(costs) / len(costs) if costs else 1.0
    return estimate_budget(n, config.horizon, config.granularity, c_step)


def trace_header(config: RunConfig, state: SimulationState) -> dict[str, Any]:
    return {
        "format": TRACE_FORMAT,
        "version": FORMAT_VERSION,
        "engine": ENGINE_VERSION,
        "name": config.name,
        "config_hash": digest(config.source) if config.source else None,
        "seed": config.seed,
        "horizon": config.horizon,
        "granularity": config.granularity,
        "scenery_ids": [s.id for s in config.schedule.scenes],
        "agents": config.agents,
        "initial": state.to_dict(),
    }


def run(config: RunConfig, policies: Mapping[str, Policy] | None = None,
        sink: TraceWriter | None = None) -> Trace:
    """Execute the schedule to the horizon or lesson completion.

    Rejects the launch with :class:`BudgetExceeded` before anything is written
    when the budget estimate exceeds the cap. On an unexpected error the
    partial trace is flushed and marked incomplete, then the error propagates.
    """
    sim = Simulator(config, policies)
    if config.horizon > 0:
        estimate = budget_estimate(config, sim.policies)
        if estimate > config.budget_cap:
            raise BudgetExceeded(estimate, config.budget_cap)
    header = trace_header(config, sim.state)
    events: list[TraceEvent] = []
    if sink is not None:
        sink.header(header)
    try:
        while sim.state.t < config.horizon and not sim.done:
            batch = sim.step()
            events.extend(batch)
            if sink is not None:
                for e in batch:
                    sink.event(e)
    except BaseException:
        sim.close()
        if sink is not None:
            sink.abort()
        raise
    sim.close()
    final = sim.state.to_dict()
    if sink is not None:
        sink.finish(final)
    return Trace(header, events, final)


__all__ = [
    "EdusimError",
    "Simulator",
    "budget_estimate",
    "compress_span",
    "estimate_budget",
    "initial_state",
    "run",
    "step",
    "trace_header",
]
