"""Built-in policies: scripted and adaptive teachers, rule-based and scripted students.

Every built-in reads only its observation. Randomness comes from the
per-step uniform draws the engine places in ``observation.self_view["draws"]``,
so a decision is a pure function of the binding, the observation, and (for
scripts) the script index.

Keys the engine provides in ``self_view``:

- all agents: ``draws``
- students: ``mastery``, ``misconceptions``, ``group``, ``topics``, ``ties``,
  ``initiation``, ``max_group``
- teachers: ``teacher`` (TeacherState), ``profiles`` (InferredProfile list)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from ..actions import BROADCAST, Action, listen
from ..cognition import InferredProfile, Observation
from ..pedagogy import EXPOSURE, MOVES, LessonPlan, TeacherState, adaptive_action, select_action
from ..scenery import INSTRUCTIONAL_KINDS


def _action_from_entry(entry: Mapping[str, Any], target: str | None) -> Action:
    payload = dict(entry.get("payload", {}))
    kind = entry["kind"]
    if kind in EXPOSURE:
        q, s = EXPOSURE[kind]
        payload.setdefault("q", q)
        payload.setdefault("s", s)
    demand = entry.get("demand")
    return Action(kind, target, entry.get("concept"), None if demand is None else float(demand),
                  payload, str(entry.get("rationale", "scripted")))


class _Script:
    """A fixed list of actions with a cursor; the cursor is the only hidden state."""

    def __init__(self, script: Sequence[Mapping[str, Any]], loop: bool) -> None:
        self.script = tuple(script)
        self.loop = loop
        self.index = 0

    def next(self) -> Mapping[str, Any] | None:
        if not self.script:
            return None
        if self.index >= len(self.script):
            if not self.loop:
                return None
            self.index = 0
        entry = self.script[self.index]
        self.index += 1
        return entry


class ScriptedTeacher:
    """Replays a fixed lesson script during delivery moves; listens otherwise."""

    cost = 1.0
    remote = False

    def __init__(self, script: Sequence[Mapping[str, Any]], loop: bool = False) -> None:
        self._script = _Script(script, loop)

    @property
    def index(self) -> int:
        return self._script.index

    def decide(self, observation: Observation) -> Action:
        if observation.scenery_summary.get("phase") not in MOVES:
            return listen("outside delivery")
        entry = self._script.next()
        if entry is None:
            return listen("script exhausted")
        return _action_from_entry(entry, entry.get("target", BROADCAST))

    def plan(self, teacher: TeacherState, objectives: Sequence[str],
             profiles: Sequence[InferredProfile], budget: int) -> LessonPlan | None:
        return None


class AdaptiveTeacher:
    """Misconception-first, then argmin estimated mastery at peak-ZPD demand."""

    cost = 1.0
    remote = False

    def __init__(self, headroom: float | None = None) -> None:
        self.headroom = headroom

    def decide(self, observation: Observation) -> Action:
        phase = observation.scenery_summary.get("phase")
        if phase not in MOVES:
            return listen("outside delivery")
        view = observation.self_view
        teacher: TeacherState = view["teacher"]
        profiles: Sequence[InferredProfile] = view.get("profiles", ())
        headroom = self.headroom if self.headroom is not None else view.get("headroom", 0.15)
        if observation.scenery is None:
            return adaptive_action(teacher, profiles, phase, headroom)
        action, _ = select_action(teacher, profiles, observation.scenery, phase, headroom=headroom)
        return action

    def plan(self, teacher: TeacherState, objectives: Sequence[str],
             profiles: Sequence[InferredProfile], budget: int) -> LessonPlan | None:
        return None


@dataclass
class RuleStudent:
    """Answers from mastery: correct iff mu >= 0.5, questions below 0.2, uptake r = mu.

    At recess it joins or starts topics with its initiation probability and
    leaves groups more readily when it is peripheral or sees hostility.
    """

    correct_at: float = 0.5
    question_below: float = 0.2
    uptake: float | None = None
    post_rate: float = 0.5
    join_existing: float = 0.7
    cost: float = field(default=1.0, init=False)
    remote: bool = field(default=False, init=False)

    def decide(self, observation: Observation) -> Action:
        view = observation.self_view
        mastery: Mapping[str, float] = view.get("mastery", {})
        uptake = {c: (self.uptake if self.uptake is not None else mu) for c, mu in mastery.items()}
        if "initiate-topic" in observation.admissible:
            return self._recess(observation, uptake)
        return self._lesson(observation, mastery, uptake)

    # lesson -------------------------------------------------------------

    def _lesson(self, obs: Observation, mastery: Mapping[str, float], uptake: dict[str, float]) -> Action:
        cue = None
        for event in reversed(obs.visible_events):
            if event.kind in INSTRUCTIONAL_KINDS and event.speaker != obs.observer:
                cue = event
                break
        base = {"uptake": uptake}
        if cue is None or cue.concept not in mastery:
            return Action("listen", payload=base, rationale="no cue")
        concept = cue.concept
        mu = mastery[concept]
        invited = cue.kind == "questioning" and cue.target in (BROADCAST, obs.observer)
        held = [m["id"] for m in obs.self_view.get("misconceptions", ()) if m["concept"] == concept]
        payload = dict(base, r=uptake[concept], misconceptions=held)
        adm = obs.admissible
        if mu >= self.correct_at and "respond" in adm:
            return Action("respond", cue.speaker, concept,
                          payload=dict(payload, correct=True, text=f"answer on {concept}"),
                          rationale="mastery at or above correctness threshold")
        if mu < self.question_below:
            if "ask-question" in adm:
                kind = "ask-question"
            elif "question-when-invited" in adm:
                kind = "question-when-invited"
            else:
                return Action("listen", payload=base, rationale="no question channel")
            return Action(kind, cue.speaker, concept, payload=dict(payload, text=f"question on {concept}"),
                          rationale="mastery below question threshold")
        if invited and "respond" in adm:
            return Action("respond", cue.speaker, concept,
                          payload=dict(payload, correct=False, text=f"attempt on {concept}"),
                          rationale="invited while below correctness threshold")
        return Action("listen", payload=base, rationale="listening")

    # recess -------------------------------------------------------------

    def _recess(self, obs: Observation, uptake: dict[str, float]) -> Action:
        view = obs.self_view
        draws = view["draws"]
        p_init = float(view.get("initiation", 0.0))
        group = view.get("group")
        topics: Mapping[str, Sequence[str]] = view.get("topics", {})
        base = {"uptake": uptake}
        if group is None:
            if draws[0] >= p_init:
                return Action("listen", payload=base, rationale="not initiating")
            ties: Mapping[str, float] = view.get("ties", {})
            cap = int(view.get("max_group", 1))
            open_topics = [t for t, members in topics.items() if len(members) < cap]
            if open_topics and draws[1] < self.join_existing:
                best = min(open_topics, key=lambda t: (-sum(ties.get(m, 0.0) for m in topics[t]),
                                                       -len(topics[t]), t))
                return Action("join-topic", best, payload=base, rationale="joining highest-affinity topic")
            return Action("initiate-topic", f"topic-{obs.step}-{obs.observer}", payload=base,
                          rationale="starting a topic")
        hostile = any(e.payload.get("hostile") for e in obs.visible_events
                      if e.channel == "group-chat" and e.speaker != obs.observer)
        leave = max(0.05, 0.3 - p_init)
        if hostile:
            leave = max(leave, 0.6)
        if draws[0] < leave:
            return Action("exit-topic", group, payload=base, rationale="leaving")
        if draws[2] < self.post_rate:
            return Action("group-message", group, payload=dict(base, text=f"chat in {group}"),
                          rationale="chatting")
        return Action("listen", payload=base, rationale="listening in group")


class ScriptedStudent:
    """Replays a fixed student script; symbolic targets are resolved from the observation.

    ``@busiest`` is the largest topic the agent is not in, ``@group`` its own
    topic, ``@teacher`` the speaker of the latest instructional event.
    """

    cost = 1.0
    remote = False

    def __init__(self, script: Sequence[Mapping[str, Any]], loop: bool = False) -> None:
        self._script = _Script(script, loop)

    @property
    def index(self) -> int:
        return self._script.index

    def decide(self, observation: Observation) -> Action:
        entry = self._script.next()
        if entry is None:
            return listen("script exhausted")
        target = entry.get("target")
        if isinstance(target, str) and target.startswith("@"):
            target = _resolve(target, observation)
            if target is None and entry["kind"] in ("join-topic", "peer-explain", "respond"):
                return listen(f"{entry['target']} unresolved")
        return _action_from_entry(entry, target)


def _resolve(symbol: str, obs: Observation) -> str | None:
    view = obs.self_view
    if symbol == "@group":
        return view.get("group")
    if symbol == "@busiest":
        own = view.get("group")
        topics = {t: m for t, m in view.get("topics", {}).items() if t != own}
        if not topics:
            return None
        return min(topics, key=lambda t: (-len(topics[t]), t))
    if symbol == "@teacher":
        for event in reversed(obs.visible_events):
            if event.kind in INSTRUCTIONAL_KINDS:
                return event.speaker
        return None
    return None
