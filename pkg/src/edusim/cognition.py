"""Student-agent state and learning dynamics.

A student carries episodic memory, a weighted knowledge graph, a pool of
thinking workflows, structured misconceptions, and learner parameters. All
operations here are pure: they take a state and return a new one, leaving the
input untouched, so the engine can evaluate agents independently and merge the
results in a fixed order.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

from .errors import DuplicateIdError, MissingConceptError, UnknownIdError, ValidationError

if TYPE_CHECKING:  # pragma: no cover
    from .engine.state import SimulationState
    from .scenery import Scenery

RELATION_KINDS = ("prerequisite", "semantic")
WORKFLOW_KINDS = ("comparison", "causal-explanation", "evidence-evaluation", "spatial-reasoning")
MODALITIES = ("verbal", "visual", "kinesthetic", "mixed")

DEFAULT_DECAY_UNIT = 0.1
DEFAULT_CHALLENGE_COEF = 0.5
DEFAULT_RETIRE_BELOW = 0.05
DEFAULT_RECENCY = 0.8


def clip01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def _check_unit(value: float, name: str) -> None:
    if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0):
        raise ValidationError(f"must be in [0, 1], got {value!r}", name)


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KnowledgeGraph:
    """Concepts, prerequisite/semantic relations, and a mastery score per concept."""

    nodes: frozenset[str]
    edges: tuple[tuple[str, str, str], ...]
    mastery: Mapping[str, float]

    @classmethod
    def create(
        cls,
        mastery: Mapping[str, float],
        edges: Iterable[Sequence[str]] = (),
    ) -> "KnowledgeGraph":
        graph = cls(
            nodes=frozenset(mastery),
            edges=tuple(sorted((a, b, kind) for a, b, kind in edges)),
            mastery={k: float(mastery[k]) for k in sorted(mastery)},
        )
        graph.validate()
        return graph

    def validate(self) -> None:
        if set(self.mastery) != set(self.nodes):
            raise ValidationError("every node needs exactly one mastery entry", "graph.mastery")
        for node, value in self.mastery.items():
            _check_unit(value, f"graph.mastery.{node}")
        children: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b, kind in self.edges:
            if kind not in RELATION_KINDS:
                raise ValidationError(f"unknown relation kind {kind!r}", "graph.edges")
            for end in (a, b):
                if end not in self.nodes:
                    raise MissingConceptError(f"edge endpoint {end!r} is not a node")
            if kind == "prerequisite":
                children[a].append(b)
        # prerequisite edges must be acyclic
        colour = dict.fromkeys(self.nodes, 0)
        for root in sorted(self.nodes):
            if colour[root]:
                continue
            stack = [(root, iter(children[root]))]
            colour[root] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    colour[node] = 2
                    stack.pop()
                elif colour[nxt] == 1:
                    raise ValidationError(f"prerequisite cycle through {nxt!r}", "graph.edges")
                elif colour[nxt] == 0:
                    colour[nxt] = 1
                    stack.append((nxt, iter(children[nxt])))

    def with_mastery(self, node: str, value: float) -> "KnowledgeGraph":
        mastery = dict(self.mastery)
        mastery[node] = value
        return replace(self, mastery=mastery)

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": sorted(self.nodes),
            "edges": [list(e) for e in self.edges],
            "mastery": {k: self.mastery[k] for k in sorted(self.mastery)},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KnowledgeGraph":
        mastery = dict(data.get("mastery", {}))
        for node in data.get("nodes", ()):
            mastery.setdefault(node, 0.0)
        return cls.create(mastery, data.get("edges", ()))


def _norm_text(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


@dataclass(frozen=True)
class Misconception:
    id: str
    concept: str
    held: str
    target: str
    persistence: float
    evidence: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _check_unit(self.persistence, f"misconception.{self.id}.persistence")
        if _norm_text(self.held) == _norm_text(self.target):
            raise ValidationError("held belief must differ from the target proposition",
                                  f"misconception.{self.id}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "concept": self.concept,
            "held": self.held,
            "target": self.target,
            "evidence": list(self.evidence),
            "persistence": self.persistence,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Misconception":
        return cls(
            id=data["id"],
            concept=data["concept"],
            held=data["held"],
            target=data["target"],
            persistence=float(data["persistence"]),
            evidence=tuple(data.get("evidence", ())),
        )


@dataclass(frozen=True)
class MemoryRecord:
    step: int
    source: str
    content: str
    tags: frozenset[str] = frozenset()
    salience: float = 0.5

    def __post_init__(self) -> None:
        _check_unit(self.salience, "memory.salience")

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "source": self.source,
            "content": self.content,
            "tags": sorted(self.tags),
            "salience": self.salience,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MemoryRecord":
        return cls(int(data["step"]), data["source"], data["content"],
                   frozenset(data.get("tags", ())), float(data.get("salience", 0.5)))


@dataclass(frozen=True)
class LearnerParams:
    """Growth rates (uptake, decay, scaffold), ZPD headroom/band, and stable attributes."""

    alpha: float = 0.1
    beta: float = 0.0
    gamma: float = 0.05
    delta: float = 0.15
    sigma: float = 0.15
    modality: str = "mixed"
    personality: Mapping[str, float] = field(default_factory=dict)
    interests: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "delta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValidationError(f"must be >= 0, got {value!r}", f"params.{name}")
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise ValidationError(f"must be > 0, got {self.sigma!r}", "params.sigma")
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}", "params.modality")
        for trait, value in self.personality.items():
            _check_unit(value, f"params.personality.{trait}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "delta": self.delta,
            "sigma": self.sigma,
            "modality": self.modality,
            "personality": {k: self.personality[k] for k in sorted(self.personality)},
            "interests": sorted(self.interests),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LearnerParams":
        known = {k: data[k] for k in ("alpha", "beta", "gamma", "delta", "sigma") if k in data}
        return cls(
            **{k: float(v) for k, v in known.items()},
            modality=data.get("modality", "mixed"),
            personality={k: float(v) for k, v in data.get("personality", {}).items()},
            interests=tuple(sorted(data.get("interests", ()))),
        )


@dataclass(frozen=True)
class StudentState:
    id: str
    graph: KnowledgeGraph
    params: LearnerParams = field(default_factory=LearnerParams)
    memory: tuple[MemoryRecord, ...] = ()
    workflows: Mapping[str, float] = field(default_factory=dict)
    misconceptions: Mapping[str, Misconception] = field(default_factory=dict)

    def validate(self) -> None:
        self.graph.validate()
        for kind, value in self.workflows.items():
            if kind not in WORKFLOW_KINDS:
                raise ValidationError(f"unknown workflow {kind!r}", f"students.{self.id}.workflows")
            _check_unit(value, f"students.{self.id}.workflows.{kind}")
        for m in self.misconceptions.values():
            if m.concept not in self.graph.nodes:
                raise MissingConceptError(f"misconception {m.id!r} references unknown concept {m.concept!r}")
        steps = [r.step for r in self.memory]
        if steps != sorted(steps):
            raise ValidationError("memory steps must be non-decreasing", f"students.{self.id}.memory")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "graph": self.graph.to_dict(),
            "params": self.params.to_dict(),
            "memory": [r.to_dict() for r in self.memory],
            "workflows": {k: self.workflows[k] for k in sorted(self.workflows)},
            "misconceptions": {k: self.misconceptions[k].to_dict() for k in sorted(self.misconceptions)},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StudentState":
        state = cls(
            id=data["id"],
            graph=KnowledgeGraph.from_dict(data.get("graph", {})),
            params=LearnerParams.from_dict(data.get("params", {})),
            memory=tuple(MemoryRecord.from_dict(r) for r in data.get("memory", ())),
            workflows={k: float(v) for k, v in sorted(data.get("workflows", {}).items())},
            misconceptions={
                m["id"]: Misconception.from_dict(m)
                for m in sorted(_misconception_list(data.get("misconceptions", ())), key=lambda m: m["id"])
            },
        )
        state.validate()
        return state


def _misconception_list(raw: Any) -> list[Mapping[str, Any]]:
    return list(raw.values()) if isinstance(raw, Mapping) else list(raw)


@dataclass(frozen=True)
class Rubric:
    """Evaluation rubric: response scores plus the recency weight of the estimator."""

    recency: float = DEFAULT_RECENCY
    flag_below: float = 0.5
    scores: Mapping[str, float] = field(default_factory=lambda: {
        "respond-correct": 1.0,
        "respond-incorrect": 0.0,
        "question": 0.0,
    })

    def score(self, kind: str, correct: bool | None) -> float | None:
        if kind == "respond":
            return self.scores["respond-correct" if correct else "respond-incorrect"]
        if kind in ("ask-question", "question-when-invited"):
            return self.scores["question"]
        return None


@dataclass(frozen=True)
class EvidenceItem:
    """One scored observable utterance, optionally revealing misconceptions.

    ``misconceptions`` holds ``(id, concept, persistence, active)`` tuples.
    """

    step: int
    utterance: str
    scores: Mapping[str, float]
    misconceptions: tuple[tuple[str, str, float, bool], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "utterance": self.utterance,
            "scores": {k: self.scores[k] for k in sorted(self.scores)},
            "misconceptions": [list(m) for m in self.misconceptions],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvidenceItem":
        return cls(
            step=int(data["step"]),
            utterance=data.get("utterance", ""),
            scores={k: float(v) for k, v in data.get("scores", {}).items()},
            misconceptions=tuple(
                (m[0], m[1], float(m[2]), bool(m[3])) for m in data.get("misconceptions", ())
            ),
        )


@dataclass(frozen=True)
class InferredProfile:
    student: str
    estimates: Mapping[str, float]
    counts: Mapping[str, int]
    flagged: tuple[str, ...] = ()
    revealed: Mapping[str, tuple[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "student": self.student,
            "estimates": {k: self.estimates[k] for k in sorted(self.estimates)},
            "counts": {k: self.counts[k] for k in sorted(self.counts)},
            "flagged": list(self.flagged),
            "revealed": {k: list(self.revealed[k]) for k in sorted(self.revealed)},
        }


@dataclass(frozen=True)
class VisibleEvent:
    seq: int
    step: int
    speaker: str
    channel: str
    members: tuple[str, ...]
    kind: str
    content: str = ""
    concept: str | None = None
    target: str | None = None
    payload: Mapping[str, Any] = field(default_factory=dict)

    def visible_to(self, agent: str) -> bool:
        return agent in self.members

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "step": self.step,
            "speaker": self.speaker,
            "channel": self.channel,
            "kind": self.kind,
            "content": self.content,
            "concept": self.concept,
            "target": self.target,
            "payload": dict(self.payload),
        }


@dataclass(frozen=True)
class Observation:
    observer: str
    step: int
    role: str
    visible_events: tuple[VisibleEvent, ...]
    scenery_summary: Mapping[str, Any]
    retrieved_memory: tuple[MemoryRecord, ...] = ()
    self_view: Mapping[str, Any] = field(default_factory=dict)
    scenery: Any = field(default=None, compare=False, repr=False)

    @property
    def admissible(self) -> frozenset[str]:
        return frozenset(self.scenery_summary.get("admissible", ()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "observer": self.observer,
            "step": self.step,
            "role": self.role,
            "visible_events": [e.to_dict() for e in self.visible_events],
            "scenery_summary": dict(self.scenery_summary),
            "retrieved_memory": [r.to_dict() for r in self.retrieved_memory],
            "self_view": _plain(self.self_view),
        }


def _plain(value: Any) -> Any:
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    return value


# --------------------------------------------------------------------------
# Mastery dynamics
# --------------------------------------------------------------------------


def mastery_step(mu: float, params: LearnerParams, q: float, r: float, d: float, s: float) -> float:
    """Bounded transition: clip(mu + alpha*q*r - beta*d + gamma*s) to [0, 1]."""
    return clip01(mu + params.alpha * q * r - params.beta * d + params.gamma * s)


def update_mastery(
    graph: KnowledgeGraph,
    node: str,
    q: float,
    r: float,
    d: float,
    s: float,
    params: LearnerParams,
) -> KnowledgeGraph:
    if node not in graph.nodes:
        raise MissingConceptError(f"unknown concept {node!r}")
    for name, value in (("q", q), ("r", r), ("d", d), ("s", s)):
        _check_unit(value, name)
    new = mastery_step(graph.mastery[node], params, q, r, d, s)
    if new == graph.mastery[node]:
        return graph
    return graph.with_mastery(node, new)


def apply_decay_tick(state: StudentState, elapsed: int, decay_unit: float = DEFAULT_DECAY_UNIT) -> StudentState:
    """Decay every node once, with interference ``d = min(1, elapsed * decay_unit)``."""
    if elapsed < 1:
        raise ValidationError(f"elapsed must be >= 1, got {elapsed}", "elapsed")
    if state.params.beta == 0.0:
        return state
    d = min(1.0, elapsed * decay_unit)
    graph = state.graph
    for node in sorted(graph.nodes):
        graph = update_mastery(graph, node, 0.0, 0.0, d, 0.0, state.params)
    return state if graph is state.graph else replace(state, graph=graph)


# --------------------------------------------------------------------------
# Misconceptions
# --------------------------------------------------------------------------


def record_misconception(state: StudentState, m: Misconception) -> StudentState:
    if m.id in state.misconceptions:
        raise DuplicateIdError(f"misconception {m.id!r} already recorded")
    if m.concept not in state.graph.nodes:
        raise MissingConceptError(f"misconception {m.id!r} references unknown concept {m.concept!r}")
    mis = dict(state.misconceptions)
    mis[m.id] = m
    return replace(state, misconceptions=dict(sorted(mis.items())))


def challenge_misconception(
    state: StudentState,
    misconception_id: str,
    strength: float,
    coef: float = DEFAULT_CHALLENGE_COEF,
    retire_below: float = DEFAULT_RETIRE_BELOW,
) -> StudentState:
    """Reduce persistence by ``coef * strength``; retire the misconception below threshold.

    A retired misconception is absent from the returned state.
    """
    if misconception_id not in state.misconceptions:
        raise UnknownIdError(f"no misconception {misconception_id!r} for {state.id!r}")
    _check_unit(strength, "evidence strength")
    m = state.misconceptions[misconception_id]
    rho = clip01(m.persistence - coef * strength)
    mis = dict(state.misconceptions)
    if rho < retire_below:
        del mis[misconception_id]
    elif rho == m.persistence:
        return state
    else:
        mis[misconception_id] = replace(m, persistence=rho)
    return replace(state, misconceptions=mis)


# --------------------------------------------------------------------------
# Evidence and inferred profile
# --------------------------------------------------------------------------


def _weighted_mean(scores: Sequence[float], recency: float) -> float:
    n = len(scores)
    weights = [recency ** (n - 1 - i) for i in range(n)]
    mean = math.fsum(w * s for w, s in zip(weights, scores)) / math.fsum(weights)
    # a weighted mean lies within the sample range; clamping removes rounding drift
    return min(max(mean, min(scores)), max(scores))


def infer_profile(
    history: Sequence[EvidenceItem],
    rubric: Rubric | None = None,
    student: str = "",
) -> InferredProfile:
    """Estimate per-concept mastery from scored utterances (newest weight 1, geometric decay)."""
    rubric = rubric or Rubric()
    per_concept: dict[str, list[float]] = {}
    revealed: dict[str, tuple[str, float]] = {}
    active: dict[str, bool] = {}
    for item in history:
        for concept in sorted(item.scores):
            score = item.scores[concept]
            _check_unit(score, f"rubric score for {concept}")
            per_concept.setdefault(concept, []).append(score)
        for mid, concept, rho, is_active in item.misconceptions:
            revealed[mid] = (concept, rho)
            active[mid] = is_active
    estimates = {c: _weighted_mean(s, rubric.recency) for c, s in sorted(per_concept.items())}
    counts = {c: len(s) for c, s in sorted(per_concept.items())}
    flagged = tuple(
        mid for mid in sorted(revealed)
        if active[mid] and estimates.get(revealed[mid][0], 1.0) < rubric.flag_below
    )
    return InferredProfile(student, estimates, counts, flagged,
                           {k: revealed[k] for k in sorted(revealed) if active[k]})


# --------------------------------------------------------------------------
# Memory repository
# --------------------------------------------------------------------------


def append_memory(state: StudentState, record: MemoryRecord, capacity: int) -> StudentState:
    """Append a record; over capacity, evict the least salient of the oldest half."""
    if capacity < 1:
        raise ValidationError(f"capacity must be positive, got {capacity}", "capacity")
    if state.memory and record.step < state.memory[-1].step:
        raise ValidationError(
            f"record step {record.step} precedes last stored step {state.memory[-1].step}", "memory")
    memory = list(state.memory)
    memory.append(record)
    while len(memory) > capacity:
        half = max(1, len(memory) // 2)
        victim = min(range(half), key=lambda i: (memory[i].salience, memory[i].step, memory[i].source, i))
        del memory[victim]
    return replace(state, memory=tuple(memory))


def retrieve_memory(
    state: StudentState,
    query_tags: Iterable[str],
    k: int,
    now: int | None = None,
) -> list[MemoryRecord]:
    """Top-k records by tag overlap plus a recency bonus ``1 / (1 + age)``."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}", "k")
    if not state.memory:
        return []
    query = frozenset(query_tags)
    if now is None:
        now = state.memory[-1].step

    def key(item: tuple[int, MemoryRecord]) -> tuple[float, int, int]:
        idx, rec = item
        score = len(rec.tags & query) + 1.0 / (1.0 + max(0, now - rec.step))
        return (-score, -rec.step, -idx)

    ranked = sorted(enumerate(state.memory), key=key)
    return [rec for _, rec in ranked[:k]]


# --------------------------------------------------------------------------
# Local observation
# --------------------------------------------------------------------------


def build_observation(
    state: "SimulationState",
    scenery: "Scenery",
    agent_id: str,
    k: int = 5,
    focus: Iterable[str] = (),
) -> Observation:
    """Construct an agent's local view: channel-filtered events plus retrieved memory."""
    from .scenery import admissible_actions  # local import: scenery depends on nothing here

    if agent_id not in scenery.participants:
        raise UnknownIdError(f"agent {agent_id!r} does not participate in scenery {scenery.id!r}")
    role = scenery.participants[agent_id]
    visible = tuple(e for e in state.pending if e.visible_to(agent_id))
    memory: tuple[MemoryRecord, ...] = ()
    student = state.students.get(agent_id)
    if student is not None:
        memory = tuple(retrieve_memory(student, focus, k, now=state.t))
    phase = state.scene.get("phase")
    summary = {
        "scenery": scenery.id,
        "template": scenery.template,
        "role": role,
        "phase": phase,
        "admissible": sorted(admissible_actions(scenery, role, phase)),
    }
    return Observation(agent_id, state.t, role, visible, summary, memory, scenery=scenery)
