"""The action record exchanged between policies, pedagogy, and the engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

BROADCAST = "broadcast"
NOOP = "listen"

# payload fields constrained to [0, 1]; demand is only required to be >= 0
UNIT_FIELDS = ("q", "r", "s", "e")


@dataclass(frozen=True)
class Action:
    """One agent decision.

    ``target`` is an agent id, a topic id (for ``join-topic``), ``"broadcast"``
    or None. ``payload`` carries the text plus exposure quality ``q``, uptake
    ``r``, scaffold strength ``s`` and any kind-specific extras.
    """

    kind: str
    target: str | None = None
    concept: str | None = None
    demand: float | None = None
    payload: Mapping[str, Any] = field(default_factory=dict)
    rationale: str = ""

    @property
    def is_noop(self) -> bool:
        return self.kind == NOOP

    def get(self, name: str, default: float = 0.0) -> float:
        value = self.payload.get(name, default)
        return default if value is None else float(value)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "target": self.target,
            "concept": self.concept,
            "demand": self.demand,
            "payload": {k: self.payload[k] for k in sorted(self.payload)},
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Action":
        demand = data.get("demand")
        return cls(
            kind=str(data["kind"]),
            target=data.get("target"),
            concept=data.get("concept"),
            demand=None if demand is None else float(demand),
            payload=dict(data.get("payload") or {}),
            rationale=str(data.get("rationale") or ""),
        )


def listen(rationale: str = "") -> Action:
    return Action(NOOP, rationale=rationale)
