"""Communication primitives and the tie-update law.

Each primitive checks the scenery's norms and returns a :class:`Delivery`
describing who sees the message and which ties become eligible for update.
The engine turns a delivery into visible events and state changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from ..cognition import VisibleEvent, clip01
from ..codec import pair_key
from ..errors import ChannelError
from ..scenery import Scenery, may_use_channel


@dataclass(frozen=True)
class Delivery:
    channel: str
    actor: str
    members: tuple[str, ...]
    payload: Mapping[str, Any] = field(default_factory=dict)
    tie_pairs: tuple[str, ...] = ()

    @property
    def recipients(self) -> tuple[str, ...]:
        return tuple(m for m in self.members if m != self.actor)

    def visible_event(self, seq: int, step: int, kind: str, content: str = "",
                      concept: str | None = None, target: str | None = None) -> VisibleEvent:
        return VisibleEvent(seq, step, self.actor, self.channel, self.members, kind, content,
                            concept, target, dict(self.payload))


def update_tie(g: float, u: float, v: float, h: float) -> float:
    """g' = clip(g + u - v + h) to [0, 1]."""
    for name, x in (("g", g), ("u", u), ("v", v), ("h", h)):
        if not math.isfinite(x):
            raise ValueError(f"{name} must be finite, got {x!r}")
    return clip01(g + u - v + h)


def _role(scenery: Scenery, agent: str) -> str:
    role = scenery.participants.get(agent)
    if role is None:
        raise ChannelError(f"{agent!r} does not participate in {scenery.id!r}")
    return role


def _check_rights(scenery: Scenery, role: str, channel: str) -> None:
    if not may_use_channel(scenery, role, channel):
        raise ChannelError(f"role {role!r} may not use {channel} in {scenery.id!r}")


def broadcast(scenery: Scenery, actor: str, payload: Mapping[str, Any] | None = None) -> Delivery:
    """One-to-many: every participant sees the message; recipients exclude the actor."""
    _check_rights(scenery, _role(scenery, actor), "broadcast")
    return Delivery("broadcast", actor, tuple(sorted(scenery.participants)), dict(payload or {}))


def one_to_one(scenery: Scenery, actor: str, target: str | None,
               payload: Mapping[str, Any] | None = None, phase: str | None = None) -> Delivery:
    """Dyadic exchange visible to exactly the two endpoints."""
    role = _role(scenery, actor)
    if target is None or target not in scenery.participants:
        raise ChannelError(f"target {target!r} is not present")
    if target == actor:
        raise ChannelError("self-targeted one-to-one message")
    _check_rights(scenery, role, "one-to-one")
    if role == "student" and scenery.participants[target] == "student":
        _check_peer_phase(scenery, phase)
    return Delivery("one-to-one", actor, tuple(sorted((actor, target))), dict(payload or {}),
                    (pair_key(actor, target),))


def group_chat(scenery: Scenery, members: Sequence[str], actor: str,
               payload: Mapping[str, Any] | None = None, phase: str | None = None) -> Delivery:
    """Message to a group; ties between the actor and each other member become eligible."""
    role = _role(scenery, actor)
    group = tuple(sorted(set(members)))
    if actor not in group:
        raise ChannelError(f"{actor!r} is not a member of the group")
    if len(group) > scenery.norms.max_group_size:
        raise ChannelError(f"group of {len(group)} exceeds max size {scenery.norms.max_group_size}")
    _check_rights(scenery, role, "group-chat")
    if role == "student":
        _check_peer_phase(scenery, phase)
    pairs = tuple(pair_key(actor, m) for m in group if m != actor)
    return Delivery("group-chat", actor, group, dict(payload or {}), pairs)


def _check_peer_phase(scenery: Scenery, phase: str | None) -> None:
    allowed = scenery.norms.peer_chat_phases
    if allowed is not None and phase not in allowed:
        raise ChannelError(f"peer chat is not allowed during {phase!r} in {scenery.id!r}")
