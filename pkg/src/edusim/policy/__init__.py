"""Agent decision providers: built-in scripted and rule-based policies plus a remote client."""

from .binding import (
    BINDING_KINDS,
    ENDPOINT_ENV,
    Decision,
    Policy,
    PolicyBinding,
    make_policy,
)
from .builtin import AdaptiveTeacher, RuleStudent, ScriptedStudent, ScriptedTeacher
from .wire import PROTOCOL, ActionRequest, ActionResponse, RemotePolicy, remote_call, validate_response


def decide(policy: Policy, observation) -> Decision:
    """Run one decision and normalize the result to a :class:`Decision`."""
    result = policy.decide(observation)
    return result if isinstance(result, Decision) else Decision(result)


__all__ = [
    "BINDING_KINDS",
    "ENDPOINT_ENV",
    "PROTOCOL",
    "ActionRequest",
    "ActionResponse",
    "AdaptiveTeacher",
    "Decision",
    "Policy",
    "PolicyBinding",
    "RemotePolicy",
    "RuleStudent",
    "ScriptedStudent",
    "ScriptedTeacher",
    "decide",
    "make_policy",
    "remote_call",
    "validate_response",
]
