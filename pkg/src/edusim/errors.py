"""Exception hierarchy shared by every edusim module."""

from __future__ import annotations


class EdusimError(Exception):
    """Base class for all edusim errors."""


class ValidationError(EdusimError, ValueError):
    """A value or object violates a documented invariant."""

    def __init__(self, message: str, field: str | None = None) -> None:
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class MissingConceptError(ValidationError, KeyError):
    """A concept id is not a node of the knowledge graph."""

    def __str__(self) -> str:  # KeyError would quote the message otherwise
        return self.args[0]


class UnknownIdError(ValidationError, KeyError):
    """An agent, misconception, or scenery id could not be resolved."""

    def __str__(self) -> str:
        return self.args[0]


class DuplicateIdError(ValidationError):
    pass


class PhaseError(EdusimError):
    """Illegal instructional-cycle transition."""


class ChannelError(EdusimError):
    """A communication primitive was used outside the scenery's norms."""


class BudgetExceeded(EdusimError):
    def __init__(self, estimate: float, cap: float) -> None:
        super().__init__(f"estimated budget {estimate:g} exceeds cap {cap:g}")
        self.estimate = estimate
        self.cap = cap


class IntegrityError(EdusimError):
    """A trace failed its integrity check; ``seq`` is the first bad sequence number."""

    def __init__(self, message: str, seq: int | None = None) -> None:
        super().__init__(message if seq is None else f"seq {seq}: {message}")
        self.seq = seq


class FormatVersionError(EdusimError):
    pass


class PolicyFailure(EdusimError):
    """A policy could not produce an action. The engine substitutes a no-op."""

    kind = "failure"


class RemoteTimeout(PolicyFailure):
    kind = "timeout"


class RemoteConnectionError(PolicyFailure):
    kind = "connection"


class MalformedResponse(PolicyFailure):
    kind = "malformed"


class Violation(EdusimError):
    """An action is outside the admissible set or otherwise unusable."""

    def __init__(self, reason: str, kind: str | None = None) -> None:
        super().__init__(reason)
        self.reason = reason
        self.kind = kind


class IncompleteTraceError(IntegrityError):
    """The trace trailer marks the run as aborted."""


class MissingSnapshotError(EdusimError):
    """The snapshot file referenced by a trace trailer does not exist."""
