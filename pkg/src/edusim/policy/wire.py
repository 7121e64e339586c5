"""Remote policy provider over HTTP.

One endpoint, method POST, JSON bodies. A request carries, in order:
``agent_id, role, step, observation, admissible, coefficients, protocol``.
A response carries ``kind, target, concept, payload, rationale`` where the
payload holds ``text`` and the numeric fields ``q, r, s, e`` in [0, 1] and an
optional demand ``d >= 0``.
"""

from __future__ import annotations

import http.client
import json
import logging
import math
import socket
from dataclasses import dataclass, field
from typing import Any, Mapping
from urllib.parse import urlsplit

from ..actions import UNIT_FIELDS, Action
from ..codec import dumps
from ..cognition import Observation
from ..errors import MalformedResponse, RemoteConnectionError, RemoteTimeout, Violation
from .binding import Decision

log = logging.getLogger(__name__)

PROTOCOL = "edusim-policy/1"
_EXCERPT = ("theta_zone", "headroom", "band", "challenge_coef", "tie_affiliative", "tie_conflict")


@dataclass(frozen=True)
class ActionRequest:
    agent_id: str
    role: str
    step: int
    observation: Mapping[str, Any]
    admissible: tuple[str, ...]
    coefficients: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "role": self.role,
            "step": self.step,
            "observation": self.observation,
            "admissible": list(self.admissible),
            "coefficients": dict(self.coefficients),
            "protocol": PROTOCOL,
        }


@dataclass(frozen=True)
class ActionResponse:
    kind: str
    target: str | None = None
    concept: str | None = None
    payload: Mapping[str, Any] = field(default_factory=dict)
    rationale: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "target": self.target, "concept": self.concept,
                "payload": dict(self.payload), "rationale": self.rationale}


def remote_call(endpoint: str, request: ActionRequest | Mapping[str, Any], timeout: float,
                retries: int = 0) -> dict[str, Any]:
    """POST one request and return the decoded response body unmodified.

    Raises RemoteTimeout, RemoteConnectionError or MalformedResponse. Failed
    attempts are retried ``retries`` times; the last error is raised.
    """
    body = dumps(request.to_dict() if isinstance(request, ActionRequest) else request).encode("utf-8")
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            return _post(endpoint, body, timeout)
        except (RemoteTimeout, RemoteConnectionError, MalformedResponse) as exc:
            last = exc
            log.debug("remote call to %s failed: %s", endpoint, exc)
    assert last is not None
    raise last


def _post(endpoint: str, body: bytes, timeout: float) -> dict[str, Any]:
    parts = urlsplit(endpoint)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise RemoteConnectionError(f"unsupported endpoint {endpoint!r}")
    cls = http.client.HTTPSConnection if parts.scheme == "https" else http.client.HTTPConnection
    conn = cls(parts.hostname, parts.port, timeout=timeout)
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query
    try:
        conn.request("POST", path, body=body, headers={"Content-Type": "application/json"})
        resp = conn.getresponse()
        raw = resp.read()
        status = resp.status
    except (socket.timeout, TimeoutError) as exc:
        raise RemoteTimeout(f"no response from {endpoint} within {timeout:g}s") from exc
    except http.client.IncompleteRead as exc:
        raise MalformedResponse(f"truncated body from {endpoint}") from exc
    except (http.client.HTTPException, ValueError) as exc:
        raise MalformedResponse(f"bad HTTP exchange with {endpoint}: {exc}") from exc
    except OSError as exc:
        raise RemoteConnectionError(f"cannot reach {endpoint}: {exc}") from exc
    finally:
        conn.close()
    if status != 200:
        raise MalformedResponse(f"HTTP {status} from {endpoint}")
    try:
        decoded = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedResponse(f"undecodable body from {endpoint}") from exc
    if not isinstance(decoded, dict):
        raise MalformedResponse("response body is not an object")
    return decoded


def _number(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise Violation(f"payload field {name} is not a finite number", "unparseable")
    return float(value)


def validate_response(response: Mapping[str, Any] | ActionResponse,
                      admissible: frozenset[str] | set[str]) -> Decision:
    """Check a response against the admissible set; clamp out-of-range numerics.

    Raises :class:`Violation` for unparseable or inadmissible responses.
    """
    if isinstance(response, ActionResponse):
        response = response.to_dict()
    if not isinstance(response, Mapping):
        raise Violation("response is not an object", "unparseable")
    kind = response.get("kind")
    if not isinstance(kind, str) or not kind:
        raise Violation("response has no action kind", "unparseable")
    for name in ("target", "concept", "rationale"):
        value = response.get(name)
        if value is not None and not isinstance(value, str):
            raise Violation(f"{name} must be a string", "unparseable")
    payload = response.get("payload", {})
    if payload is None:
        payload = {}
    if not isinstance(payload, Mapping):
        raise Violation("payload must be an object", "unparseable")
    if kind not in admissible:
        raise Violation(f"kind {kind!r} is not admissible", "inadmissible")
    payload = dict(payload)
    clamps: list[dict[str, Any]] = []
    for name in UNIT_FIELDS:
        if name in payload and payload[name] is not None:
            value = _number(payload[name], name)
            clamped = min(1.0, max(0.0, value))
            if clamped != value:
                clamps.append({"field": name, "value": value, "clamped": clamped})
            payload[name] = clamped
    demand = payload.pop("d", response.get("demand"))
    if demand is not None:
        demand = _number(demand, "d")
        if demand < 0.0:
            clamps.append({"field": "d", "value": demand, "clamped": 0.0})
            demand = 0.0
    action = Action(kind, response.get("target"), response.get("concept"), demand, payload,
                    response.get("rationale") or "")
    return Decision(action, tuple(clamps))


class RemotePolicy:
    """Delegates each decision to an HTTP endpoint speaking the wire protocol."""

    remote = True

    def __init__(self, endpoint: str, timeout: float, retries: int = 0, cost: float = 50.0,
                 coefficients: Mapping[str, Any] | None = None) -> None:
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.cost = cost
        coeffs = coefficients or {}
        self.coefficients = {k: coeffs[k] for k in _EXCERPT if k in coeffs}

    def request_for(self, observation: Observation) -> ActionRequest:
        return ActionRequest(observation.observer, observation.role, observation.step,
                             observation.to_dict(), tuple(sorted(observation.admissible)),
                             self.coefficients)

    def decide(self, observation: Observation) -> Decision:
        raw = remote_call(self.endpoint, self.request_for(observation), self.timeout, self.retries)
        return validate_response(raw, observation.admissible)
