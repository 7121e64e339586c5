"""Canonical text encoding used for traces, snapshots, configs, and the wire.

Every document is JSON with compact separators, no NaN/Inf, insertion-ordered
keys (callers build mappings in a fixed order), and floats rounded to nine
significant digits before printing. Python's float repr is correctly rounded,
so the output is identical on every IEEE-754 platform and locale.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

SIG_DIGITS = 9


def round_sig(x: float) -> float:
    if not math.isfinite(x):
        raise ValueError(f"non-finite number {x!r} cannot be encoded")
    r = float(f"{x:.{SIG_DIGITS}g}")
    return 0.0 if r == 0.0 else r  # fold -0.0


def canon(obj: Any) -> Any:
    """Return a copy of ``obj`` with every float rounded and containers normalized."""
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return obj
    if isinstance(obj, float):
        return round_sig(obj)
    if isinstance(obj, dict):
        return {str(k): canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canon(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return [canon(v) for v in sorted(obj)]
    if hasattr(obj, "to_dict"):
        return canon(obj.to_dict())
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj: Any) -> str:
    return json.dumps(canon(obj), separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def loads(text: str | bytes) -> Any:
    return json.loads(text, parse_constant=_reject_constant)


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite constant {name} is not allowed")


def digest(obj: Any) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


def pair_key(a: str, b: str) -> str:
    """Key for an undirected pair, independent of argument order."""
    if a == b:
        raise ValueError(f"self pair {a!r}")
    return f"{a}|{b}" if a < b else f"{b}|{a}"


def split_pair(key: str) -> tuple[str, str]:
    a, _, b = key.partition("|")
    return a, b
