"""Event-sourced trace: line format, writer, reader, and replay.

A trace file holds one header line, one line per event, and a trailer line.
Every line is canonical JSON ending in a ``digest`` field, the sha256 of the
line text with that field removed. The final state lives in a separate
snapshot file named by the trailer.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .. import __version__
from ..codec import canon, dumps, loads
from ..errors import (
    FormatVersionError,
    IncompleteTraceError,
    IntegrityError,
    MissingSnapshotError,
)

TRACE_FORMAT = "edusim-trace"
SNAPSHOT_FORMAT = "edusim-snapshot"
FORMAT_VERSION = "1.0"
ENGINE_VERSION = __version__

PHASES = ("observe", "act", "apply", "log")
CHANNELS = ("one-to-one", "broadcast", "group-chat", "system")
_DIGEST_SUFFIX_LEN = len(',"digest":""}') + 64


@dataclass
class TraceEvent:
    seq: int
    step: int
    phase: str
    channel: str
    actor: str
    targets: tuple[str, ...] = ()
    payload: dict[str, Any] = field(default_factory=dict)
    deltas: list[list[Any]] = field(default_factory=list)

    @property
    def event(self) -> str:
        return self.payload.get("event", "")

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "step": self.step,
            "phase": self.phase,
            "channel": self.channel,
            "actor": self.actor,
            "targets": list(self.targets),
            "payload": self.payload,
            "deltas": self.deltas,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TraceEvent":
        return cls(int(data["seq"]), int(data["step"]), data["phase"], data["channel"], data["actor"],
                   tuple(data.get("targets", ())), dict(data.get("payload", {})),
                   [list(d) for d in data.get("deltas", ())])


def seal(obj: Mapping[str, Any]) -> str:
    """Canonical line text for ``obj`` with its digest appended."""
    body = dumps(obj)
    sha = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return body[:-1] + f',"digest":"{sha}"}}' if body != "{}" else f'{{"digest":"{sha}"}}'


def unseal(line: str) -> tuple[dict[str, Any] | None, bool]:
    """Parse a sealed line; returns (object or None, digest ok)."""
    line = line.rstrip("\n")
    try:
        obj = loads(line)
    except ValueError:
        return None, False
    if not isinstance(obj, dict) or "digest" not in obj:
        return obj if isinstance(obj, dict) else None, False
    claimed = obj.pop("digest")
    body = line[:-_DIGEST_SUFFIX_LEN] + "}"
    actual = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return obj, claimed == actual


@dataclass
class Trace:
    header: dict[str, Any]
    events: list[TraceEvent]
    final_state: dict[str, Any] | None
    complete: bool = True

    @property
    def scenery_ids(self) -> list[str]:
        return list(self.header.get("scenery_ids", ()))

    @property
    def initial_state(self) -> dict[str, Any]:
        return self.header["initial"]

    def header_line(self) -> str:
        return seal(self.header)

    def event_lines(self) -> Iterator[str]:
        for e in self.events:
            yield seal(e.to_dict())

    def trailer(self, snapshot_name: str | None, snapshot_sha: str | None) -> dict[str, Any]:
        return {
            "trailer": True,
            "complete": self.complete,
            "events": len(self.events),
            "snapshot": snapshot_name,
            "snapshot_sha256": snapshot_sha,
        }


def snapshot_text(state: Mapping[str, Any]) -> str:
    return dumps({"format": SNAPSHOT_FORMAT, "version": FORMAT_VERSION, "state": state}) + "\n"


def snapshot_path(trace_path: str | Path) -> Path:
    p = Path(trace_path)
    stem = p.name[: -len(".jsonl")] if p.name.endswith(".jsonl") else p.stem
    return p.with_name(stem + ".snapshot.json")


class TraceWriter:
    """Single-writer append stream; ``finish`` adds the snapshot and trailer."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._count = 0

    def header(self, header: Mapping[str, Any]) -> None:
        self._fh.write(seal(header) + "\n")

    def event(self, event: TraceEvent) -> None:
        self._fh.write(seal(event.to_dict()) + "\n")
        self._count += 1

    def finish(self, final_state: Mapping[str, Any] | None, complete: bool = True) -> None:
        name = sha = None
        if complete and final_state is not None:
            text = snapshot_text(final_state).encode("utf-8")
            snap = snapshot_path(self.path)
            snap.write_bytes(text)
            name, sha = snap.name, hashlib.sha256(text).hexdigest()
        trailer = {"trailer": True, "complete": complete, "events": self._count,
                   "snapshot": name, "snapshot_sha256": sha}
        self._fh.write(seal(trailer) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._fh.close()

    def abort(self) -> None:
        """Flush what was written and mark the trace incomplete (best effort)."""
        if self._fh.closed:
            return
        try:
            self.finish(None, complete=False)
        except OSError:
            self._fh.close()


def write_trace(trace: Trace, path: str | Path) -> Path:
    writer = TraceWriter(path)
    writer.header(trace.header)
    for e in trace.events:
        writer.event(e)
    writer.finish(trace.final_state, complete=trace.complete)
    return writer.path


# --------------------------------------------------------------------------
# Reading and replay
# --------------------------------------------------------------------------


def _check_version(doc: Mapping[str, Any], fmt: str) -> None:
    if doc.get("format") != fmt:
        raise FormatVersionError(f"expected a {fmt} document, found {doc.get('format')!r}")
    version = str(doc.get("version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise FormatVersionError(f"unsupported {fmt} version {version!r}")


@dataclass
class _Parsed:
    header: dict[str, Any]
    events: list[TraceEvent]
    trailer: dict[str, Any] | None


def _parse_lines(lines: Iterable[str]) -> _Parsed:
    it = iter(lines)
    first = next(it, None)
    if first is None:
        raise IntegrityError("empty trace file", 0)
    header, ok = unseal(first)
    if header is None or not ok:
        raise IntegrityError("header line is corrupt", 0)
    _check_version(header, TRACE_FORMAT)
    events: list[TraceEvent] = []
    trailer = None
    expected = 0
    for line in it:
        if not line.strip():
            continue
        if trailer is not None:
            raise IntegrityError("content after trailer", expected)
        obj, ok = unseal(line)
        if obj is not None and obj.get("trailer") is True:
            if not ok:
                raise IntegrityError("trailer line is corrupt", expected)
            trailer = obj
            continue
        if obj is None or not ok:
            raise IntegrityError("event line failed its digest check", expected)
        seq = obj.get("seq")
        if seq != expected:
            raise IntegrityError(f"sequence gap: expected {expected}, found {seq}", expected)
        events.append(TraceEvent.from_dict(obj))
        expected += 1
    return _Parsed(header, events, trailer)


def read_trace(path: str | Path, *, require_snapshot: bool = True) -> Trace:
    """Load a trace and its snapshot; integrity of every line is checked."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        parsed = _parse_lines(fh)
    trailer = parsed.trailer
    n = len(parsed.events)
    if trailer is None:
        raise IncompleteTraceError("trace has no trailer (run aborted)", n)
    if trailer.get("events") != n:
        raise IntegrityError(f"trailer counts {trailer.get('events')} events, file holds {n}", n)
    if not trailer.get("complete"):
        raise IncompleteTraceError("trace is marked incomplete", n)
    final = None
    snap_name = trailer.get("snapshot")
    if snap_name is not None:
        snap = path.with_name(snap_name)
        if not snap.exists():
            if require_snapshot:
                raise MissingSnapshotError(f"snapshot file {snap} is missing")
        else:
            raw = snap.read_bytes()
            if hashlib.sha256(raw).hexdigest() != trailer.get("snapshot_sha256"):
                raise IntegrityError("snapshot checksum does not match trailer", n)
            doc = loads(raw.decode("utf-8"))
            _check_version(doc, SNAPSHOT_FORMAT)
            final = doc["state"]
    return Trace(parsed.header, parsed.events, final, complete=True)


def apply_delta(tree: Any, delta: list[Any], seq: int) -> None:
    """Apply one ``[path, old, new]`` delta in place, checking the old value."""
    try:
        path, old, new = delta
    except (TypeError, ValueError):
        raise IntegrityError("malformed delta", seq) from None
    if not isinstance(path, list) or not path:
        raise IntegrityError("delta path must be a non-empty list", seq)
    node = tree
    try:
        for key in path[:-1]:
            node = node[key]
    except (KeyError, IndexError, TypeError):
        raise IntegrityError(f"delta path {path} does not resolve", seq) from None
    key = path[-1]
    if isinstance(node, list):
        if not isinstance(key, int) or key < 0:
            raise IntegrityError(f"bad list index in {path}", seq)
        if old is None:
            if key > len(node):
                raise IntegrityError(f"insert past end at {path}", seq)
            node.insert(key, copy.deepcopy(new))
            return
        if key >= len(node) or node[key] != old:
            raise IntegrityError(f"old value mismatch at {path}", seq)
        if new is None:
            del node[key]
        else:
            node[key] = copy.deepcopy(new)
        return
    if not isinstance(node, dict):
        raise IntegrityError(f"delta path {path} does not end in a container", seq)
    if old is None:
        if key in node:
            raise IntegrityError(f"insert over existing key at {path}", seq)
        node[key] = copy.deepcopy(new)
        return
    if key not in node or node[key] != old:
        raise IntegrityError(f"old value mismatch at {path}", seq)
    if new is None:
        del node[key]
    else:
        node[key] = copy.deepcopy(new)


def replay_events(initial: Mapping[str, Any], events: Iterable[TraceEvent]) -> dict[str, Any]:
    tree = copy.deepcopy(canon(initial))
    count = tree.get("history", {}).get("events", 0)
    for e in events:
        for delta in e.deltas:
            apply_delta(tree, canon(delta), e.seq)
        count += 1
        tree["history"] = {"events": count, "last": e.seq}
    return tree


def replay(source: Trace | str | Path) -> dict[str, Any]:
    """Rebuild the final state from the header and deltas; verify it against the snapshot.

    Raises :class:`IntegrityError` carrying the first bad sequence number.
    """
    trace = source if isinstance(source, Trace) else read_trace(source)
    if not trace.complete:
        raise IncompleteTraceError("trace is marked incomplete", len(trace.events))
    if isinstance(source, Trace):
        # round-trip through the line encoding so in-memory and on-disk replays agree
        parsed = _parse_lines([trace.header_line(), *trace.event_lines()])
        trace = Trace(parsed.header, parsed.events, trace.final_state)
    for i, e in enumerate(trace.events):
        if e.seq != i:
            raise IntegrityError(f"sequence gap: expected {i}, found {e.seq}", i)
    state = replay_events(trace.initial_state, trace.events)
    if trace.final_state is not None and state != canon(trace.final_state):
        last = trace.events[-1].seq if trace.events else 0
        raise IntegrityError("replayed state differs from the snapshot", last)
    return state


def iter_step_states(trace: Trace) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield ``(step, state)`` after each step's events; the dict is reused between yields."""
    tree = copy.deepcopy(canon(trace.initial_state))
    yield tree["t"], tree
    current = None
    for e in trace.events:
        if current is not None and e.step != current:
            yield current, tree
        current = e.step
        for delta in e.deltas:
            apply_delta(tree, canon(delta), e.seq)
    if current is not None:
        yield current, tree
