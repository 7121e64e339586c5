"""Lesson metrics, social-network indicators, calibration distances and trajectory constraints.

Every function here is pure: it reads snapshots or traces and returns
immutable reports. Nothing in this module touches the engine's live state.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .codec import canon, dumps, split_pair
from .errors import ValidationError
from .engine.state import SimulationState
from .engine.trace import Trace, iter_step_states, read_trace

THETA_HIGH = 0.8
THETA_LOW = 0.2
METRICS = ("total-variation", "l1")
CONSTRAINT_KINDS = ("max-mastery-step", "zpd-band-fraction-min", "tie-bound")
REPORT_FORMAT = "edusim-report"
REPORT_VERSION = "1.0"
MASTERY_BINS = ("0.0-0.2", "0.2-0.4", "0.4-0.6", "0.6-0.8", "0.8-1.0")
OBSERVABLES = ("mastery", "degree", "action-kind")
HISTOGRAM_TOLERANCE = 1e-9


def step_states(trace: Trace) -> Iterator[tuple[int, dict[str, Any]]]:
    """Reconstructed state after each step; the yielded dict is shared between iterations."""
    return iter_step_states(trace)


def _final_state(source: Any) -> Mapping[str, Any]:
    if isinstance(source, Trace):
        if source.final_state is None:
            raise ValidationError("trace has no final snapshot", "trace")
        return source.final_state
    if isinstance(source, SimulationState):
        return source.to_dict()
    if isinstance(source, (str, Path)):
        return _final_state(read_trace(source))
    if isinstance(source, Mapping):
        return source.get("state", source) if "format" in source else source
    raise TypeError(f"cannot read a state from {type(source).__name__}")


# --------------------------------------------------------------------------
# Lesson metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StudentReport:
    student: str
    nodes: int
    avg_mastery: float | None
    high_nodes: int
    low_nodes: int
    misconceptions: int

    @property
    def flagged(self) -> bool:
        return self.nodes == 0

    def to_dict(self) -> dict[str, Any]:
        return {"student": self.student, "nodes": self.nodes, "avg_mastery": self.avg_mastery,
                "high_nodes": self.high_nodes, "low_nodes": self.low_nodes,
                "misconceptions": self.misconceptions, "flagged": self.flagged}


@dataclass(frozen=True)
class LessonReport:
    avg_mastery: float | None
    high_nodes: int
    low_nodes: int
    misconceptions: int
    total_nodes: int
    students: tuple[StudentReport, ...]
    thresholds: tuple[float, float] = (THETA_HIGH, THETA_LOW)

    kind = "lesson"

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "avg_mastery": self.avg_mastery,
            "high_nodes": self.high_nodes,
            "low_nodes": self.low_nodes,
            "misconceptions": self.misconceptions,
            "total_nodes": self.total_nodes,
            "thresholds": {"high": self.thresholds[0], "low": self.thresholds[1]},
            "students": [s.to_dict() for s in self.students],
        }


def classify(mu: float, theta_high: float = THETA_HIGH, theta_low: float = THETA_LOW) -> str:
    """``high`` when mu >= theta_high, ``low`` when mu < theta_low, else ``mid``."""
    if mu >= theta_high:
        return "high"
    if mu < theta_low:
        return "low"
    return "mid"


def lesson_metrics(source: Any, theta_high: float = THETA_HIGH, theta_low: float = THETA_LOW,
                   students: Iterable[str] | None = None) -> LessonReport:
    """AvgMastery, HighNodes, LowNodes and Misc over students' knowledge graphs.

    ``source`` may be a state dict, a snapshot document, a Trace (its final
    state), a SimulationState, or a trace path. The aggregate average pools
    every node of every student with a non-empty graph.
    """
    state = _final_state(source)
    roster = state.get("students", {})
    wanted = sorted(roster) if students is None else sorted(students)
    if not wanted:
        raise ValidationError("lesson metrics need at least one student", "students")
    reports = []
    pooled: list[float] = []
    for sid in wanted:
        if sid not in roster:
            raise ValidationError(f"unknown student {sid!r}", "students")
        data = roster[sid]
        mastery = data.get("graph", {}).get("mastery", {})
        values = [float(mastery[c]) for c in sorted(mastery)]
        labels = [classify(v, theta_high, theta_low) for v in values]
        avg = math.fsum(values) / len(values) if values else None
        reports.append(StudentReport(sid, len(values), avg, labels.count("high"), labels.count("low"),
                                     len(data.get("misconceptions", {}))))
        pooled.extend(values)
    return LessonReport(
        avg_mastery=math.fsum(pooled) / len(pooled) if pooled else None,
        high_nodes=sum(r.high_nodes for r in reports),
        low_nodes=sum(r.low_nodes for r in reports),
        misconceptions=sum(r.misconceptions for r in reports),
        total_nodes=len(pooled),
        students=tuple(reports),
        thresholds=(theta_high, theta_low),
    )


# --------------------------------------------------------------------------
# Network metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeMetrics:
    agent: str
    degree: int
    strength: float
    clustering: float

    def to_dict(self) -> dict[str, Any]:
        return {"agent": self.agent, "degree": self.degree, "strength": self.strength,
                "clustering": self.clustering}


@dataclass(frozen=True)
class NetworkReport:
    nodes: tuple[NodeMetrics, ...]
    density: float
    mean_path_length: float
    components: int
    largest_component: int
    threshold: float = 0.0

    kind = "network"

    def node(self, agent: str) -> NodeMetrics:
        for n in self.nodes:
            if n.agent == agent:
                return n
        raise KeyError(agent)

    @property
    def mean_clustering(self) -> float:
        return math.fsum(n.clustering for n in self.nodes) / len(self.nodes) if self.nodes else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "threshold": self.threshold,
            "density": self.density,
            "mean_path_length": self.mean_path_length,
            "components": self.components,
            "largest_component": self.largest_component,
            "mean_clustering": self.mean_clustering,
            "nodes": [n.to_dict() for n in self.nodes],
        }


def weight_matrix(graph: Mapping[str, Any], nodes: Iterable[str] | None = None) -> dict[str, dict[str, float]]:
    """Normalize a tie map to nested symmetric form.

    Accepts pair keys ``"a|b" -> w`` (symmetric by construction) or nested
    ``{a: {b: w}}`` maps, which must be symmetric.
    """
    adj: dict[str, dict[str, float]] = {n: {} for n in (nodes or ())}
    nested = any(isinstance(v, Mapping) for v in graph.values())
    if nested:
        for a, row in graph.items():
            adj.setdefault(a, {})
            for b, w in row.items():
                if a == b:
                    raise ValidationError(f"self loop on {a!r}", "graph")
                back = graph.get(b, {}).get(a)
                if back is None or float(back) != float(w):
                    raise ValidationError(f"asymmetric weight between {a!r} and {b!r}", "graph")
                adj[a][b] = float(w)
                adj.setdefault(b, {})
    else:
        for key, w in graph.items():
            a, b = split_pair(key)
            if not b or a == b:
                raise ValidationError(f"bad pair key {key!r}", "graph")
            adj.setdefault(a, {})[b] = float(w)
            adj.setdefault(b, {})[a] = float(w)
    return {n: adj[n] for n in sorted(adj)}


def _threshold_adj(adj: Mapping[str, Mapping[str, float]], threshold: float) -> dict[str, set[str]]:
    return {n: {m for m, w in row.items() if w > threshold} for n, row in adj.items()}


def shortest_path_lengths(neighbors: Mapping[str, Iterable[str]], source: str) -> dict[str, int]:
    """Hop distances from ``source`` by breadth-first search."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        node = queue.popleft()
        for nxt in sorted(neighbors.get(node, ())):
            if nxt not in dist:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    return dist


def connected_components(neighbors: Mapping[str, Iterable[str]]) -> list[list[str]]:
    seen: set[str] = set()
    comps = []
    for node in sorted(neighbors):
        if node in seen:
            continue
        comp = sorted(shortest_path_lengths(neighbors, node))
        seen.update(comp)
        comps.append(comp)
    comps.sort(key=lambda c: (-len(c), c[0]))
    return comps


def local_clustering(neighbors: Mapping[str, set[str]], node: str) -> float:
    nbrs = sorted(neighbors[node])
    k = len(nbrs)
    if k < 2:
        return 0.0
    links = sum(1 for a, b in combinations(nbrs, 2) if b in neighbors[a])
    return links / (k * (k - 1) / 2)


def network_metrics(graph: Mapping[str, Any], nodes: Iterable[str] | None = None,
                    threshold: float = 0.0) -> NetworkReport:
    """Degree, strength and clustering per agent; density, path length and components globally.

    An edge is present when its weight is strictly above ``threshold``.
    Strength sums raw weights. Path length is the mean hop distance over
    ordered pairs of the largest component (0 when it has one node).
    """
    if not math.isfinite(threshold):
        raise ValidationError("threshold must be finite", "threshold")
    adj = weight_matrix(graph, nodes)
    nbrs = _threshold_adj(adj, threshold)
    per_node = tuple(
        NodeMetrics(n, len(nbrs[n]), math.fsum(adj[n][m] for m in sorted(adj[n])), local_clustering(nbrs, n))
        for n in adj
    )
    n = len(adj)
    edges = sum(len(v) for v in nbrs.values()) // 2
    density = edges / (n * (n - 1) / 2) if n >= 2 else 0.0
    comps = connected_components(nbrs)
    largest = comps[0] if comps else []
    total = 0
    pairs = 0
    for node in largest:
        for other, d in shortest_path_lengths(nbrs, node).items():
            if other != node:
                total += d
                pairs += 1
    return NetworkReport(per_node, density, total / pairs if pairs else 0.0, len(comps), len(largest), threshold)


def network_from_state(state: Mapping[str, Any], threshold: float = 0.0,
                       agents: Iterable[str] | None = None) -> NetworkReport:
    """Network report over a state's tie map; every student is a node even when isolated."""
    nodes = list(agents) if agents is not None else list(state.get("students", {}))
    ties = {k: w for k, w in state.get("ties", {}).items() if all(x in nodes for x in split_pair(k))}
    return network_metrics(ties, nodes, threshold)


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationReport:
    metric: str
    distance: float
    per_observable: Mapping[str, tuple[float, float]]

    kind = "calibration"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "metric": self.metric, "distance": self.distance,
                "observables": {z: {"weight": w, "distance": d}
                                for z, (w, d) in sorted(self.per_observable.items())}}


def _as_dist(dist: Mapping[str, float] | Sequence[float]) -> dict[str, float]:
    if isinstance(dist, Mapping):
        out = {str(k): float(v) for k, v in dist.items()}
    else:
        out = {str(i): float(v) for i, v in enumerate(dist)}
    for k, v in out.items():
        if not math.isfinite(v) or v < 0:
            raise ValidationError(f"probability {v!r} for {k!r} is not a finite value >= 0", "distribution")
    return out


def distribution_distance(p: Mapping[str, float] | Sequence[float], q: Mapping[str, float] | Sequence[float],
                          metric: str = "total-variation") -> float:
    """TV = 1/2 sum |p - q|; L1 = sum |p - q|. Supports must be identical."""
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}", "metric")
    p, q = _as_dist(p), _as_dist(q)
    if set(p) != set(q):
        raise ValidationError(f"mismatched supports: {sorted(set(p) ^ set(q))}", "support")
    l1 = math.fsum(abs(p[k] - q[k]) for k in sorted(p))
    return 0.5 * l1 if metric == "total-variation" else l1


def calibration_distance(sim: Mapping[str, Any], real: Mapping[str, Any], weights: Mapping[str, float],
                         metric: str = "total-variation") -> CalibrationReport:
    """Weighted sum over observables of D(P_sim, P_real). Weights are required for every observable."""
    if set(sim) != set(real):
        raise ValidationError(f"observables differ: {sorted(set(sim) ^ set(real))}", "observables")
    if set(weights) != set(sim):
        raise ValidationError(f"weights must name exactly the observables {sorted(sim)}", "weights")
    per = {}
    for z in sorted(sim):
        w = float(weights[z])
        if not math.isfinite(w) or w < 0:
            raise ValidationError(f"weight {w!r} for {z!r} must be finite and >= 0", "weights")
        per[z] = (w, distribution_distance(sim[z], real[z], metric))
    return CalibrationReport(metric, math.fsum(w * d for w, d in per.values()), per)


_SPLIT = re.compile(r"[,\t ]+")


def load_histogram(path: str | Path) -> dict[str, float]:
    """Read a two-column (bin label, probability) file; probabilities must sum to 1 +- 1e-9."""
    out: dict[str, float] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = _SPLIT.split(line)
        if len(parts) != 2:
            raise ValidationError(f"line {lineno}: expected two columns", str(path))
        label, value = parts
        try:
            p = float(value)
        except ValueError:
            if lineno == 1 and not out:
                continue  # header row
            raise ValidationError(f"line {lineno}: bad probability {value!r}", str(path)) from None
        if label in out:
            raise ValidationError(f"line {lineno}: duplicate bin {label!r}", str(path))
        if not math.isfinite(p) or p < 0:
            raise ValidationError(f"line {lineno}: probability must be >= 0", str(path))
        out[label] = p
    if not out:
        raise ValidationError("histogram is empty", str(path))
    total = math.fsum(out.values())
    if abs(total - 1.0) > HISTOGRAM_TOLERANCE:
        raise ValidationError(f"probabilities sum to {total!r}, not 1", str(path))
    return out


def _normalize(counts: Mapping[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    return {k: (counts[k] / total if total else 0.0) for k in counts}


def mastery_bin(mu: float) -> str:
    return MASTERY_BINS[min(4, int(mu * 5))]


def observable_distribution(trace: Trace, observable: str,
                            support: Iterable[str] | None = None) -> dict[str, float]:
    """Empirical distribution of one observable from a trace.

    ``mastery``: final node masteries in fifths; ``degree``: final tie degree
    of each student; ``action-kind``: kinds of applied agent actions. When
    ``support`` is given, missing bins are zero-filled and unexpected ones
    rejected.
    """
    counts: dict[str, int] = {}
    if observable == "mastery":
        counts = {b: 0 for b in MASTERY_BINS}
        for data in _final_state(trace)["students"].values():
            for mu in data["graph"]["mastery"].values():
                counts[mastery_bin(float(mu))] += 1
    elif observable == "degree":
        report = network_from_state(_final_state(trace))
        for n in report.nodes:
            counts[str(n.degree)] = counts.get(str(n.degree), 0) + 1
    elif observable == "action-kind":
        for e in trace.events:
            if e.phase == "apply" and e.payload.get("event") == "apply":
                kind = str(e.payload.get("kind"))
                counts[kind] = counts.get(kind, 0) + 1
    else:
        raise ValidationError(f"unknown observable {observable!r}; choose from {OBSERVABLES}", "observable")
    if support is not None:
        support = list(support)
        extra = sorted(set(counts) - set(support))
        if any(counts[k] for k in extra):
            raise ValidationError(f"simulated values outside the support: {extra}", "support")
        counts = {k: counts.get(k, 0) for k in support}
    return _normalize(dict(sorted(counts.items())))


# --------------------------------------------------------------------------
# Trajectory constraints
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    name: str
    kind: str
    threshold: float

    def __post_init__(self) -> None:
        if self.kind not in CONSTRAINT_KINDS:
            raise ValidationError(f"unknown constraint kind {self.kind!r}", f"constraints.{self.name}.kind")
        if isinstance(self.threshold, bool) or not math.isfinite(self.threshold):
            raise ValidationError("threshold must be finite", f"constraints.{self.name}.threshold")


@dataclass(frozen=True)
class ConstraintSpec:
    constraints: tuple[Constraint, ...] = ()
    theta_zone: float = 0.5

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConstraintSpec":
        items = data.get("constraints", [])
        if not isinstance(items, list):
            raise ValidationError("constraints must be a list", "constraints")
        out = []
        for i, c in enumerate(items):
            if not isinstance(c, Mapping):
                raise ValidationError("constraint entries must be objects", f"constraints[{i}]")
            try:
                out.append(Constraint(str(c.get("name", c.get("kind"))), str(c["kind"]), float(c["threshold"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"bad constraint: {exc}", f"constraints[{i}]") from None
        return cls(tuple(out), float(data.get("theta_zone", 0.5)))

    def to_dict(self) -> dict[str, Any]:
        return {"theta_zone": self.theta_zone,
                "constraints": [{"name": c.name, "kind": c.kind, "threshold": c.threshold}
                                for c in self.constraints]}


@dataclass(frozen=True)
class ConstraintViolation:
    name: str
    kind: str
    step: int | None
    agent: str | None
    value: float
    threshold: float

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "step": self.step, "agent": self.agent,
                "value": self.value, "threshold": self.threshold}


@dataclass(frozen=True)
class Verdict:
    valid: bool
    violations: tuple[ConstraintViolation, ...]
    values: Mapping[str, float] = field(default_factory=dict)

    kind = "constraints"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "valid": self.valid,
                "values": {k: self.values[k] for k in sorted(self.values)},
                "violations": [v.to_dict() for v in self.violations]}


def _step_changes(trace: Trace) -> Iterator[tuple[int, dict[tuple[str, str], float], dict[str, float]]]:
    """Per step: |net mastery change| per (student, node) and |net tie change| per pair."""
    prev_m: dict[tuple[str, str], float] | None = None
    prev_g: dict[str, float] | None = None
    for step, state in step_states(trace):
        m = {(sid, c): float(mu) for sid, data in state["students"].items()
             for c, mu in data["graph"]["mastery"].items()}
        g = {k: float(w) for k, w in state["ties"].items()}
        if prev_m is not None:
            dm = {k: abs(v - prev_m.get(k, v)) for k, v in m.items()}
            dg = {k: abs(g.get(k, 0.0) - prev_g.get(k, 0.0)) for k in set(g) | set(prev_g)}
            yield step, dm, dg
        prev_m, prev_g = m, g


def check_constraints(trace: Trace | str | Path, spec: ConstraintSpec) -> Verdict:
    """Evaluate each phi_k over the trajectory; valid iff phi_k <= eps_k for all k."""
    if isinstance(trace, (str, Path)):
        trace = read_trace(trace)
    if not spec.constraints:
        return Verdict(True, (), {})
    kinds = {c.kind for c in spec.constraints}
    step_mastery: list[tuple[int, dict[tuple[str, str], float]]] = []
    step_ties: list[tuple[int, dict[str, float]]] = []
    if kinds & {"max-mastery-step", "tie-bound"}:
        for step, dm, dg in _step_changes(trace):
            step_mastery.append((step, dm))
            step_ties.append((step, dg))
    zpd_events = [e for e in trace.events
                  if e.phase == "apply" and isinstance(e.payload.get("zpd"), Mapping)
                  and "estimated" in e.payload["zpd"]]

    violations: list[ConstraintViolation] = []
    values: dict[str, float] = {}
    for c in spec.constraints:
        if c.kind == "max-mastery-step":
            phi = 0.0
            for step, dm in step_mastery:
                per_student: dict[str, float] = {}
                for (sid, _node), v in dm.items():
                    per_student[sid] = max(per_student.get(sid, 0.0), v)
                for sid in sorted(per_student):
                    v = per_student[sid]
                    phi = max(phi, v)
                    if v > c.threshold:
                        violations.append(ConstraintViolation(c.name, c.kind, step, sid, v, c.threshold))
        elif c.kind == "tie-bound":
            phi = 0.0
            for step, dg in step_ties:
                for key in sorted(dg):
                    v = dg[key]
                    phi = max(phi, v)
                    if v > c.threshold:
                        violations.append(ConstraintViolation(c.name, c.kind, step, key, v, c.threshold))
        else:
            n = len(zpd_events)
            inside = sum(1 for e in zpd_events if float(e.payload["zpd"]["estimated"]) >= spec.theta_zone)
            phi = 1.0 - inside / n if n else 0.0
            if phi > c.threshold:
                first: dict[str, int] = {}
                for e in zpd_events:
                    if float(e.payload["zpd"]["estimated"]) < spec.theta_zone:
                        first.setdefault(e.actor, e.step)
                for agent in sorted(first):
                    violations.append(ConstraintViolation(c.name, c.kind, first[agent], agent, phi, c.threshold))
        values[c.name] = phi
    return Verdict(not violations, tuple(violations), values)


def load_constraints(path: str | Path) -> ConstraintSpec:
    from .codec import loads

    try:
        data = loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ValidationError(f"cannot parse constraint spec: {exc}", str(path)) from None
    if not isinstance(data, Mapping):
        raise ValidationError("constraint spec must be an object", str(path))
    return ConstraintSpec.from_dict(data)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

_ORDER = {"lesson": 0, "network": 1, "calibration": 2, "constraints": 3}


def _ordered(reports: Iterable[Any]) -> list[Any]:
    items = list(reports.values()) if isinstance(reports, Mapping) else list(reports)
    return sorted(items, key=lambda r: _ORDER.get(getattr(r, "kind", ""), len(_ORDER)))


def _num(x: Any) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def _table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> list[str]:
    cells = [[str(h) for h in header]] + [[_num(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return lines


def _text_section(report: Any) -> list[str]:
    if isinstance(report, LessonReport):
        lines = [f"[lesson] avg_mastery={_num(report.avg_mastery)} high={report.high_nodes} "
                 f"low={report.low_nodes} misc={report.misconceptions} total_nodes={report.total_nodes} "
                 f"(high >= {report.thresholds[0]:g}, low < {report.thresholds[1]:g})"]
        lines += _table(("student", "nodes", "avg", "high", "low", "misc"),
                        [(s.student, s.nodes, s.avg_mastery, s.high_nodes, s.low_nodes, s.misconceptions)
                         for s in report.students])
        return lines
    if isinstance(report, NetworkReport):
        lines = [f"[network] density={_num(report.density)} mean_path_length={_num(report.mean_path_length)} "
                 f"components={report.components} mean_clustering={_num(report.mean_clustering)} "
                 f"threshold={report.threshold:g}"]
        lines += _table(("agent", "degree", "strength", "clustering"),
                        [(n.agent, n.degree, n.strength, n.clustering) for n in report.nodes])
        return lines
    if isinstance(report, CalibrationReport):
        lines = [f"[calibration] metric={report.metric} distance={_num(report.distance)}"]
        lines += _table(("observable", "weight", "distance"),
                        [(z, w, d) for z, (w, d) in sorted(report.per_observable.items())])
        return lines
    if isinstance(report, Verdict):
        lines = [f"[constraints] verdict={'valid' if report.valid else 'invalid'}"]
        lines += [f"  {k} = {_num(v)}" for k, v in sorted(report.values.items())]
        if report.violations:
            lines += _table(("name", "kind", "step", "agent", "value", "threshold"),
                            [(v.name, v.kind, v.step, v.agent, v.value, v.threshold) for v in report.violations])
        return lines
    raise TypeError(f"cannot render {type(report).__name__}")


def emit_report(reports: Iterable[Any], fmt: str = "text-table") -> str:
    """Render reports deterministically in canonical section order."""
    ordered = _ordered(reports)
    if fmt == "structured":
        return dumps({"format": REPORT_FORMAT, "version": REPORT_VERSION,
                      "sections": [canon(r.to_dict()) for r in ordered]}) + "\n"
    if fmt != "text-table":
        raise ValidationError(f"unknown report format {fmt!r}", "format")
    lines = [f"{REPORT_FORMAT} {REPORT_VERSION}"]
    for r in ordered:
        lines.append("")
        lines.extend(_text_section(r))
    return "\n".join(lines) + "\n"
