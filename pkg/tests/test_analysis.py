from __future__ import annotations

import math
import random
from dataclasses import replace
from itertools import combinations

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edusim.analysis import (
    ConstraintSpec,
    LessonReport,
    calibration_distance,
    check_constraints,
    classify,
    distribution_distance,
    emit_report,
    lesson_metrics,
    load_histogram,
    network_metrics,
    observable_distribution,
    shortest_path_lengths,
)
from edusim.codec import loads
from edusim.engine import run
from edusim.errors import ValidationError

from helpers import fixture_config


def state_with(masteries, misconceptions=0):
    return {"students": {f"s{i}": {"graph": {"mastery": m},
                                   "misconceptions": {f"m{j}": {} for j in range(misconceptions)}}
                         for i, m in enumerate(masteries)}}


# ---------------------------------------------------------------- lesson


def test_lesson_metrics_substitution():
    rep = lesson_metrics(state_with([{"a": 0.9, "b": 0.1, "c": 0.5}]))
    assert rep.avg_mastery == pytest.approx(0.5, abs=1e-15)
    assert (rep.high_nodes, rep.low_nodes, rep.total_nodes) == (1, 1, 3)


def test_lesson_boundaries():
    assert classify(0.8) == "high"
    assert classify(0.2) == "mid"
    assert classify(0.19999999999) == "low"
    assert classify(0.7999999999) == "mid"
    rep = lesson_metrics(state_with([{"a": 0.8, "b": 0.2, "c": 0.19999}]))
    assert (rep.high_nodes, rep.low_nodes) == (1, 1)


def test_lesson_all_perfect_with_misconceptions():
    rep = lesson_metrics(state_with([{"a": 1.0, "b": 1.0, "c": 1.0}], misconceptions=2))
    assert (rep.avg_mastery, rep.high_nodes, rep.low_nodes, rep.misconceptions) == (1.0, 3, 0, 2)


def test_lesson_empty_graph_is_flagged_and_excluded():
    rep = lesson_metrics(state_with([{}, {"a": 0.4}]))
    assert rep.students[0].flagged and rep.students[0].avg_mastery is None
    assert rep.avg_mastery == pytest.approx(0.4)
    with pytest.raises(ValidationError):
        lesson_metrics({"students": {}})


@given(st.lists(st.dictionaries(st.sampled_from("abcdef"), st.floats(0, 1), max_size=6), min_size=1, max_size=4))
def test_lesson_invariants(graphs):
    rep = lesson_metrics(state_with(graphs))
    assert rep.high_nodes + rep.low_nodes <= rep.total_nodes
    if rep.avg_mastery is not None:
        assert 0.0 <= rep.avg_mastery <= 1.0


# ---------------------------------------------------------------- network


def test_triangle_and_star():
    tri = network_metrics({"a|b": 1.0, "b|c": 1.0, "a|c": 1.0})
    for n in tri.nodes:
        assert (n.degree, n.strength, n.clustering) == (2, 2.0, 1.0)
    star = network_metrics({"c|l1": 0.5, "c|l2": 0.5, "c|l3": 0.5})
    center = star.node("c")
    assert (center.degree, center.strength, center.clustering) == (3, 1.5, 0.0)
    assert all(star.node(f"l{i}").clustering == 0.0 for i in (1, 2, 3))


def test_asymmetric_nested_input_rejected():
    with pytest.raises(ValidationError):
        network_metrics({"a": {"b": 0.5}, "b": {"a": 0.4}})
    sym = network_metrics({"a": {"b": 0.5}, "b": {"a": 0.5}})
    assert sym.node("a").strength == 0.5


def random_graph(rng, n, p):
    nodes = [f"v{i}" for i in range(n)]
    ties = {f"{a}|{b}": rng.choice([0.0, 0.2, 0.5, 1.0]) for a, b in combinations(nodes, 2) if rng.random() < p}
    return nodes, ties


def brute_clustering(nodes, edges, v):
    nbrs = [u for u in nodes if (u, v) in edges]
    if len(nbrs) < 2:
        return 0.0
    closed = sum(1 for a, b in combinations(nbrs, 2) if (a, b) in edges)
    return closed / math.comb(len(nbrs), 2)


def floyd_warshall(nodes, edges):
    inf = math.inf
    d = {(a, b): 0 if a == b else (1 if (a, b) in edges else inf) for a in nodes for b in nodes}
    for k in nodes:
        for i in nodes:
            for j in nodes:
                if d[i, k] + d[k, j] < d[i, j]:
                    d[i, j] = d[i, k] + d[k, j]
    return d


def test_network_matches_brute_force_and_networkx():
    rng = random.Random(7)
    for _ in range(200):
        nodes, ties = random_graph(rng, rng.randint(1, 8), rng.random())
        edges = set()
        for key, w in ties.items():
            a, b = key.split("|")
            if w > 0:
                edges |= {(a, b), (b, a)}
        rep = network_metrics(ties, nodes)
        g = nx.Graph()
        g.add_nodes_from(nodes)
        g.add_edges_from((a, b) for a, b in edges)
        nx_clust = nx.clustering(g)
        dist = floyd_warshall(nodes, edges)
        for v in nodes:
            assert rep.node(v).clustering == brute_clustering(nodes, edges, v) == pytest.approx(nx_clust[v])
            assert rep.node(v).degree == g.degree[v]
            bfs = shortest_path_lengths({u: {b for a, b in edges if a == u} for u in nodes}, v)
            for u in nodes:
                assert bfs.get(u, math.inf) == dist[v, u]
        assert rep.components == nx.number_connected_components(g)


def test_mean_path_length_on_largest_component():
    rep = network_metrics({"a|b": 1.0, "b|c": 1.0, "x|y": 1.0}, ["a", "b", "c", "x", "y", "z"])
    # path a-b-c: ordered pair distances 1,2,1,1,2,1 -> 8/6
    assert rep.mean_path_length == pytest.approx(8 / 6)
    assert (rep.components, rep.largest_component) == (3, 3)
    assert rep.density == pytest.approx(3 / 15)


# ---------------------------------------------------------------- calibration


def test_distance_examples():
    assert distribution_distance([0.5, 0.5], [1.0, 0.0]) == 0.5
    assert distribution_distance([0.5, 0.5], [1.0, 0.0], "l1") == 1.0
    assert distribution_distance({"x": 1.0, "y": 0.0}, {"x": 0.0, "y": 1.0}) == 1.0
    with pytest.raises(ValidationError):
        distribution_distance({"x": 1.0}, {"y": 1.0})


def test_calibration_weighted_sum():
    sim = {"m": {"a": 0.5, "b": 0.5}, "d": {"1": 1.0, "2": 0.0}}
    real = {"m": {"a": 1.0, "b": 0.0}, "d": {"1": 0.0, "2": 1.0}}
    rep = calibration_distance(sim, real, {"m": 2.0, "d": 0.5})
    assert rep.distance == pytest.approx(2.0 * 0.5 + 0.5 * 1.0, abs=1e-12)
    assert calibration_distance(sim, sim, {"m": 1.0, "d": 1.0}).distance == 0.0
    with pytest.raises(ValidationError):
        calibration_distance(sim, real, {"m": 1.0})


def simplex(n):
    return st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n).map(lambda xs: [x / sum(xs) for x in xs])


@settings(max_examples=200)
@given(simplex(5), simplex(5), simplex(5))
def test_tv_symmetry_and_triangle(p, q, r):
    tv = distribution_distance
    assert tv(p, q) == pytest.approx(tv(q, p), abs=1e-15)
    assert tv(p, r) <= tv(p, q) + tv(q, r) + 1e-12
    assert 0.0 <= tv(p, q) <= 1.0 + 1e-12


def test_load_histogram(tmp_path):
    good = tmp_path / "h.tsv"
    good.write_text("bin\tprob\n0.0-0.2\t0.25\n0.2-0.4\t0.75\n")
    assert load_histogram(good) == {"0.0-0.2": 0.25, "0.2-0.4": 0.75}
    bad = tmp_path / "bad.tsv"
    bad.write_text("a 0.5\nb 0.4\n")
    with pytest.raises(ValidationError):
        load_histogram(bad)


@pytest.fixture(scope="module")
def recess_trace():
    return run(fixture_config("recess-11"))


def test_observable_distributions_sum_to_one(recess_trace):
    for obs in ("mastery", "degree", "action-kind"):
        dist = observable_distribution(recess_trace, obs)
        assert math.fsum(dist.values()) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValidationError):
        observable_distribution(recess_trace, "mood")


# ---------------------------------------------------------------- constraints


def test_empty_spec_is_valid(recess_trace):
    assert check_constraints(recess_trace, ConstraintSpec()).valid


@pytest.fixture(scope="module")
def empty_trace():
    trace = run(replace(fixture_config("listen-3"), horizon=0))
    assert trace.events == []
    return trace


@given(st.floats(0, 1), st.sampled_from(["max-mastery-step", "zpd-band-fraction-min", "tie-bound"]))
def test_zero_event_trace_is_valid(empty_trace, eps, kind):
    trace = empty_trace
    spec = ConstraintSpec.from_dict({"constraints": [{"kind": kind, "threshold": eps}]})
    assert check_constraints(trace, spec).valid


def test_alpha_one_violates_mastery_step():
    trace = run(fixture_config("alpha-1"))
    spec = ConstraintSpec.from_dict({"constraints": [{"name": "gradual", "kind": "max-mastery-step",
                                                      "threshold": 0.3}]})
    verdict = check_constraints(trace, spec)
    assert not verdict.valid
    v = verdict.violations[0]
    assert v.step is not None and v.value > 0.3


def test_adaptive_teacher_stays_in_band():
    trace = run(fixture_config("lesson-3x1"))
    spec = ConstraintSpec.from_dict({"constraints": [{"kind": "zpd-band-fraction-min", "threshold": 0.0}]})
    verdict = check_constraints(trace, spec)
    assert verdict.valid and verdict.values["zpd-band-fraction-min"] == 0.0


def test_unknown_constraint_kind_rejected():
    with pytest.raises(ValidationError):
        ConstraintSpec.from_dict({"constraints": [{"kind": "vibes", "threshold": 1}]})
    with pytest.raises(ValidationError):
        ConstraintSpec.from_dict({"constraints": [{"kind": "tie-bound", "threshold": "inf"}]})


# ---------------------------------------------------------------- reports


def test_emit_report_empty_and_deterministic(recess_trace):
    assert emit_report([]) == "edusim-report 1.0\n"
    net = network_metrics(recess_trace.final_state["ties"], list(recess_trace.final_state["students"]))
    lesson = lesson_metrics(recess_trace)
    a = emit_report([net, lesson])
    assert a == emit_report([lesson, net])
    assert a.index("[lesson]") < a.index("[network]")
    structured = emit_report([net, lesson], "structured")
    doc = loads(structured)
    assert [s["kind"] for s in doc["sections"]] == ["lesson", "network"]
    assert structured == emit_report([lesson, net], "structured")


def test_lesson_report_type():
    assert LessonReport.kind == "lesson"


def test_permutation_invariance_of_clustering():
    rng = random.Random(3)
    nodes, ties = random_graph(rng, 6, 0.6)
    base = {n.agent: n.clustering for n in network_metrics(ties, nodes).nodes}
    for _ in range(10):
        perm = dict(zip(nodes, rng.sample(nodes, len(nodes))))
        renamed = {}
        for key, w in ties.items():
            a, b = key.split("|")
            renamed["|".join(sorted((perm[a], perm[b])))] = w
        moved = {n.agent: n.clustering for n in network_metrics(renamed, nodes).nodes}
        assert all(moved[perm[v]] == base[v] for v in nodes)
