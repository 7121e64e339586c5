from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edusim.actions import Action
from edusim.cognition import InferredProfile
from edusim.errors import PhaseError, ValidationError
from edusim.pedagogy import (
    MOVES,
    PHASES,
    Activity,
    LessonPlan,
    ReflectionRecord,
    adaptive_action,
    classify_challenge,
    cycle_advance,
    default_plan,
    plan_lesson,
    reflect,
    select_action,
    zpd_score,
)
from edusim.scenery import INSTRUCTIONAL_KINDS, instantiate_template

from helpers import make_teacher


def profile(sid, estimates, flagged=()):
    revealed = {mid: (concept, rho) for mid, concept, rho in flagged}
    return InferredProfile(sid, estimates, {c: 1 for c in estimates},
                           tuple(m for m, _, _ in flagged), revealed)


def classroom():
    return instantiate_template("traditional-classroom",
                                {"roster": {"t1": "teacher", "s1": "student", "s2": "student"}})


def test_zpd_peak_and_one_band():
    assert zpd_score(0.5, 0.3, 0.2, 0.07) == 1.0
    assert zpd_score(0.65, 0.3, 0.2, 0.15) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert zpd_score(0.9, 0.3, 0.2, 0.1) == pytest.approx(3.3546262790251185e-4, rel=1e-9)


def test_zpd_rejects_non_positive_band():
    with pytest.raises(ValidationError):
        zpd_score(0.5, 0.3, 0.2, 0.0)


offset = st.floats(0.0, 2.0, allow_nan=False)


@given(st.floats(0.0, 1.0), st.floats(0.0, 0.5), st.floats(0.01, 1.0), offset)
def test_zpd_symmetric_about_peak(mu, delta, sigma, x):
    peak = mu + delta
    assert zpd_score(peak + x, mu, delta, sigma) == pytest.approx(zpd_score(peak - x, mu, delta, sigma), abs=1e-12)


@given(st.floats(0.0, 1.0), st.floats(0.01, 1.0), offset, offset)
def test_zpd_falls_off_with_distance(mu, sigma, x1, x2):
    lo, hi = sorted((x1, x2))
    a, b = zpd_score(mu + 0.1 + lo, mu, 0.1, sigma), zpd_score(mu + 0.1 + hi, mu, 0.1, sigma)
    assert 0.0 <= b <= a <= 1.0
    if hi - lo > 1e-3 and a > 1e-200:
        assert b < a


def test_classify_challenge_examples():
    assert classify_challenge(1.0, 0.5, 0.3) == "in-zone"
    assert classify_challenge(0.99, 0.0, 0.8) == "too-easy"
    assert classify_challenge(0.1, 0.9, 0.3) == "too-hard"
    with pytest.raises(ValidationError):
        classify_challenge(0.0, 0.5, 0.3)


def test_default_plan_equal_split():
    plan = default_plan(["a", "b"], 10)
    assert [a.move for a in plan.activities] == list(MOVES)
    assert [a.budget for a in plan.activities] == [2] * 5


def test_default_plan_remainder_to_assessment():
    plan = default_plan(["a"], 12)
    assert [a.budget for a in plan.activities] == [2, 2, 2, 2, 4]
    assert plan.activities[-1].move == "outcome-assessment"


class GreedyPlanner:
    def plan(self, teacher, objectives, profiles, budget):
        return LessonPlan(tuple((c, 0.8) for c in objectives),
                          tuple(Activity(m, tuple(objectives), 3) for m in MOVES), budget)


def test_plan_lesson_repairs_over_budget_plan():
    teacher = make_teacher("t1", ["a", "b"])
    plan, repairs = plan_lesson(teacher, ["a", "b"], [], 10, GreedyPlanner())
    assert GreedyPlanner().plan(teacher, ["a"], [], 10).used_budget == 15
    assert plan.used_budget <= 10
    assert len(repairs) == 1


def test_plan_lesson_default_and_errors():
    teacher = make_teacher("t1", ["a", "b"])
    plan, repairs = plan_lesson(teacher, ["a", "b"], [], 10)
    assert repairs == [] and plan == default_plan(["a", "b"], 10)
    with pytest.raises(ValidationError):
        plan_lesson(teacher, ["zzz"], [], 10)
    with pytest.raises(ValidationError):
        plan_lesson(teacher, ["a"], [], 4)


def test_lesson_plan_invariants():
    with pytest.raises(ValidationError):
        LessonPlan((("a", 1.5),), (), 5).validate()
    with pytest.raises(ValidationError):
        LessonPlan((), (Activity("dance", ("a",), 1),), 5).validate()


def test_adaptive_challenges_flagged_misconception():
    teacher = make_teacher("t1", ["a", "b"])
    act = adaptive_action(teacher, [profile("s1", {"a": 0.3}, [("m1", "a", 0.6)])], "establish-scaffolds")
    assert act.kind == "misconception-challenge"
    assert act.payload["misconception"] == "m1" and act.target == "s1"


def test_adaptive_ignores_weak_misconception():
    teacher = make_teacher("t1", ["a", "b"])
    act = adaptive_action(teacher, [profile("s1", {"a": 0.3, "b": 0.9}, [("m1", "b", 0.2)])],
                          "establish-scaffolds")
    assert act.kind == "explanation" and act.concept == "a"


def test_adaptive_targets_lowest_estimate_at_peak():
    teacher = make_teacher("t1", ["A", "B"])
    act = adaptive_action(teacher, [profile("s1", {"A": 0.2, "B": 0.7})], "establish-scaffolds", 0.15)
    assert act.concept == "A"
    assert act.demand == pytest.approx(0.35)
    assert zpd_score(act.demand, 0.2, 0.15, 0.15) == 1.0


def test_adaptive_tie_break_lowest_concept():
    teacher = make_teacher("t1", ["c1", "c2"])
    profs = [profile("s1", {"c1": 0.4, "c2": 0.4}, [("m2", "c2", 0.6), ("m1", "c1", 0.6)])]
    assert adaptive_action(teacher, profs, "establish-scaffolds").concept == "c1"


def test_adaptive_is_deterministic():
    teacher = make_teacher("t1", ["A", "B"])
    profs = [profile("s1", {"A": 0.4, "B": 0.2}), profile("s2", {"A": 0.1})]
    assert adaptive_action(teacher, profs, "independent-exploration") == \
        adaptive_action(teacher, profs, "independent-exploration")


class RudePolicy:
    def select(self, teacher, profiles, scenery, phase):
        return Action("shout", target="broadcast")


def test_select_action_replaces_inadmissible_kind():
    teacher = make_teacher("t1", ["a"])
    action, notes = select_action(teacher, [], classroom(), "establish-scaffolds", RudePolicy())
    assert action.kind == "feedback" and len(notes) == 1


def test_select_action_default_is_admissible():
    teacher = make_teacher("t1", ["a"])
    for phase in MOVES:
        action, notes = select_action(teacher, [profile("s1", {"a": 0.2})], classroom(), phase)
        assert notes == [] and action.kind in INSTRUCTIONAL_KINDS
    with pytest.raises(PhaseError):
        select_action(teacher, [], classroom(), "planning")


def test_cycle_advance_examples():
    plan = default_plan(["a"], 10)
    assert cycle_advance("planning", None, 0) == "establish-scaffolds"
    assert cycle_advance("establish-scaffolds", plan, 1) == "establish-scaffolds"
    assert cycle_advance("outcome-assessment", plan, 2) == "reflection"
    with pytest.raises(PhaseError):
        cycle_advance("reflection", plan, 100)


@given(st.integers(5, 60))
def test_cycle_reaches_reflection_in_six_advances(budget):
    plan = default_plan(["a"], budget)
    phase, advances = "planning", 0
    while phase != "reflection":
        phase = cycle_advance(phase, plan, 10**6)
        advances += 1
    assert advances == 6 == len(PHASES) - 1


def record(lesson_id="L1", deltas=None):
    return ReflectionRecord(lesson_id, "room", ("s1",), None, (), (), deltas or {"s1": {"a": 0.1}}, {"avg": 0.5})


def test_reflect_appends_in_order():
    teacher = make_teacher("t1", ["a"])
    one = reflect(teacher, record("L1"))
    two = reflect(one, record("L2"))
    assert len(teacher.records) == 0 and len(one.records) == 1
    assert [r.lesson_id for r in two.records] == ["L1", "L2"]
    assert two.knowledge == teacher.knowledge


def test_reflect_keeps_duplicates_and_rejects_bad_records():
    teacher = make_teacher("t1", ["a"])
    r = record()
    assert len(reflect(reflect(teacher, r), r).records) == 2
    with pytest.raises(ValidationError):
        reflect(teacher, record(deltas={"ghost": {"a": 0.1}}))
