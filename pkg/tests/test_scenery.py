from __future__ import annotations

from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edusim.codec import split_pair
from edusim.engine import run
from edusim.errors import UnknownIdError, ValidationError
from edusim.scenery import (
    DIMENSIONS,
    INSTRUCTIONAL_KINDS,
    Scenery,
    admissible_actions,
    compose_schedule,
    instantiate_template,
    load_library,
    load_scenery,
    mutate_scenery,
    save_library,
    save_scenery,
    score_scenery,
)

from helpers import fixture_config


def roster(n_students, teachers=1, prefix="s"):
    out = {f"t{i + 1}": "teacher" for i in range(teachers)}
    out.update({f"{prefix}{i + 1}": "student" for i in range(n_students)})
    return out


def test_traditional_star_prior():
    sc = instantiate_template("traditional-classroom", {"roster": roster(3)})
    teacher_edges = {k: p for k, p in sc.prior.edges.items() if "t1" in split_pair(k)}
    peer_edges = {k: p for k, p in sc.prior.edges.items() if "t1" not in split_pair(k)}
    assert sorted(teacher_edges.values()) == [0.8] * 3
    assert sorted(peer_edges.values()) == [0.05] * 3
    assert sc.prior.topology == "teacher-centered-star"


def test_open_classroom_groups_and_within_edges():
    sc = instantiate_template("open-classroom", {"roster": roster(8), "group_size": 4})
    assert len(sc.groups) == 2
    # count by hand: every student pair sharing a group
    group_of = {a: i for i, g in enumerate(sc.groups) for a in g}
    expected = sum(1 for a, b in combinations(sc.students, 2) if group_of[a] == group_of[b])
    within = [k for k, p in sc.prior.edges.items() if p == 0.6]
    assert expected == 12 == len(within)
    assert all(p in (0.6, 0.1, 0.3) for p in sc.prior.edges.values())


def test_recess_and_online_templates():
    recess = instantiate_template("informal-recess", {"roster": roster(4, teachers=0)})
    assert set(recess.prior.edges.values()) == {0.2}
    assert "teacher" not in recess.activities
    online = instantiate_template("online", {"roster": roster(2)})
    assert online.norms.persistent_artifacts and online.rhythm.asynchronous


def test_template_errors():
    with pytest.raises(ValidationError):
        instantiate_template("informal-recess", {"roster": roster(3)})
    with pytest.raises(ValidationError):
        instantiate_template("lecture-hall", {"roster": roster(3)})
    with pytest.raises(ValidationError):
        instantiate_template("traditional-classroom", {"roster": roster(3, teachers=0)})
    with pytest.raises(ValidationError):
        instantiate_template("online", {"roster": {"t1": "teacher"}})


def test_template_determinism():
    a = instantiate_template("open-classroom", {"roster": roster(7), "group_size": 3})
    b = instantiate_template("open-classroom", {"roster": roster(7), "group_size": 3})
    assert a.to_dict() == b.to_dict()


def test_admissible_actions_examples():
    trad = instantiate_template("traditional-classroom", {"roster": roster(2)})
    assert admissible_actions(trad, "student") == {"respond", "question-when-invited", "listen"}
    assert set(INSTRUCTIONAL_KINDS) <= admissible_actions(trad, "teacher")
    assert "peer-explain" in admissible_actions(trad, "student", "collaborative-learning")
    recess = instantiate_template("informal-recess", {"roster": roster(2, teachers=0)})
    assert {"initiate-topic", "join-topic", "exit-topic"} <= admissible_actions(recess, "student")
    with pytest.raises(UnknownIdError):
        admissible_actions(recess, "teacher")


def test_compose_schedule_examples():
    lesson = instantiate_template("traditional-classroom", {"roster": roster(2)})
    recess = instantiate_template("informal-recess", {"roster": roster(2, teachers=0)})
    assert len(compose_schedule([lesson, recess]).scenes) == 2
    assert len(compose_schedule([lesson, lesson]).scenes) == 2
    with pytest.raises(ValidationError):
        compose_schedule([])
    other = instantiate_template("informal-recess", {"roster": roster(3, teachers=0)})
    with pytest.raises(ValidationError):
        compose_schedule([lesson, other])


def test_mutate_grouping_policy_option_set():
    base = instantiate_template("open-classroom", {"roster": roster(8), "group_size": 4})
    seen = {mutate_scenery(base, "grouping-policy", seed).dims["grouping-policy"] for seed in range(40)}
    assert seen == {2, 3, 6}


def test_mutate_is_deterministic_and_local():
    base = instantiate_template("open-classroom", {"roster": roster(8)})
    for dim in DIMENSIONS:
        m1, m2 = mutate_scenery(base, dim, 7), mutate_scenery(base, dim, 7)
        assert m1 == m2
        changed = [d for d in DIMENSIONS if m1.dims[d] != base.dims[d]]
        assert changed == [dim]


def test_mutate_teacher_role_on_recess_fails():
    recess = instantiate_template("informal-recess", {"roster": roster(3, teachers=0)})
    with pytest.raises(ValidationError):
        mutate_scenery(recess, "teacher-role", 0)


@settings(max_examples=30)
@given(st.integers(0, 2**32), st.sampled_from(DIMENSIONS))
def test_mutant_passes_invariants(seed, dim):
    base = instantiate_template("traditional-classroom", {"roster": roster(5)})
    mutant = mutate_scenery(base, dim, seed)
    mutant.validate()
    assert Scenery.from_dict(mutant.to_dict()) == mutant


def test_scenery_roundtrip_and_library(tmp_path):
    sc = instantiate_template("open-classroom", {"roster": roster(5), "relations": {"s1|s2": 0.4}})
    save_scenery(tmp_path / "one.json", sc, {"seed": 1})
    assert load_scenery(tmp_path / "one.json") == sc
    other = mutate_scenery(sc, "assessment-mode", 3)
    save_library(tmp_path / "lib", [sc, other])
    lib = load_library(tmp_path / "lib")
    assert lib == {sc.id: sc, other.id: other}


def test_relations_must_be_in_unit_interval():
    with pytest.raises(ValidationError):
        instantiate_template("open-classroom", {"roster": roster(2), "relations": {"s1|s2": 1.4}})


@pytest.fixture(scope="module")
def lesson_trace():
    config = fixture_config("lesson-3x1")
    return config, run(config)


def test_score_learning_is_final_avg_mastery(lesson_trace):
    config, trace = lesson_trace
    scenery = config.schedule.scenes[0]
    score = score_scenery(scenery, trace)
    students = trace.final_state["students"]
    per_student = [np.mean(list(s["graph"]["mastery"].values())) for s in students.values()]
    assert score.learning == pytest.approx(float(np.mean(per_student)), abs=1e-12)
    assert score.novelty == 0.0
    assert all(0.0 <= v <= 1.0 for v in score.as_tuple())


def test_score_rejects_foreign_trace(lesson_trace):
    _, trace = lesson_trace
    other = instantiate_template("open-classroom", {"roster": roster(3)})
    with pytest.raises(ValidationError):
        score_scenery(other, trace)


def test_equity_is_one_for_identical_students():
    from helpers import fixture_doc
    from edusim.config import build_config, fixture_path

    doc = fixture_doc("listen-3")
    for student in doc["students"]:
        student["mastery"] = {"fractions": 0.3}
    config = build_config(doc, fixture_path("listen-3").parent).run
    trace = run(config)
    assert score_scenery(config.schedule.scenes[0], trace).equity == 1.0
    spread = score_scenery(fixture_config("listen-3").schedule.scenes[0], run(fixture_config("listen-3")))
    assert spread.equity < 1.0


def test_filter_flag():
    from edusim.scenery import SceneryScore

    assert SceneryScore(0.9, 0.1, 0.5, 0.5, 0.5).flagged
    assert not SceneryScore(0.5, 0.5, 0.5, 0.5, 0.5).flagged
