"""Small builders shared by the tests."""

from __future__ import annotations

from edusim.cognition import KnowledgeGraph, LearnerParams, Misconception, StudentState
from edusim.config import build_config, load_fixture, read_config_doc, fixture_path
from edusim.engine import Coefficients, RunConfig
from edusim.pedagogy import ContentEntry, TeacherState
from edusim.policy import PolicyBinding
from edusim.scenery import compose_schedule, instantiate_template


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def make_student(sid, mastery, **params):
    misconceptions = params.pop("misconceptions", ())
    return StudentState(sid, KnowledgeGraph.create(mastery), LearnerParams(**params), (), {},
                        {m.id: m for m in misconceptions})


def make_teacher(tid, concepts, level=0.4):
    return TeacherState(tid, {c: ContentEntry(f"about {c}", level) for c in concepts})


def misconception(mid="m1", concept="a", rho=0.8):
    return Misconception(mid, concept, "wrong idea", "right idea", rho)


def fixture_doc(name):
    return read_config_doc(fixture_path(name))


def fixture_config(name, **overrides):
    doc = fixture_doc(name)
    doc.update(overrides)
    return build_config(doc, fixture_path(name).parent).run


def simple_config(students, teachers, template, bindings, horizon, params=None, coefficients=None, seed=1):
    roster = {s.id: "student" for s in students}
    roster.update({t.id: "teacher" for t in teachers})
    p = {"roster": roster}
    p.update(params or {})
    scenery = instantiate_template(template, p)
    return RunConfig(
        name="test", seed=seed, schedule=compose_schedule([scenery]),
        students={s.id: s for s in students}, teachers={t.id: t for t in teachers},
        bindings={a: PolicyBinding(a, k, prm) for a, (k, prm) in bindings.items()},
        horizon=horizon, coefficients=coefficients or Coefficients(),
    )


__all__ = ["load_fixture"]
