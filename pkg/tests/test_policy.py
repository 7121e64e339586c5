from __future__ import annotations

import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edusim.cognition import Observation, VisibleEvent
from edusim.errors import MalformedResponse, RemoteConnectionError, RemoteTimeout, ValidationError, Violation
from edusim.policy import (
    ActionRequest,
    PolicyBinding,
    RemotePolicy,
    RuleStudent,
    ScriptedTeacher,
    make_policy,
    remote_call,
    validate_response,
)
from edusim.scenery import admissible_actions, instantiate_template

from helpers import make_teacher

OPEN = frozenset(instantiate_template("open-classroom", {"roster": {"t1": "teacher", "s1": "student"}})
                 .activities["student"])


def student_obs(mastery, cue_kind="explanation", admissible=OPEN, step=3):
    cue = VisibleEvent(1, step - 1, "t1", "broadcast", ("s1", "t1"), cue_kind, "x", "a", "broadcast")
    return Observation("s1", step, "student", (cue,), {"admissible": sorted(admissible), "phase": "x"},
                       self_view={"mastery": {"a": mastery}, "misconceptions": [], "draws": [0.5] * 4})


def teacher_obs(phase="establish-scaffolds"):
    return Observation("t1", 0, "teacher", (), {"admissible": ["explanation"], "phase": phase},
                       self_view={"teacher": make_teacher("t1", ["a"]), "profiles": []})


def test_rule_student_answers_from_mastery():
    act = RuleStudent().decide(student_obs(0.7))
    assert act.kind == "respond" and act.payload["correct"] is True
    assert act.payload["r"] == 0.7


def test_rule_student_asks_when_weak():
    assert RuleStudent().decide(student_obs(0.1)).kind == "ask-question"


def test_rule_student_listens_in_middle_band():
    assert RuleStudent().decide(student_obs(0.35)).kind == "listen"


def test_rule_student_is_pure():
    obs = student_obs(0.6)
    assert RuleStudent().decide(obs) == RuleStudent().decide(obs)


def test_scripted_teacher_replays_in_order():
    script = [{"kind": "explanation", "concept": "a", "payload": {"text": str(i)}} for i in range(5)]
    teacher = ScriptedTeacher(script)
    acts = [teacher.decide(teacher_obs()) for _ in range(4)]
    assert acts[3].payload["text"] == "3"
    assert teacher.index == 4
    assert ScriptedTeacher(script).decide(teacher_obs("planning")).kind == "listen"


def test_binding_validation():
    with pytest.raises(ValidationError):
        PolicyBinding("x", "remote", {"endpoint": "http://h"}).validate()
    with pytest.raises(ValidationError):
        PolicyBinding("x", "scripted-teacher", {}).validate()
    with pytest.raises(ValidationError):
        PolicyBinding("x", "rule-student", {}).validate("teacher")
    with pytest.raises(ValidationError):
        PolicyBinding("x", "oracle", {}).validate()
    PolicyBinding("x", "remote", {"endpoint": "http://h", "timeout": 1}).validate("student")


# ---------------------------------------------------------------- validation


def test_validate_clamps_out_of_range():
    decision = validate_response({"kind": "explanation", "payload": {"q": 1.3, "s": -0.2}},
                                 {"explanation"})
    assert decision.action.payload["q"] == 1.0 and decision.action.payload["s"] == 0.0
    assert [c["field"] for c in decision.clamps] == ["q", "s"]


def test_validate_rejects_inadmissible_kind():
    trad = instantiate_template("traditional-classroom", {"roster": {"t1": "teacher", "s1": "student"}})
    with pytest.raises(Violation):
        validate_response({"kind": "broadcast"}, admissible_actions(trad, "student"))


def test_validate_passes_clean_response():
    decision = validate_response({"kind": "respond", "target": "t1", "concept": "a",
                                  "payload": {"q": 0.5, "r": 0.25, "text": "ok"}}, {"respond"})
    assert decision.clamps == ()
    assert decision.action.payload == {"q": 0.5, "r": 0.25, "text": "ok"}


def test_validate_rejects_unparseable():
    for bad in (None, [], {"payload": {}}, {"kind": "respond", "payload": {"q": "high"}},
                {"kind": "respond", "payload": []}):
        with pytest.raises(Violation):
            validate_response(bad, {"respond"})


scalars = st.none() | st.booleans() | st.floats(allow_nan=False) | st.sampled_from(["respond", "listen", "broadcast", ""])
payloads = st.dictionaries(st.sampled_from(["q", "r", "s", "e", "d", "text"]), scalars, max_size=5)


@given(st.fixed_dictionaries({}, optional={"kind": scalars, "target": scalars, "concept": scalars,
                                           "payload": payloads | scalars}))
def test_validate_never_leaks_inadmissible(response):
    admissible = {"respond", "listen"}
    try:
        decision = validate_response(response, admissible)
    except Violation:
        return
    assert decision.action.kind in admissible
    for name in ("q", "r", "s", "e"):
        if name in decision.action.payload:
            assert 0.0 <= decision.action.payload[name] <= 1.0


# ---------------------------------------------------------------- wire


REQUEST = ActionRequest("s1", "student", 3, {"observer": "s1"}, ("listen", "respond"))


def test_remote_echo_roundtrip(mock_server):
    fixed = {"kind": "respond", "target": "t1", "concept": "a", "payload": {"q": 0.4}, "rationale": "r"}
    srv = mock_server("echo", response=fixed)
    assert remote_call(srv.endpoint, REQUEST, timeout=2.0) == fixed
    assert srv.requests[0]["agent_id"] == "s1"
    assert list(srv.requests[0])[:3] == ["agent_id", "role", "step"]


def test_remote_timeout(mock_server):
    srv = mock_server("sleep", delay=1.0)
    start = time.monotonic()
    with pytest.raises(RemoteTimeout):
        remote_call(srv.endpoint, REQUEST, timeout=0.2)
    assert time.monotonic() - start < 1.0


def test_remote_truncated_and_garbage(mock_server):
    with pytest.raises(MalformedResponse):
        remote_call(mock_server("truncated").endpoint, REQUEST, timeout=2.0)
    with pytest.raises(MalformedResponse):
        remote_call(mock_server("garbage").endpoint, REQUEST, timeout=2.0)
    with pytest.raises(MalformedResponse):
        remote_call(mock_server("error").endpoint, REQUEST, timeout=2.0)


def test_remote_connection_refused():
    with pytest.raises(RemoteConnectionError):
        remote_call("http://127.0.0.1:9/act", REQUEST, timeout=0.5)


def test_remote_retries(mock_server):
    srv = mock_server("error")
    with pytest.raises(MalformedResponse):
        remote_call(srv.endpoint, REQUEST, timeout=1.0, retries=2)
    assert len(srv.requests) == 3


def test_remote_policy_validates(mock_server):
    srv = mock_server("echo", response={"kind": "respond", "payload": {"r": 3.0}})
    policy = RemotePolicy(srv.endpoint, 2.0)
    decision = policy.decide(student_obs(0.5))
    assert decision.action.payload["r"] == 1.0 and decision.clamps
    assert srv.requests[0]["admissible"] == sorted(OPEN)


def test_make_policy_kinds():
    assert isinstance(make_policy(PolicyBinding("s", "rule-student", {"uptake": 0.3})), RuleStudent)
    remote = make_policy(PolicyBinding("s", "remote", {"endpoint": "http://h:1/", "timeout": 0.5}),
                         {"remote_cost": 50.0})
    assert remote.cost == 50.0 and remote.remote
