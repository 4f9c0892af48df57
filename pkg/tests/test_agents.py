import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from closedloop.agents import (
    AgentSet,
    decompose,
    describe,
    fuse_detections,
    iou,
    merge_group,
    multi_object,
    perceive,
    project,
    reflect,
    single_agent,
    think,
)
from closedloop.errors import (
    DecompositionError,
    DescriptorError,
    GroundingError,
    PerceptionMiss,
    SchemaViolation,
    ThinkerError,
)
from closedloop.oracle import OracleBackend
from closedloop.sim import load_scenario, reset
from closedloop.state import (
    ActionPlan,
    AtomicInstruction,
    Detection,
    GraspPoint3D,
    MemoryTag,
    ObjectNode,
    PerceptionTargets,
    SceneGraph,
)
from conftest import RoleBackend

# -- decomposer / descriptor / perceptor ---------------------------------------------------

STACK_PLAN = {"subtasks": [
    {"verb": "pick_place", "object": "blue block", "target": "red block", "text": "blue on red"},
    {"verb": "pick_place", "object": "green block", "target": "blue block", "text": "green on blue"}]}


def test_decompose_fixture_plan():
    plan = decompose("stack the blocks in the order red, blue and green", RoleBackend(decomposer=STACK_PLAN))
    assert [(s.id, s.verb, s.object_query, s.target_query) for s in plan] == [
        ("s1", "pick_place", "blue block", "red block"), ("s2", "pick_place", "green block", "blue block")]
    assert multi_object(plan)


def test_decompose_single_step_and_errors():
    one = decompose("push it", RoleBackend(decomposer={"subtasks": [{"verb": "push", "object": "cup"}]}))
    assert len(one) == 1 and not multi_object(one)
    with pytest.raises(SchemaViolation):
        decompose("x", RoleBackend(decomposer={"subtasks": [{"verb": "teleport", "object": "cup"}]}))
    with pytest.raises(DecompositionError):
        decompose("x", RoleBackend(decomposer={"subtasks": []}))
    with pytest.raises(SchemaViolation):
        decompose("x", RoleBackend(decomposer="not json at all"))


def test_describe_two_objects_from_ground_truth():
    sim, obs = reset(load_scenario("two_objects"), 0)
    g = describe(obs, OracleBackend(sim))
    assert {n.id for n in g.nodes} == {"red_block", "green_pad"}
    rels = {(e.subject_id, e.relation, e.object_id) for e in g.edges}
    assert ("red_block", "left_of", "green_pad") in rels and ("green_pad", "right_of", "red_block") in rels
    assert g.is_symmetric_closed()


def test_describe_empty_and_bad_edges():
    obs = reset(load_scenario("two_objects"), 0)[1]
    assert describe(obs, RoleBackend(descriptor={"nodes": [], "edges": []})).nodes == []
    bad = {"nodes": [{"id": "a", "label": "a"}], "edges": [["a", "left_of", "ghost"]]}
    with pytest.raises(DescriptorError):
        describe(obs, RoleBackend(descriptor=bad))
    dup = {"nodes": [{"id": "a", "label": "x"}, {"id": "a", "label": "y"}], "edges": []}
    with pytest.raises(DescriptorError):
        describe(obs, RoleBackend(descriptor=dup))


def graph(*labels):
    return SceneGraph([ObjectNode(lab.replace(" ", "_"), lab) for lab in labels])


def test_perceive_assigns_interest():
    g = graph("red block", "green pad", "wooden block")
    sub = AtomicInstruction("s1", "pick_place", "red block", "green pad")
    reply = {"object_of_interest": "red block", "target": "green pad",
             "not_object_of_interest": ["wooden block"]}
    t = perceive(sub, g, RoleBackend(perceptor=reply))
    assert t.object_of_interest == "red block" and "wooden block" in t.not_object_of_interest


def test_perceive_miss_and_single_object():
    g = graph("red block")
    sub = AtomicInstruction("s1", "push", "purple prism")
    with pytest.raises(PerceptionMiss):
        perceive(sub, g, RoleBackend(perceptor={"object_of_interest": "purple prism"}))
    t = perceive(AtomicInstruction("s1", "push", "red block"), g,
                 RoleBackend(perceptor={"object_of_interest": "red block", "not_object_of_interest": []}))
    assert t.not_object_of_interest == ()


# -- fusion -------------------------------------------------------------------------------

def test_fusion_single_source_is_identity():
    d = Detection("red block", (1, 2, 11, 12), 0.7, "a")
    assert fuse_detections({"a": [d]}, ["red block"]) == [d]


def test_fusion_agreeing_pair():
    a = Detection("red block", (0, 0, 10, 10), 0.8, "a")
    b = Detection("red block", (0, 0, 10, 9), 0.6, "b")
    assert math.isclose(iou(a.bbox, b.bbox), 0.9)
    (f,) = fuse_detections({"a": [a], "b": [b]}, ["red block"])
    assert math.isclose(f.confidence, 1 - 0.2 * 0.4)
    assert f.bbox == pytest.approx((0, 0, 10, (0.8 * 10 + 0.6 * 9) / 1.4))
    assert f.source == "a+b"


def test_fusion_conflict_uses_scene_graph_then_confidence():
    g = graph("red block", "green pad")
    g.add_relation("red_block", "left_of", "green_pad")
    pad = Detection("green pad", (60, 40, 80, 60), 0.9, "a")
    left = Detection("red block", (10, 40, 30, 60), 0.5, "a")
    right = Detection("red block", (100, 40, 120, 60), 0.9, "b")
    assert iou(left.bbox, right.bbox) < 0.5
    per = {"a": [pad, left], "b": [right]}
    fused = {d.label: d for d in fuse_detections(per, ["red block", "green pad"], g)}
    assert fused["red block"] == left
    # brute force: exactly one of the candidates satisfies the relation
    assert [c.center[0] < pad.center[0] for c in (left, right)] == [True, False]
    # without relational evidence the more confident box wins
    fused = {d.label: d for d in fuse_detections(per, ["red block", "green pad"], None)}
    assert fused["red block"] == right


def test_fusion_missing_required_label():
    with pytest.raises(GroundingError):
        fuse_detections({"a": [], "b": []}, ["red block"])
    d = Detection("red block", (1, 2, 11, 12), 0.7, "a")
    assert fuse_detections({"a": [d]}, ["red block", "mug"], required=["red block"]) == [d]


boxes = st.tuples(st.floats(0, 60), st.floats(0, 60), st.floats(2, 40), st.floats(2, 40)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(boxes, st.floats(0.05, 1.0), st.sampled_from(["a", "b", "c"])), min_size=1, max_size=5),
       st.randoms(use_true_random=False))
def test_fusion_permutation_invariance(items, rnd):
    dets = [Detection("obj", b, c, s) for b, c, s in items]
    per = {}
    for d in dets:
        per.setdefault(d.source, []).append(d)
    base = fuse_detections(per, ["obj"])
    order = list(per)
    rnd.shuffle(order)
    shuffled = {k: rnd.sample(per[k], len(per[k])) for k in order}
    assert fuse_detections(shuffled, ["obj"]) == base


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=4))
def test_merge_confidence_is_noisy_or(confs):
    group = [Detection("o", (0, 0, 10, 10), c, f"s{i}") for i, c in enumerate(confs)]
    assert math.isclose(merge_group(group).confidence, 1 - math.prod(1 - c for c in confs), abs_tol=1e-12)


# -- projector ----------------------------------------------------------------------------

def test_project_lands_on_block_top():
    sim, obs = reset(load_scenario("two_objects"), 0)
    g = describe(obs, OracleBackend(sim))
    from closedloop.sim import mask_bbox
    dets = [Detection(lab, mask_bbox(obs.masks[oid]), 0.9, "a")
            for oid, lab in (("red_block", "red block"), ("green_pad", "green pad"))]
    t = PerceptionTargets("red block", "green pad")
    g2, g3 = project(t, dets, obs, sim.camera, g)
    assert all(obs.masks[p.object_id][int(p.v), int(p.u)] for p in g2)
    red = sim.world["red_block"]
    assert abs(g3[0].Z - red.top) <= 1e-4
    assert np.hypot(g3[0].center[0] - red.pose[0], g3[0].center[1] - red.pose[1]) < 0.005


# -- thinker ------------------------------------------------------------------------------

def _gps():
    return [GraspPoint3D(0.40, 0.10, 0.02, "red_block"), GraspPoint3D(0.60, -0.10, 0.02, "green_pad")]


def test_think_stacks_on_target_top():
    g = graph("red block", "green pad")
    sub = AtomicInstruction("s1", "pick_place", "red block", "green pad")
    be = RoleBackend(thinker={"pick_object": "red block", "place_reference": {"kind": "object", "value": "green pad"}})
    plan = think(sub, _gps(), g, AgentSet(be, object_heights={"red block": 0.04}))
    assert plan.pick_pose[:3] == (0.40, 0.10, 0.02)
    assert plan.place_pose[:2] == (0.60, -0.10) and math.isclose(plan.place_pose[2], 0.06)


def test_think_position_tag_echo():
    g = graph("red block", "green pad")
    sub = AtomicInstruction("s1", "pick_place", "red block", "",
                            (MemoryTag("spot", "position_ref", "(0.5, 0.0, 0.02)"),))
    be = RoleBackend(thinker={"pick_object": "red block", "place_reference": {"kind": "memory_tag", "value": "spot"}})
    plan = think(sub, _gps(), g, AgentSet(be, object_heights={"red block": 0.04}))
    assert plan.place_pose[:2] == (0.5, 0.0) and math.isclose(plan.place_pose[2], 0.06)


def test_think_rotate_in_place():
    g = graph("red block", "green pad")
    sub = AtomicInstruction("s1", "rotate", "red block")
    be = RoleBackend(thinker={"pick_object": "red block", "place_reference": {"kind": "none"}, "yaw": math.pi / 2})
    plan = think(sub, _gps(), g, AgentSet(be, object_heights={"red block": 0.04}))
    assert plan.pick_pose == plan.place_pose and math.isclose(plan.place_pose[3], math.pi / 2)


def test_think_errors():
    g = graph("red block", "green pad")
    be = RoleBackend(thinker={"pick_object": "red block", "place_reference": {"kind": "memory_tag", "value": "nope"}})
    sub = AtomicInstruction("s1", "pick_place", "red block", "green pad")
    with pytest.raises(ThinkerError):
        think(sub, _gps(), g, AgentSet(be, object_heights={"red block": 0.04}))
    be = RoleBackend(thinker={"pick_object": "mug", "place_reference": {"kind": "none"}})
    with pytest.raises(ThinkerError):
        think(sub, _gps(), g, AgentSet(be, object_heights={"mug": 0.04}))
    tagged = AtomicInstruction("s1", "pick_place", "red block", "", (MemoryTag("k", "object_ref", "ghost"),))
    with pytest.raises(ThinkerError):
        think(tagged, _gps(), g, AgentSet(be, object_heights={}))


# -- reflector ----------------------------------------------------------------------------

def _reflect_after(move):
    sim, before = reset(load_scenario("stack_distractor"), 0)
    sub = AtomicInstruction("s1", "pick_place", "blue block", "red block")
    if move is not None:
        oid, dest = move
        x, y = (sim.world[dest].pose[:2] if isinstance(dest, str) else dest)
        sim.execute(ActionPlan("s1", "pick_place", sim.world[oid].top_pose(), (x, y, 0.08, 0.0)))
    else:
        sim.execute(ActionPlan("s1", "move", (0, 0, 0.1, 0), (0, 0, 0.1, 0)))
    return reflect(before, sim.observe(), sub, OracleBackend(sim))


def test_reflect_attribution():
    assert _reflect_after(("blue_block", "red_block")).verdict == "success"
    r = _reflect_after(None)
    assert (r.verdict, r.failing_stage) == ("failure", "actor")
    assert _reflect_after(("blue_block", "wooden_block")).failing_stage == "grounder"
    assert _reflect_after(("green_block", "red_block")).failing_stage == "grounder"
    assert _reflect_after(("blue_block", (-0.2, -0.2))).failing_stage == "thinker"


def test_reflect_needs_explanation_on_failure():
    obs = reset(load_scenario("two_objects"), 0)[1]
    sub = AtomicInstruction("s1", "push", "red block")
    with pytest.raises(SchemaViolation):
        reflect(obs, obs, sub, RoleBackend(reflector={"verdict": "failure", "failing_stage": "actor",
                                                     "explanation": " "}))
    with pytest.raises(SchemaViolation):
        reflect(obs, obs, sub, RoleBackend(reflector={"verdict": "success", "failing_stage": "actor",
                                                     "explanation": ""}))


def test_single_agent_parses_actions():
    obs = reset(load_scenario("two_objects"), 0)[1]
    ok = {"actions": [{"primitive": "pick_place", "pick_pose": [0, 0, 0, 0], "place_pose": [1, 1, 1, 0]}] * 2}
    assert [p.subtask_id for p in single_agent("p", obs, RoleBackend(single_agent=ok))] == ["a1", "a2"]
    with pytest.raises(SchemaViolation):
        single_agent("p", obs, RoleBackend(single_agent={"actions": [{"primitive": "fly"}]}))


def test_every_model_call_is_logged():
    be = RoleBackend(decomposer=STACK_PLAN)
    agents = AgentSet(be)
    decompose("stack", agents)
    calls = agents.take_calls()
    assert [c.role for c in calls] == ["decomposer"] and len(calls[0].request_hash) == 64
    assert agents.take_calls() == []
    assert list(itertools.chain(c.response for c in calls))[0] == STACK_PLAN
