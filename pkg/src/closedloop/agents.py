"""The agent roles.

Model-backed roles (decomposer, descriptor, perceptor, thinker, reflector and
the monolithic single agent) send a structured payload to a backend and accept
the reply only if it validates against the role's schema. Grounding
(detection fusion), projection (grasp points) and actuation are deterministic.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import jsonschema
import numpy as np

from .backends import AgentRequest, canonical_request_hash
from .detection import DetectionQuery, default_providers, detect_all
from .errors import (
    BackendUnavailable,
    DecompositionError,
    DepthHoleError,
    DescriptorError,
    EmptyMaskError,
    GroundingError,
    InvalidInputError,
    PerceptionMiss,
    ProjectionError,
    RayMissError,
    SchemaViolation,
    ThinkerError,
)
from .geometry import centroid, grasp_point_2d, grasp_point_3d, mask_yaw
from .sim import mask_bbox, parse_position
from .state import (
    ActionPlan,
    AtomicInstruction,
    Detection,
    GraspPoint2D,
    GraspPoint3D,
    MemoryTag,
    ObjectNode,
    Observation,
    PerceptionTargets,
    ReflectionResult,
    SceneGraph,
    wrap_angle,
)

MODEL_ROLES = ("decomposer", "descriptor", "perceptor", "thinker", "reflector", "single_agent")
PROMPT_VERSION = "v1"
TAU_MATCH = 0.5      # IoU at which detections of one label count as the same object
NEAR_FRACTION = 0.2  # "near" threshold as a fraction of the image diagonal


@lru_cache(maxsize=None)
def load_prompt(role: str, version: str = PROMPT_VERSION) -> str:
    res = resources.files("closedloop").joinpath(f"prompts/{role}/{version}.txt")
    if not res.is_file():
        raise InvalidInputError(f"no prompt for role {role!r} version {version!r}")
    return res.read_text()


@lru_cache(maxsize=None)
def role_schema(role: str) -> dict:
    return json.loads(resources.files("closedloop").joinpath(f"schemas/{role}.schema.json").read_text())


@lru_cache(maxsize=None)
def _validator(role: str):
    return jsonschema.Draft202012Validator(role_schema(role))


def parse_response(role: str, raw_text: str) -> dict:
    """Decode and schema-check a reply; anything off-schema is a `SchemaViolation`."""
    try:
        doc = json.loads(raw_text)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(role, f"reply is not JSON ({exc})") from None
    err = jsonschema.exceptions.best_match(_validator(role).iter_errors(doc))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaViolation(role, f"{where}: {err.message}")
    return doc


@dataclass(frozen=True)
class ModelCall:
    role: str
    request_hash: str
    response: dict


class AgentSet:
    """Backend plus the non-model resources the roles need (detectors, object metadata)."""

    def __init__(self, backend, detectors=None, object_heights=None, seed: int = 0,
                 episode: int = 0, transport_retry: int = 1):
        self.backend = backend
        self.detectors = list(detectors) if detectors is not None else default_providers()
        self.object_heights = dict(object_heights or {})
        self.seed = int(seed)
        self.episode = int(episode)
        self.transport_retry = transport_retry
        self.calls: list[ModelCall] = []
        self._lock = threading.Lock()

    def call(self, role: str, payload: dict, image: np.ndarray | None = None) -> dict:
        req = AgentRequest(role, load_prompt(role), payload, image, PROMPT_VERSION, self.episode)
        for i in range(self.transport_retry + 1):
            try:
                resp = self.backend.complete(req)
                break
            except BackendUnavailable:
                if i == self.transport_retry:
                    raise
        parsed = parse_response(role, resp.raw_text)
        with self._lock:
            self.calls.append(ModelCall(role, canonical_request_hash(req), parsed))
        return parsed

    def take_calls(self) -> list[ModelCall]:
        with self._lock:
            out, self.calls = self.calls, []
        return out


def _agents(backend) -> AgentSet:
    return backend if isinstance(backend, AgentSet) else AgentSet(backend)


# -- decomposer / descriptor ----------------------------------------------------------

def decompose(prompt: str, backend) -> list[AtomicInstruction]:
    if not prompt or not prompt.strip():
        raise InvalidInputError("prompt must be non-empty")
    doc = _agents(backend).call("decomposer", {"prompt": prompt})
    if not doc["subtasks"]:
        raise DecompositionError("decomposer returned an empty plan", stage="decomposer")
    plan = []
    for i, s in enumerate(doc["subtasks"], 1):
        try:
            tags = tuple(MemoryTag(t["key"], t["kind"], t["value"]) for t in s.get("memory_tags", ()))
            plan.append(AtomicInstruction(f"s{i}", s["verb"], s.get("object", ""),
                                          s.get("target", ""), tags, s.get("text", "")))
        except InvalidInputError as exc:
            raise SchemaViolation("decomposer", f"subtask {i}: {exc}") from None
    return plan


def multi_object(plan) -> bool:
    return len({s.object_query for s in plan if s.object_query}) > 1


def describe(observation: Observation, backend) -> SceneGraph:
    payload = {"step_index": observation.step_index, "image_size": list(observation.size)}
    doc = _agents(backend).call("descriptor", payload, observation.rgb)
    graph = SceneGraph()
    labels = set()
    try:
        for n in doc["nodes"]:
            if n["label"] in labels:
                raise DescriptorError(f"duplicate node label {n['label']!r}")
            labels.add(n["label"])
            graph.add_node(ObjectNode(n["id"], n["label"], n.get("color", ""),
                                      n.get("size_class", ""), n.get("geometry_class", "flat")))
        for s, rel, o in doc["edges"]:
            graph.add_relation(s, rel, o)
    except InvalidInputError as exc:
        raise DescriptorError(str(exc)) from None
    return graph


# -- perceptor ------------------------------------------------------------------------

def perceive(subtask: AtomicInstruction, scene_graph: SceneGraph, backend, attempt: int = 1,
             previous_hint: str | None = None) -> PerceptionTargets:
    labels = scene_graph.labels
    payload = {"subtask": subtask.to_dict(), "scene_labels": labels, "attempt": attempt,
               "previous_geometry_class": previous_hint}
    doc = _agents(backend).call("perceptor", payload)
    ooi = doc["object_of_interest"]
    target = doc.get("target", "") or ""
    if ooi not in labels:
        raise PerceptionMiss(f"{ooi!r} is not in the scene")
    if target and target not in labels:
        raise PerceptionMiss(f"target {target!r} is not in the scene")
    others = tuple(doc.get("not_object_of_interest", ()))
    if ooi in others or (target and target in others):
        raise SchemaViolation("perceptor", "not_object_of_interest overlaps the objects of interest")
    return PerceptionTargets(ooi, target, others, tuple(labels), doc.get("geometry_class"))


# -- grounder: detection fusion -------------------------------------------------------

def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _canon(d: Detection):
    return (d.bbox, -d.confidence, d.source)


def _groups(cands: list[Detection]) -> list[list[Detection]]:
    """Connected components of the IoU >= TAU_MATCH graph."""
    parent = list(range(len(cands)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(cands)):
        for j in range(i + 1, len(cands)):
            if iou(cands[i].bbox, cands[j].bbox) >= TAU_MATCH:
                parent[find(i)] = find(j)
    comps: dict[int, list[Detection]] = {}
    for i, d in enumerate(cands):
        comps.setdefault(find(i), []).append(d)
    return sorted(comps.values(), key=lambda g: _canon(g[0]))


def merge_group(group: list[Detection]) -> Detection:
    """Confidence-weighted corner average with noisy-or confidence."""
    if len(group) == 1:
        return group[0]
    wsum = math.fsum(d.confidence for d in group)
    if wsum > 0:
        bbox = tuple(math.fsum(d.confidence * d.bbox[k] for d in group) / wsum for k in range(4))
    else:
        bbox = tuple(math.fsum(d.bbox[k] for d in group) / len(group) for k in range(4))
    miss = math.prod(1.0 - d.confidence for d in group)
    sources = "+".join(sorted({d.source for d in group}))
    return Detection(group[0].label, bbox, min(1.0, max(0.0, 1.0 - miss)), sources)


def _inside(pt, box) -> bool:
    return box[0] <= pt[0] <= box[2] and box[1] <= pt[1] <= box[3]


def consistency_score(label: str, cand: Detection, scene_graph: SceneGraph | None,
                      anchors: dict[str, Detection], image_size=(128, 128)) -> int:
    """Number of scene-graph relations of ``label`` that the candidate's box satisfies."""
    if scene_graph is None:
        return 0
    node = scene_graph.by_label(label)
    if node is None:
        return 0
    near = NEAR_FRACTION * math.hypot(*image_size)
    cu, cv = cand.center
    score = 0
    for e in scene_graph.edges:
        if node.id not in (e.subject_id, e.object_id):
            continue
        other_id = e.object_id if e.subject_id == node.id else e.subject_id
        other = anchors.get(scene_graph.node(other_id).label)
        if other is None:
            continue
        au, av = other.center
        if e.subject_id == node.id:
            ok = {
                "left_of": cu < au, "right_of": cu > au, "above": cv < av, "below": cv > av,
                "near": math.hypot(cu - au, cv - av) < near,
                "on_top_of": _inside(cand.center, other.bbox), "inside": _inside(cand.center, other.bbox),
            }[e.relation]
        elif e.relation in ("on_top_of", "inside"):
            ok = _inside(other.center, cand.bbox)
        else:
            continue  # symmetric relations are counted from the subject side
        score += bool(ok)
    return score


def fuse_detections(per_source: dict[str, list[Detection]], targets, scene_graph: SceneGraph | None = None,
                    image_size=(128, 128), required=None) -> list[Detection]:
    """At most one detection per requested label.

    Candidates of a label that overlap (IoU >= TAU_MATCH) are merged; when
    several disjoint candidates remain, the one most consistent with the scene
    graph wins, then the more confident one.
    """
    if not per_source:
        raise GroundingError("no detection sources")
    if isinstance(targets, PerceptionTargets):
        labels = [targets.object_of_interest, targets.target, *targets.all_objects]
        req = [targets.object_of_interest, targets.target] if required is None else required
    else:
        labels = list(targets)
        req = labels if required is None else required
    labels = list(dict.fromkeys(lab for lab in labels if lab))
    req = [lab for lab in req if lab]

    by_label: dict[str, list[Detection]] = {lab: [] for lab in labels}
    for dets in per_source.values():
        for d in dets:
            if d.label in by_label:
                by_label[d.label].append(d)

    anchors = {}
    for lab, cands in by_label.items():
        if cands:
            anchors[lab] = min(cands, key=_canon)  # most confident, ties broken canonically

    out = []
    for lab in labels:
        cands = sorted(by_label[lab], key=_canon)
        if not cands:
            if lab in req:
                raise GroundingError(f"no detector found {lab!r}")
            continue
        merged = [merge_group(g) for g in _groups(cands)]
        if len(merged) == 1:
            out.append(merged[0])
            continue
        others = {k: v for k, v in anchors.items() if k != lab}
        best = max(merged, key=lambda d: (consistency_score(lab, d, scene_graph, others, image_size),
                                          d.confidence, tuple(-x for x in d.bbox)))
        out.append(best)
    return out


def ground(targets: PerceptionTargets, observation: Observation, agents: AgentSet,
           scene_graph: SceneGraph | None, seed=0, required=None):
    """Query every provider for the scene labels and fuse. Returns (fused, per_source, faults)."""
    query = DetectionQuery(tuple([targets.object_of_interest, targets.target, *targets.all_objects]),
                           observation, seed)
    per_source, faults = detect_all(query, agents.detectors)
    fused = fuse_detections(per_source, targets, scene_graph, observation.size, required)
    return fused, per_source, faults


# -- projector ------------------------------------------------------------------------

def segment(observation: Observation, det: Detection) -> tuple[str, np.ndarray]:
    """Mask (and its id) whose extent best matches the box.

    Matching on extent rather than raw coverage keeps a partly occluded object
    from losing its box to the object lying on top of it.
    """
    u0, v0, u1, v1 = det.bbox
    r0, r1 = int(math.floor(v0)), int(math.ceil(v1))
    c0, c1 = int(math.floor(u0)), int(math.ceil(u1))
    best, best_key = None, (0.0, 0)
    for oid, m in observation.masks.items():
        n = int(m[r0:r1, c0:c1].sum())
        if n == 0:
            continue
        key = (iou(mask_bbox(m), det.bbox), n)
        if key > best_key:
            best, best_key = oid, key
    if best is None:
        raise ProjectionError(f"no segment under the box for {det.label!r}")
    return best, observation.masks[best]


def project(targets: PerceptionTargets, detections: list[Detection], observation: Observation,
            camera, scene_graph: SceneGraph | None, geometry_hint: str | None = None,
            seed=0, memory: dict[str, tuple[GraspPoint2D, GraspPoint3D]] | None = None,
            ) -> tuple[list[GraspPoint2D], list[GraspPoint3D]]:
    """2D grasp point on each relevant object's mask, lifted to 3D through the depth map.

    ``memory`` maps labels to grasp points kept from an earlier look; those are
    reused instead of re-measured (the placement target may since be occluded).
    """
    by_label = {d.label: d for d in detections}
    gps2, gps3 = [], []
    for label in (targets.object_of_interest, targets.target):
        if not label:
            continue
        if memory and label in memory:
            gps2.append(memory[label][0])
            gps3.append(memory[label][1])
            continue
        det = by_label.get(label)
        if det is None:
            raise ProjectionError(f"no grounded box for {label!r}")
        node = scene_graph.by_label(label) if scene_graph is not None else None
        cls = geometry_hint if (label == targets.object_of_interest and geometry_hint) else \
            (node.geometry_class if node is not None else "flat")
        _, mask = segment(observation, det)
        try:
            gp2 = grasp_point_2d(mask, cls, rng_seed=seed, object_id=node.id if node else label)
            if not gp2.on_mask:
                raise ProjectionError(f"grasp point for {label!r} is off its mask")
            gp3 = grasp_point_3d(gp2, observation.depth, camera, yaw=-mask_yaw(mask),
                                 center_uv=centroid(mask))
        except (EmptyMaskError, RayMissError, DepthHoleError) as exc:
            raise ProjectionError(f"{label!r}: {exc}") from None
        gps2.append(gp2)
        gps3.append(gp3)
    return gps2, gps3


# -- thinker --------------------------------------------------------------------------

def _gp_for(label: str, gps: list[GraspPoint3D], scene_graph: SceneGraph | None) -> GraspPoint3D | None:
    node = scene_graph.by_label(label) if scene_graph is not None else None
    oid = node.id if node is not None else label
    for g in gps:
        if g.object_id == oid:
            return g
    return None


def _top_center(g: GraspPoint3D) -> tuple[float, float, float]:
    return g.center if g.center is not None else g.xyz


def think(subtask: AtomicInstruction, grasp_points_3d: list[GraspPoint3D], scene_graph: SceneGraph | None,
          backend, object_heights: dict[str, float] | None = None,
          targets: PerceptionTargets | None = None) -> ActionPlan:
    """Ask the model what to pick and where to place it, then compute the poses.

    The pick pose is the object's grasp point. The place pose sits over the
    referenced object's top centre (or a tagged position), raised by the
    object's height.
    """
    agents = _agents(backend)
    heights = object_heights if object_heights is not None else agents.object_heights
    node_ids = {n.id for n in scene_graph.nodes} if scene_graph is not None else set()
    for tag in subtask.memory_tags:
        if tag.kind == "object_ref" and tag.value not in node_ids:
            raise ThinkerError(f"memory tag {tag.key!r} refers to unknown object {tag.value!r}")

    def label_of(oid):
        return scene_graph.node(oid).label if scene_graph is not None and scene_graph.has_node(oid) else oid

    payload = {
        "subtask": subtask.to_dict(),
        "object_of_interest": targets.object_of_interest if targets else subtask.object_query,
        "target": targets.target if targets else subtask.target_query,
        "grasp_points": [{"object_id": g.object_id, "label": label_of(g.object_id),
                          "position": [g.X, g.Y, g.Z],
                          "center": None if g.center is None else list(g.center), "yaw": g.yaw}
                         for g in grasp_points_3d],
    }
    doc = agents.call("thinker", payload)

    pick_label = doc["pick_object"]
    gp = _gp_for(pick_label, grasp_points_3d, scene_graph)
    if gp is None:
        raise ThinkerError(f"no grasp point for {pick_label!r}")
    if pick_label not in heights:
        raise ThinkerError(f"no height known for {pick_label!r}")
    h = heights[pick_label]
    yaw = wrap_angle(doc["yaw"] if doc.get("yaw") is not None else gp.yaw)

    ref = doc["place_reference"]
    kind, value = ref["kind"], ref.get("value", "")
    target_label = ""
    if kind == "memory_tag":
        tag = next((t for t in subtask.memory_tags if t.key == value), None)
        if tag is None or tag.kind == "context_ref":
            raise ThinkerError(f"unresolvable memory tag {value!r}")
        kind, value = ("position", tag.value) if tag.kind == "position_ref" else ("object", label_of(tag.value))
    if kind == "object":
        tgt = _gp_for(value, grasp_points_3d, scene_graph)
        if tgt is None:
            raise ThinkerError(f"no grasp point for placement target {value!r}")
        x, y, z = _top_center(tgt)
        place = (x, y, z + h, yaw)
        target_label = value
    elif kind == "position":
        try:
            pos = parse_position(value)
        except ValueError as exc:
            raise ThinkerError(str(exc)) from None
        z = pos[2] if len(pos) == 3 else 0.0
        place = (pos[0], pos[1], z + h, yaw)
    else:
        place = (gp.X, gp.Y, gp.Z, yaw)

    pick = (gp.X, gp.Y, gp.Z, yaw if subtask.verb == "rotate" else gp.yaw)
    if subtask.verb == "rotate":
        place = pick
    return ActionPlan(subtask.id, subtask.verb, pick, place, pick_label, target_label)


# -- actor / reflector ----------------------------------------------------------------

def act(plan: ActionPlan, env):
    """Hand the plan to the environment's execution API."""
    return env.execute(plan)


def reflect(before: Observation, after: Observation, subtask: AtomicInstruction, backend,
            plan: ActionPlan | None = None, actuation=None) -> ReflectionResult:
    payload = {
        "subtask": subtask.to_dict(),
        "before_step": before.step_index,
        "after_step": after.step_index,
        "plan": None if plan is None else plan.to_dict(),
        "actuation": None if actuation is None else actuation.to_dict(),
    }
    image = np.concatenate([before.rgb, after.rgb], axis=1)
    doc = _agents(backend).call("reflector", payload, image)
    if doc["verdict"] == "failure" and not doc["explanation"].strip():
        raise SchemaViolation("reflector", "a failure verdict needs an explanation")
    try:
        return ReflectionResult(subtask.id, doc["verdict"], doc["failing_stage"], doc["explanation"],
                                doc.get("observed_position"))
    except InvalidInputError as exc:
        raise SchemaViolation("reflector", str(exc)) from None


def apply_memory_update(grasp_points: list[GraspPoint3D], object_id: str,
                        observed: tuple[float, float, float]) -> list[GraspPoint3D]:
    """Shift an object's grasp point so its top centre matches a reflector observation."""
    out = []
    for g in grasp_points:
        if g.object_id != object_id:
            out.append(g)
            continue
        ref = np.asarray(_top_center(g))
        d = np.asarray(observed) - ref
        center = None if g.center is None else tuple(float(c) for c in np.asarray(g.center) + d)
        out.append(GraspPoint3D(g.X + d[0], g.Y + d[1], g.Z + d[2], g.object_id, g.yaw, center))
    return out


# -- single agent ---------------------------------------------------------------------

def single_agent(prompt: str, observation: Observation, backend) -> list[ActionPlan]:
    """One model call returns the whole action list."""
    payload = {"prompt": prompt, "step_index": observation.step_index,
               "image_size": list(observation.size)}
    doc = _agents(backend).call("single_agent", payload, observation.rgb)
    plans = []
    for i, a in enumerate(doc["actions"], 1):
        try:
            plans.append(ActionPlan(f"a{i}", a["primitive"], tuple(a["pick_pose"]), tuple(a["place_pose"]),
                                    a.get("object", ""), a.get("target", "")))
        except InvalidInputError as exc:
            raise SchemaViolation("single_agent", f"action {i}: {exc}") from None
    return plans


__all__ = [
    "AgentSet", "ModelCall", "MODEL_ROLES", "TAU_MATCH", "load_prompt", "role_schema", "parse_response",
    "decompose", "multi_object", "describe", "perceive", "fuse_detections", "merge_group", "iou",
    "consistency_score", "ground", "segment", "project", "think", "act", "reflect",
    "apply_memory_update", "single_agent",
]
