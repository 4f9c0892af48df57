"""Domain types shared by all agents, and the task blackboard (`TaskState`).

Everything here is plain data: construction-time validation plus
round-trippable ``to_dict``/``from_dict`` for traces.
"""

from __future__ import annotations

import base64
import io
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import CameraInvariantError, InvalidInputError

VERBS = ("pick_place", "move", "reach", "push", "rotate")
TAG_KINDS = ("object_ref", "position_ref", "context_ref")
GEOMETRY_CLASSES = ("round", "rimmed", "flat", "irregular")
RELATIONS = ("left_of", "right_of", "above", "below", "on_top_of", "inside", "near")
STAGES = ("decomposer", "descriptor", "perceptor", "grounder", "projector", "thinker", "actor")
FAILING_STAGES = STAGES + ("none",)

# relation -> relation that must be stored for the swapped pair
INVERSE_RELATION = {
    "left_of": "right_of",
    "right_of": "left_of",
    "above": "below",
    "below": "above",
    "near": "near",
}

Pose = tuple[float, float, float, float]


def _pose(value) -> Pose:
    x, y, z, yaw = (float(v) for v in value)
    return (x, y, z, yaw)


def _opt(value, fn):
    return None if value is None else fn(value)


# -- instructions ---------------------------------------------------------------

@dataclass(frozen=True)
class MemoryTag:
    key: str
    kind: str
    value: str

    def __post_init__(self):
        if not self.key:
            raise InvalidInputError("memory tag key must be non-empty")
        if self.kind not in TAG_KINDS:
            raise InvalidInputError(f"unknown memory tag kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"key": self.key, "kind": self.kind, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> MemoryTag:
        return cls(d["key"], d["kind"], str(d["value"]))


@dataclass(frozen=True)
class AtomicInstruction:
    id: str
    verb: str
    object_query: str = ""
    target_query: str = ""
    memory_tags: tuple[MemoryTag, ...] = ()
    raw_text: str = ""

    def __post_init__(self):
        if self.verb not in VERBS:
            raise InvalidInputError(f"verb {self.verb!r} is not one of {VERBS}")
        if self.verb == "pick_place" and not self.object_query:
            raise InvalidInputError("pick_place requires an object_query")
        object.__setattr__(self, "memory_tags", tuple(self.memory_tags))

    def tag(self, kind: str) -> MemoryTag | None:
        for t in self.memory_tags:
            if t.kind == kind:
                return t
        return None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "verb": self.verb,
            "object_query": self.object_query,
            "target_query": self.target_query,
            "memory_tags": [t.to_dict() for t in self.memory_tags],
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AtomicInstruction:
        return cls(
            id=d["id"],
            verb=d["verb"],
            object_query=d.get("object_query", ""),
            target_query=d.get("target_query", ""),
            memory_tags=tuple(MemoryTag.from_dict(t) for t in d.get("memory_tags", ())),
            raw_text=d.get("raw_text", ""),
        )


# -- scene graph ------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectNode:
    id: str
    label: str
    color: str = ""
    size_class: str = ""
    geometry_class: str = "flat"

    def __post_init__(self):
        if self.geometry_class not in GEOMETRY_CLASSES:
            raise InvalidInputError(f"unknown geometry class {self.geometry_class!r}")


@dataclass(frozen=True)
class Relation:
    subject_id: str
    relation: str
    object_id: str

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise InvalidInputError(f"unknown relation {self.relation!r}")
        if self.subject_id == self.object_id:
            raise InvalidInputError(f"self-relation on {self.subject_id!r}")


class SceneGraph:
    """Objects plus pairwise spatial relations; the visual memory of a run.

    Symmetric relations are closed on insertion, so ``left_of(a, b)`` is always
    accompanied by ``right_of(b, a)``.
    """

    def __init__(self, nodes=(), edges=()):
        self.nodes: list[ObjectNode] = []
        self.edges: list[Relation] = []
        self._ids: dict[str, ObjectNode] = {}
        for n in nodes:
            self.add_node(n)
        for e in edges:
            self.add_relation(e.subject_id, e.relation, e.object_id)

    def add_node(self, node: ObjectNode) -> None:
        if node.id in self._ids:
            raise InvalidInputError(f"duplicate node id {node.id!r}")
        self.nodes.append(node)
        self._ids[node.id] = node

    def add_relation(self, subject_id: str, relation: str, object_id: str) -> None:
        for nid in (subject_id, object_id):
            if nid not in self._ids:
                raise InvalidInputError(f"relation references unknown node {nid!r}")
        self._add(Relation(subject_id, relation, object_id))
        inverse = INVERSE_RELATION.get(relation)
        if inverse is not None:
            self._add(Relation(object_id, inverse, subject_id))

    def _add(self, rel: Relation) -> None:
        if rel not in self.edges:
            self.edges.append(rel)

    def node(self, node_id: str) -> ObjectNode:
        return self._ids[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._ids

    def by_label(self, label: str) -> ObjectNode | None:
        for n in self.nodes:
            if n.label == label:
                return n
        return None

    @property
    def labels(self) -> list[str]:
        return [n.label for n in self.nodes]

    def relations_of(self, node_id: str) -> list[Relation]:
        return [e for e in self.edges if e.subject_id == node_id]

    def is_symmetric_closed(self) -> bool:
        have = set(self.edges)
        return all(
            Relation(e.object_id, INVERSE_RELATION[e.relation], e.subject_id) in have
            for e in self.edges
            if e.relation in INVERSE_RELATION
        )

    def __eq__(self, other):
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return self.nodes == other.nodes and set(self.edges) == set(other.edges)

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"SceneGraph({len(self.nodes)} nodes, {len(self.edges)} edges)"

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"id": n.id, "label": n.label, "color": n.color,
                 "size_class": n.size_class, "geometry_class": n.geometry_class}
                for n in self.nodes
            ],
            "edges": [[e.subject_id, e.relation, e.object_id] for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneGraph:
        g = cls(ObjectNode(**n) for n in d.get("nodes", ()))
        for s, r, o in d.get("edges", ()):
            g.add_relation(s, r, o)
        return g


# -- perception -------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    label: str
    bbox: tuple[float, float, float, float]
    confidence: float
    source: str = ""

    def __post_init__(self):
        u0, v0, u1, v1 = (float(b) for b in self.bbox)
        object.__setattr__(self, "bbox", (u0, v0, u1, v1))
        if not (u0 < u1 and v0 < v1):
            raise InvalidInputError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        u0, v0, u1, v1 = self.bbox
        return ((u0 + u1) / 2.0, (v0 + v1) / 2.0)

    def to_dict(self) -> dict:
        return {"label": self.label, "bbox": list(self.bbox),
                "confidence": self.confidence, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> Detection:
        return cls(d["label"], tuple(d["bbox"]), float(d["confidence"]), d.get("source", ""))


@dataclass(frozen=True)
class PerceptionTargets:
    object_of_interest: str
    target: str = ""
    not_object_of_interest: tuple[str, ...] = ()
    all_objects: tuple[str, ...] = ()
    geometry_class: str | None = None


class CameraModel:
    """Calibrated pinhole camera: intrinsics K, world-to-camera (R, t), stereo baseline."""

    def __init__(self, fu, fv, u0, v0, alpha=0.0, R=None, t=None, baseline=0.1):
        self.fu, self.fv = float(fu), float(fv)
        self.u0, self.v0 = float(u0), float(v0)
        self.alpha = float(alpha)
        self.R = np.eye(3) if R is None else np.array(R, dtype=float).reshape(3, 3)
        self.t = np.zeros(3) if t is None else np.array(t, dtype=float).reshape(3)
        self.baseline = float(baseline)
        self.validate()
        self.K = np.array([[self.fu, self.alpha, self.u0],
                           [0.0, self.fv, self.v0],
                           [0.0, 0.0, 1.0]])
        self.K_inv = np.array([
            [1.0 / self.fu, -self.alpha / (self.fu * self.fv),
             (self.alpha * self.v0 - self.fv * self.u0) / (self.fu * self.fv)],
            [0.0, 1.0 / self.fv, -self.v0 / self.fv],
            [0.0, 0.0, 1.0],
        ])

    def validate(self) -> None:
        if not (self.fu > 0 and self.fv > 0):
            raise CameraInvariantError("focal lengths must be positive")
        if self.baseline <= 0:
            raise CameraInvariantError("stereo baseline must be positive")
        if self.R.shape != (3, 3) or np.max(np.abs(self.R.T @ self.R - np.eye(3))) >= 1e-9:
            raise CameraInvariantError("R is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self):
        return (f"CameraModel(fu={self.fu}, fv={self.fv}, u0={self.u0}, v0={self.v0}, "
                f"alpha={self.alpha}, baseline={self.baseline})")

    def to_dict(self) -> dict:
        return {"fu": self.fu, "fv": self.fv, "u0": self.u0, "v0": self.v0,
                "alpha": self.alpha, "R": self.R.tolist(), "t": self.t.tolist(),
                "baseline": self.baseline}

    @classmethod
    def from_dict(cls, d: dict) -> CameraModel:
        return cls(d["fu"], d["fv"], d["u0"], d["v0"], d.get("alpha", 0.0),
                   d.get("R"), d.get("t"), d.get("baseline", 0.1))


@dataclass(frozen=True)
class GraspPoint2D:
    u: float
    v: float
    object_id: str = ""
    on_mask: bool = False
    radius: float = 0.0

    def to_dict(self) -> dict:
        return {"u": self.u, "v": self.v, "object_id": self.object_id,
                "on_mask": self.on_mask, "radius": self.radius}


@dataclass(frozen=True)
class GraspPoint3D:
    X: float
    Y: float
    Z: float
    object_id: str = ""
    yaw: float = 0.0
    # top-surface point above the mask centroid; differs from (X, Y) for rimmed objects
    center: tuple[float, float, float] | None = None

    @property
    def xyz(self) -> tuple[float, float, float]:
        return (self.X, self.Y, self.Z)

    def to_dict(self) -> dict:
        return {"X": self.X, "Y": self.Y, "Z": self.Z, "object_id": self.object_id,
                "yaw": self.yaw, "center": None if self.center is None else list(self.center)}

    @classmethod
    def from_dict(cls, d: dict) -> GraspPoint3D:
        c = d.get("center")
        return cls(d["X"], d["Y"], d["Z"], d.get("object_id", ""), d.get("yaw", 0.0),
                   None if c is None else tuple(c))


# -- planning / execution / reflection ----------------------------------------------

@dataclass(frozen=True)
class ActionPlan:
    subtask_id: str
    primitive: str
    pick_pose: Pose
    place_pose: Pose
    object_label: str = ""
    target_label: str = ""

    def __post_init__(self):
        if self.primitive not in VERBS:
            raise InvalidInputError(f"unknown primitive {self.primitive!r}")
        object.__setattr__(self, "pick_pose", _pose(self.pick_pose))
        object.__setattr__(self, "place_pose", _pose(self.place_pose))

    def to_dict(self) -> dict:
        return {"subtask_id": self.subtask_id, "primitive": self.primitive,
                "pick_pose": list(self.pick_pose), "place_pose": list(self.place_pose),
                "object_label": self.object_label, "target_label": self.target_label}

    @classmethod
    def from_dict(cls, d: dict) -> ActionPlan:
        return cls(d["subtask_id"], d["primitive"], tuple(d["pick_pose"]), tuple(d["place_pose"]),
                   d.get("object_label", ""), d.get("target_label", ""))


@dataclass(frozen=True)
class ActuationResult:
    subtask_id: str
    executed: bool
    dropped: bool = False
    # top-centre pose (X, Y, Z_top, yaw) of the manipulated object after the command
    final_pose: Pose | None = None
    object_id: str = ""

    def to_dict(self) -> dict:
        return {"subtask_id": self.subtask_id, "executed": self.executed, "dropped": self.dropped,
                "final_pose": None if self.final_pose is None else list(self.final_pose),
                "object_id": self.object_id}

    @classmethod
    def from_dict(cls, d: dict) -> ActuationResult:
        return cls(d["subtask_id"], d["executed"], d.get("dropped", False),
                   _opt(d.get("final_pose"), _pose), d.get("object_id", ""))


@dataclass(frozen=True)
class ReflectionResult:
    subtask_id: str
    verdict: str
    failing_stage: str = "none"
    explanation: str = ""
    # reflector's memory update: where the object of interest was observed after the action
    observed_position: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.verdict not in ("success", "failure"):
            raise InvalidInputError(f"unknown verdict {self.verdict!r}")
        if self.failing_stage not in FAILING_STAGES:
            raise InvalidInputError(f"unknown failing stage {self.failing_stage!r}")
        if self.verdict == "success" and self.failing_stage != "none":
            raise InvalidInputError("a successful reflection cannot name a failing stage")
        if self.verdict == "failure" and self.failing_stage == "none":
            raise InvalidInputError("a failed reflection must name a failing stage")
        if self.observed_position is not None:
            object.__setattr__(self, "observed_position",
                               tuple(float(v) for v in self.observed_position))

    @property
    def success(self) -> bool:
        return self.verdict == "success"

    def to_dict(self) -> dict:
        return {"subtask_id": self.subtask_id, "verdict": self.verdict,
                "failing_stage": self.failing_stage, "explanation": self.explanation,
                "observed_position": _opt(self.observed_position, list)}

    @classmethod
    def from_dict(cls, d: dict) -> ReflectionResult:
        return cls(d["subtask_id"], d["verdict"], d.get("failing_stage", "none"),
                   d.get("explanation", ""), _opt(d.get("observed_position"), tuple))


@dataclass(frozen=True)
class RecoveryAction:
    kind: str  # retry_subtask | reactivate | rescan_scene | terminate_failure
    stage: str | None = None

    RUNGS = ("retry_subtask", "reactivate", "rescan_scene", "terminate_failure")

    def __post_init__(self):
        if self.kind not in self.RUNGS:
            raise InvalidInputError(f"unknown recovery action {self.kind!r}")
        if (self.kind == "reactivate") != (self.stage is not None):
            raise InvalidInputError("reactivate needs a stage; other actions take none")

    @property
    def rung(self) -> int:
        return self.RUNGS.index(self.kind)

    def __str__(self):
        return f"reactivate({self.stage})" if self.kind == "reactivate" else self.kind

    @classmethod
    def parse(cls, text: str) -> RecoveryAction:
        if text.startswith("reactivate(") and text.endswith(")"):
            return cls("reactivate", text[len("reactivate("):-1])
        return cls(text)


@dataclass
class SubtaskRecord:
    id: str
    attempts: int = 0
    outcome: str = "skipped"  # success | failed | skipped

    def to_dict(self) -> dict:
        return {"id": self.id, "attempts": self.attempts, "outcome": self.outcome}


# -- observation ----------------------------------------------------------------------

@dataclass(eq=False)
class Observation:
    """One rendered frame: rgb (H, W, 3) uint8, depth (H, W) metres, visible masks."""

    rgb: np.ndarray
    depth: np.ndarray
    masks: dict[str, np.ndarray]
    step_index: int = 0
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise InvalidInputError("rgb and depth rasters differ in size")
        for oid, m in self.masks.items():
            if m.shape != self.depth.shape:
                raise InvalidInputError(f"mask {oid!r} has the wrong size")

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) in pixels."""
        return (self.depth.shape[1], self.depth.shape[0])

    def id_for_label(self, label: str) -> str | None:
        for oid, lab in self.labels.items():
            if lab == label:
                return oid
        return None

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (self.step_index == other.step_index and self.labels == other.labels
                and np.array_equal(self.rgb, other.rgb) and np.array_equal(self.depth, other.depth)
                and self.masks.keys() == other.masks.keys()
                and all(np.array_equal(m, other.masks[k]) for k, m in self.masks.items()))

    def to_dict(self) -> dict:
        buf = io.BytesIO()
        np.savez_compressed(buf, rgb=self.rgb, depth=self.depth,
                            **{f"mask_{i}": self.masks[k] for i, k in enumerate(self.masks)})
        return {"step_index": self.step_index, "labels": dict(self.labels),
                "mask_ids": list(self.masks), "npz": base64.b64encode(buf.getvalue()).decode()}

    @classmethod
    def from_dict(cls, d: dict) -> Observation:
        data = np.load(io.BytesIO(base64.b64decode(d["npz"])))
        masks = {k: data[f"mask_{i}"] for i, k in enumerate(d["mask_ids"])}
        return cls(data["rgb"], data["depth"], masks, d["step_index"], dict(d["labels"]))


# -- the blackboard -----------------------------------------------------------------

@dataclass
class TaskState:
    task_name: str
    original_prompt: str
    camera: CameraModel
    initial_decomposition_done: bool = False
    decomposed_prompts: list[AtomicInstruction] = field(default_factory=list)
    queue: list[AtomicInstruction] = field(default_factory=list)
    current: AtomicInstruction | None = None
    should_terminate: bool = False
    multi_object: bool = False
    object_of_interest: str = ""
    target_of_interest: str = ""
    not_object_of_interest: list[str] = field(default_factory=list)
    all_objects: list[str] = field(default_factory=list)
    geometry_hint: str | None = None
    scene_graph: SceneGraph | None = None
    observation: Observation | None = None
    grounder_output: list[Detection] = field(default_factory=list)
    grasp_points_2d: list[GraspPoint2D] = field(default_factory=list)
    grasp_points_3d: list[GraspPoint3D] = field(default_factory=list)
    # placement target measured once per subtask, kept across retries and rescans
    target_memory: dict[str, tuple[GraspPoint2D, GraspPoint3D]] = field(default_factory=dict)
    thinker_output: dict[str, ActionPlan] = field(default_factory=dict)
    actor_output: dict[str, ActuationResult] = field(default_factory=dict)
    reflection_output: dict[str, ReflectionResult] = field(default_factory=dict)
    attempt_counts: dict[str, int] = field(default_factory=dict)
    reactivation_counts: dict[str, int] = field(default_factory=dict)
    rescan_counts: dict[str, int] = field(default_factory=dict)
    rescan_count: int = 0
    ladder_history: dict[str, list[str]] = field(default_factory=dict)
    results: dict[str, SubtaskRecord] = field(default_factory=dict)

    def completed_ids(self) -> list[str]:
        """Subtasks popped from the queue, in plan order."""
        queued = {s.id for s in self.queue}
        return [s.id for s in self.decomposed_prompts if s.id not in queued]

    def partition_ok(self) -> bool:
        """Queue and popped subtasks partition the plan; ``current`` is the queue head."""
        all_ids = [s.id for s in self.decomposed_prompts]
        queued = [s.id for s in self.queue]
        if len(set(queued)) != len(queued) or not set(queued) <= set(all_ids):
            return False
        # subtasks run in plan order, so what is left is a suffix of the plan
        if queued != all_ids[len(all_ids) - len(queued):]:
            return False
        for sid in self.completed_ids():
            rec = self.results.get(sid)
            if rec is None or rec.outcome == "skipped":
                return False
        return self.current is None or (bool(self.queue) and self.queue[0] == self.current)

    def to_dict(self, include_observation: bool = False) -> dict:
        return {
            "task_name": self.task_name,
            "original_prompt": self.original_prompt,
            "camera": self.camera.to_dict(),
            "initial_decomposition_done": self.initial_decomposition_done,
            "decomposed_prompts": [s.to_dict() for s in self.decomposed_prompts],
            "queue": [s.id for s in self.queue],
            "current": None if self.current is None else self.current.id,
            "should_terminate": self.should_terminate,
            "multi_object": self.multi_object,
            "object_of_interest": self.object_of_interest,
            "target_of_interest": self.target_of_interest,
            "not_object_of_interest": list(self.not_object_of_interest),
            "all_objects": list(self.all_objects),
            "geometry_hint": self.geometry_hint,
            "scene_graph": None if self.scene_graph is None else self.scene_graph.to_dict(),
            "observation": (self.observation.to_dict()
                            if include_observation and self.observation is not None else None),
            "grounder_output": [d.to_dict() for d in self.grounder_output],
            "grasp_points_2d": [g.to_dict() for g in self.grasp_points_2d],
            "grasp_points_3d": [g.to_dict() for g in self.grasp_points_3d],
            "target_memory": {k: {"point_2d": g2.to_dict(), "point_3d": g3.to_dict()}
                              for k, (g2, g3) in self.target_memory.items()},
            "thinker_output": {k: v.to_dict() for k, v in self.thinker_output.items()},
            "actor_output": {k: v.to_dict() for k, v in self.actor_output.items()},
            "reflection_output": {k: v.to_dict() for k, v in self.reflection_output.items()},
            "attempt_counts": dict(self.attempt_counts),
            "reactivation_counts": dict(self.reactivation_counts),
            "rescan_counts": dict(self.rescan_counts),
            "rescan_count": self.rescan_count,
            "ladder_history": {k: list(v) for k, v in self.ladder_history.items()},
            "results": {k: v.to_dict() for k, v in self.results.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> TaskState:
        plan = [AtomicInstruction.from_dict(s) for s in d["decomposed_prompts"]]
        by_id = {s.id: s for s in plan}
        obs = d.get("observation")
        sg = d.get("scene_graph")
        return cls(
            task_name=d["task_name"],
            original_prompt=d["original_prompt"],
            camera=CameraModel.from_dict(d["camera"]),
            initial_decomposition_done=d["initial_decomposition_done"],
            decomposed_prompts=plan,
            queue=[by_id[i] for i in d["queue"]],
            current=None if d["current"] is None else by_id[d["current"]],
            should_terminate=d["should_terminate"],
            multi_object=d["multi_object"],
            object_of_interest=d["object_of_interest"],
            target_of_interest=d.get("target_of_interest", ""),
            not_object_of_interest=list(d["not_object_of_interest"]),
            all_objects=list(d["all_objects"]),
            geometry_hint=d.get("geometry_hint"),
            scene_graph=None if sg is None else SceneGraph.from_dict(sg),
            observation=None if obs is None else Observation.from_dict(obs),
            grounder_output=[Detection.from_dict(x) for x in d["grounder_output"]],
            grasp_points_2d=[GraspPoint2D(**g) for g in d["grasp_points_2d"]],
            grasp_points_3d=[GraspPoint3D.from_dict(g) for g in d["grasp_points_3d"]],
            target_memory={k: (GraspPoint2D(**v["point_2d"]), GraspPoint3D.from_dict(v["point_3d"]))
                           for k, v in d.get("target_memory", {}).items()},
            thinker_output={k: ActionPlan.from_dict(v) for k, v in d["thinker_output"].items()},
            actor_output={k: ActuationResult.from_dict(v) for k, v in d["actor_output"].items()},
            reflection_output={k: ReflectionResult.from_dict(v)
                               for k, v in d["reflection_output"].items()},
            attempt_counts=dict(d["attempt_counts"]),
            reactivation_counts=dict(d.get("reactivation_counts", {})),
            rescan_counts=dict(d.get("rescan_counts", {})),
            rescan_count=d["rescan_count"],
            ladder_history={k: list(v) for k, v in d.get("ladder_history", {}).items()},
            results={k: SubtaskRecord(**v) for k, v in d["results"].items()},
        )


def new_task_state(task_name: str, prompt: str, camera: CameraModel) -> TaskState:
    """Fresh blackboard for one task run."""
    if not prompt or not prompt.strip():
        raise InvalidInputError("prompt must be non-empty")
    if not isinstance(camera, CameraModel):
        raise InvalidInputError("camera must be a CameraModel")
    camera.validate()
    return TaskState(task_name=task_name, original_prompt=prompt, camera=camera)


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def payload_digest_safe(value: Any) -> Any:
    """Convert numpy scalars/arrays inside nested containers to JSON-friendly values."""
    if isinstance(value, dict):
        return {str(k): payload_digest_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [payload_digest_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value
