"""Deterministic 2.5D tabletop simulator.

Objects are prisms (blocks, pads) or open tubes (cups, bowls) resting on a
table at Z = 0.  An overhead pinhole camera ray-casts their top surfaces, so
depth maps back-project exactly onto the top faces.  Pick-and-place is pose
teleportation followed by settling onto whatever lies underneath, with seeded
drop and displacement noise.
"""

from __future__ import annotations

import copy
import json
import math
import re
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ActuationError, GoalError, ScenarioError
from .geometry import quantize_depth
from .state import (
    ActionPlan,
    ActuationResult,
    AtomicInstruction,
    CameraModel,
    Detection,
    Observation,
    wrap_angle,
)

SHAPES = ("block", "cup", "pad", "bowl")
DEFAULT_HEIGHT = {"block": None, "pad": 0.01, "cup": None, "bowl": None}
DEFAULT_GEOMETRY = {"block": "flat", "pad": "flat", "cup": "rimmed", "bowl": "rimmed"}
RIM_FRACTION = {"cup": 0.75, "bowl": 0.8}  # inner radius / outer radius

COLORS = {
    "red": (220, 40, 40), "green": (40, 170, 60), "blue": (40, 70, 220),
    "yellow": (230, 210, 40), "orange": (240, 140, 30), "purple": (140, 60, 170),
    "white": (235, 235, 235), "black": (30, 30, 30), "wooden": (170, 120, 70),
    "brown": (120, 80, 40), "pink": (240, 150, 190), "gray": (128, 128, 128),
    "cyan": (40, 200, 210),
}
TABLE_RGB = (90, 90, 90)

WORKSPACE_HALF = 0.3
WORKSPACE_TOP = 0.5
Z_TOL = 0.002          # vertical contact tolerance for stacking predicates
UNMOVED_TOL = 0.002    # planar displacement below which an object counts as unmoved
ROTATE_TOL = math.radians(5.0)


# -- scenario ---------------------------------------------------------------------------

@dataclass
class SimObject:
    id: str
    label: str
    shape: str
    size: float
    pose: tuple[float, float, float, float]  # X, Y, base Z, yaw
    color: str = "gray"
    height: float = 0.0
    geometry_class: str = ""

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ScenarioError(f"unknown shape {self.shape!r}")
        if self.size <= 0:
            raise ScenarioError(f"object {self.id!r} needs a positive size")
        if not self.height:
            self.height = DEFAULT_HEIGHT[self.shape] or {
                "block": self.size, "cup": self.size, "bowl": 0.4 * self.size}[self.shape]
        if not self.geometry_class:
            self.geometry_class = DEFAULT_GEOMETRY[self.shape]
        self.pose = tuple(float(p) for p in self.pose)

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.pose[:2])

    @property
    def base(self) -> float:
        return self.pose[2]

    @property
    def top(self) -> float:
        return self.pose[2] + self.height

    @property
    def hollow(self) -> bool:
        return self.shape in RIM_FRACTION

    @property
    def inner_radius(self) -> float:
        return RIM_FRACTION.get(self.shape, 0.0) * self.size / 2.0

    @property
    def size_class(self) -> str:
        return "small" if self.size < 0.05 else ("medium" if self.size < 0.1 else "large")

    def top_pose(self) -> tuple[float, float, float, float]:
        x, y, _, yaw = self.pose
        return (x, y, self.top, yaw)

    def contains(self, x, y, solid: bool = False):
        """Point-in-footprint test (vectorised). Hollow shapes are annuli unless ``solid``."""
        dx = np.asarray(x) - self.pose[0]
        dy = np.asarray(y) - self.pose[1]
        half = self.size / 2.0
        if self.shape in ("block", "pad"):
            c, s = math.cos(self.pose[3]), math.sin(self.pose[3])
            lx, ly = c * dx + s * dy, -s * dx + c * dy
            return (np.abs(lx) <= half) & (np.abs(ly) <= half)
        r2 = dx * dx + dy * dy
        inside = r2 <= half * half
        if solid:
            return inside
        return inside & (r2 >= self.inner_radius ** 2)

    def footprint_samples(self, n: int = 7) -> np.ndarray:
        """Points spread over the solid footprint, used for support and overlap tests."""
        half = self.size / 2.0 * 0.999
        g = np.linspace(-half, half, n)
        lx, ly = np.meshgrid(g, g)
        lx, ly = lx.ravel(), ly.ravel()
        if self.hollow:
            keep = lx * lx + ly * ly <= half * half
            lx, ly = lx[keep], ly[keep]
        c, s = math.cos(self.pose[3]), math.sin(self.pose[3])
        return np.column_stack([self.pose[0] + c * lx - s * ly, self.pose[1] + s * lx + c * ly])


@dataclass(frozen=True)
class GoalAtom:
    kind: str  # on_top_of | inside | at_position
    subject: str
    object: str = ""
    position: tuple[float, float, float] | None = None

    def to_dict(self) -> dict:
        if self.kind == "at_position":
            return {"at_position": [self.subject, list(self.position)]}
        return {self.kind: [self.subject, self.object]}


@dataclass(frozen=True)
class DetectionNoise:
    miss_rate: float = 0.0
    bbox_jitter: float = 0.0  # pixels, std-dev per corner
    conf_range: tuple[float, float] = (0.5, 0.95)

    @property
    def is_zero(self) -> bool:
        return self.miss_rate == 0 and self.bbox_jitter == 0

    @classmethod
    def from_dict(cls, d: dict | None) -> DetectionNoise:
        d = d or {}
        return cls(float(d.get("miss_rate", 0.0)), float(d.get("bbox_jitter", 0.0)),
                   tuple(d.get("conf_range", (0.5, 0.95))))

    def to_dict(self) -> dict:
        return {"miss_rate": self.miss_rate, "bbox_jitter": self.bbox_jitter,
                "conf_range": list(self.conf_range)}


@dataclass
class Scenario:
    name: str
    instruction: str
    objects: list[SimObject]
    goal: list[GoalAtom]
    p_drop: float = 0.0
    displacement_sigma: float = 0.0
    seed: int = 0
    delta: float = 0.01
    position_jitter: float = 0.0
    plan: list[dict] | None = None
    detection: DetectionNoise = field(default_factory=DetectionNoise)
    image_size: tuple[int, int] = (128, 128)
    camera: CameraModel | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ScenarioError("p_drop must lie in [0, 1]")
        if self.displacement_sigma < 0:
            raise ScenarioError("displacement_sigma must be non-negative")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate object ids in {ids}")
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise ScenarioError(f"duplicate object labels in {labels}")
        check_no_overlap(self.objects)
        for atom in self.goal:
            for oid in (atom.subject, atom.object):
                if oid and oid not in ids:
                    raise GoalError(f"goal references unknown object {oid!r}")
        if self.camera is None:
            self.camera = overhead_camera(self.image_size)

    def with_failures(self, p_drop: float | None = None, sigma: float | None = None) -> Scenario:
        out = copy.deepcopy(self)
        if p_drop is not None:
            out.p_drop = p_drop
        if sigma is not None:
            out.displacement_sigma = sigma
        out.__post_init__()
        return out

    def variant(self, episode_seed) -> Scenario:
        """Seeded layout jitter for one episode of a scenario family."""
        out = copy.deepcopy(self)
        if self.position_jitter <= 0:
            return out
        rng = np.random.default_rng(episode_seed)
        base = [o for o in out.objects if o.base == 0.0]
        originals = {o.id: o.pose for o in out.objects}
        for _ in range(200):
            offsets = {o.id: rng.uniform(-self.position_jitter, self.position_jitter, 2) for o in base}
            for o in out.objects:
                sup = o.id if o.id in offsets else _support_of(self.objects, o)
                dx, dy = offsets.get(sup, (0.0, 0.0))
                x, y, z, yaw = originals[o.id]
                o.pose = (x + dx, y + dy, z, yaw)
            try:
                check_no_overlap(out.objects)
                if all(max(abs(o.pose[0]), abs(o.pose[1])) + o.size / 2 < WORKSPACE_HALF
                       for o in out.objects):
                    return out
            except ScenarioError:
                pass
        for o in out.objects:
            o.pose = originals[o.id]
        return out


def _support_of(objects, obj) -> str | None:
    best = None
    for o in objects:
        if o.id != obj.id and abs(o.top - obj.base) <= Z_TOL and o.contains(*obj.pose[:2], solid=True):
            best = o.id
    return best


def check_no_overlap(objects) -> None:
    """Objects resting at the same level must not share floor area."""
    for i, a in enumerate(objects):
        for b in objects[i + 1:]:
            if abs(a.base - b.base) > Z_TOL:
                continue
            if np.hypot(*(a.xy - b.xy)) > (a.size + b.size) / math.sqrt(2):
                continue
            if a.contains(*b.footprint_samples().T, solid=True).any() or \
                    b.contains(*a.footprint_samples().T, solid=True).any():
                raise ScenarioError(f"initial poses of {a.id!r} and {b.id!r} overlap")


def overhead_camera(image_size=(128, 128), height: float = 0.8, focal: float = 200.0) -> CameraModel:
    """Downward-looking camera centred over the table origin."""
    w, h = image_size
    R = np.diag([1.0, -1.0, -1.0])
    t = -R @ np.array([0.0, 0.0, height])
    return CameraModel(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0, 0.0, R, t, baseline=0.1)


_SCHEMA = None


def scenario_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("closedloop").joinpath("schemas/scenario.schema.json").read_text()
        _SCHEMA = json.loads(text)
    return _SCHEMA


def _goal_atom(d: dict) -> GoalAtom:
    (kind, args), = d.items()
    if kind == "at_position":
        return GoalAtom(kind, args[0], position=tuple(float(v) for v in args[1]))
    return GoalAtom(kind, args[0], args[1])


def scenario_from_dict(d: dict) -> Scenario:
    try:
        jsonschema.validate(d, scenario_schema())
    except jsonschema.ValidationError as exc:
        raise ScenarioError(f"invalid scenario: {exc.message}") from exc
    fi = d.get("failure_injection", {})
    rnd = d.get("randomize", {})
    objects = [SimObject(id=o["id"], label=o["label"], shape=o["shape"], size=o["size"],
                         pose=tuple(o.get("pose", (0, 0, 0, 0))), color=o.get("color", "gray"),
                         height=o.get("height", 0.0), geometry_class=o.get("geometry_class", ""))
               for o in d["objects"]]
    cam = d.get("camera")
    return Scenario(
        name=d["name"],
        instruction=d["instruction"],
        objects=objects,
        goal=[_goal_atom(g) for g in d.get("goal", [])],
        p_drop=fi.get("p_drop", 0.0),
        displacement_sigma=fi.get("displacement_sigma", 0.0),
        seed=d.get("seed", 0),
        delta=d.get("delta", 0.01),
        position_jitter=rnd.get("position_jitter", 0.0),
        plan=d.get("plan"),
        detection=DetectionNoise.from_dict(d.get("detection")),
        image_size=tuple(d.get("image_size", (128, 128))),
        camera=None if cam is None else CameraModel.from_dict(cam),
    )


def builtin_scenarios() -> list[str]:
    root = resources.files("closedloop").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_scenario(name_or_path) -> Scenario:
    """Load a scenario file, or a built-in scenario by name."""
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml", ".json") and path.exists():
        text = path.read_text()
    else:
        res = resources.files("closedloop").joinpath(f"scenarios/{name_or_path}.yaml")
        if not res.is_file():
            raise ScenarioError(f"no scenario file or built-in scenario named {name_or_path!r}")
        text = res.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping")
    return scenario_from_dict(data)


# -- rendering ----------------------------------------------------------------------

class _RayCache:
    """Per-pixel world-space ray directions for a camera, scaled so s is z_axial."""

    def __init__(self, cam: CameraModel, size: tuple[int, int]):
        w, h = size
        u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        cam_rays = pix @ cam.K_inv.T           # camera-frame, z component == 1
        self.dirs = cam_rays @ cam.R            # == (R^T @ ray) for each pixel
        self.origin = cam.center
        self.size = size
        self._hits: dict[float, tuple] = {}

    def plane_hits(self, z: float):
        """(X, Y, s) where each pixel ray meets the horizontal plane Z = z."""
        key = round(float(z), 12)
        hit = self._hits.get(key)
        if hit is None:
            if len(self._hits) > 64:
                self._hits.clear()
            hit = self._hits[key] = self._plane_hits(key)
        return hit

    def _plane_hits(self, z: float):
        dz = self.dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (z - self.origin[2]) / dz
        X = self.origin[0] + s * self.dirs[..., 0]
        Y = self.origin[1] + s * self.dirs[..., 1]
        return X, Y, s


_RAY_CACHES: dict[tuple, _RayCache] = {}


def _rays(cam: CameraModel, size) -> _RayCache:
    key = (cam.K.tobytes(), cam.R.tobytes(), cam.t.tobytes(), tuple(size))
    rc = _RAY_CACHES.get(key)
    if rc is None:
        rc = _RAY_CACHES[key] = _RayCache(cam, size)
    return rc


def render(world: dict[str, SimObject], cam: CameraModel, size=(128, 128), step_index: int = 0) -> Observation:
    """Ray-cast top surfaces: rgb, axial depth (metres, quantised) and visible masks."""
    rc = _rays(cam, size)
    X, Y, depth = rc.plane_hits(0.0)
    depth = np.where(depth > 0, depth, np.inf)
    owner = np.full(depth.shape, -1, dtype=np.int32)
    ids = list(world)
    for i, oid in enumerate(ids):
        obj = world[oid]
        X, Y, s = rc.plane_hits(obj.top)
        hit = (s > 0) & (s < depth - 1e-12) & obj.contains(X, Y)
        depth = np.where(hit, s, depth)
        owner[hit] = i
    palette = np.array([COLORS.get(world[o].color, COLORS["gray"]) for o in ids] + [TABLE_RGB],
                       dtype=np.uint8)
    rgb = palette[owner]  # index -1 picks the table colour
    masks = {oid: owner == i for i, oid in enumerate(ids)}
    labels = {oid: world[oid].label for oid in ids}
    return Observation(rgb, quantize_depth(depth), masks, step_index, labels)


# -- predicates --------------------------------------------------------------------

def holds_on_top_of(world, a: str, b: str, delta: float) -> bool:
    """a rests on b, either centred within delta or entirely over b's footprint."""
    oa, ob = world[a], world[b]
    if abs(oa.base - ob.top) > Z_TOL:
        return False
    if np.hypot(*(oa.xy - ob.xy)) <= delta:
        return True
    return bool(ob.contains(*oa.footprint_samples(5).T, solid=True).all())


def holds_inside(world, a: str, b: str, delta: float = 0.0) -> bool:
    oa, ob = world[a], world[b]
    if not ob.hollow:
        return False
    return bool(np.hypot(*(oa.xy - ob.xy)) <= ob.inner_radius and oa.base < ob.top)


def holds_at_position(world, a: str, position, delta: float) -> bool:
    return bool(np.hypot(*(world[a].xy - np.asarray(position[:2]))) <= delta)


def check_goal(world: dict[str, SimObject], goal, delta: float = 0.01) -> bool:
    """True iff every goal atom holds."""
    for atom in goal:
        for oid in (atom.subject, atom.object):
            if oid and oid not in world:
                raise GoalError(f"goal references unknown object {oid!r}")
        if atom.kind == "on_top_of":
            ok = holds_on_top_of(world, atom.subject, atom.object, delta)
        elif atom.kind == "inside":
            ok = holds_inside(world, atom.subject, atom.object)
        elif atom.kind == "at_position":
            ok = holds_at_position(world, atom.subject, atom.position, delta)
        else:
            raise GoalError(f"unknown goal atom {atom.kind!r}")
        if not ok:
            return False
    return True


_NUM = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def parse_position(text: str) -> tuple[float, ...]:
    """'(0.5, 0.0, 0.02)' -> (0.5, 0.0, 0.02)."""
    vals = tuple(float(x) for x in _NUM.findall(text))
    if len(vals) not in (2, 3):
        raise ValueError(f"cannot read a position from {text!r}")
    return vals


def label_index(world) -> dict[str, str]:
    return {o.label: oid for oid, o in world.items()}


def postcondition_atom(world, instr: AtomicInstruction) -> GoalAtom | None:
    """The ground-truth predicate a subtask is meant to establish (None: always holds)."""
    ids = label_index(world)
    obj = ids.get(instr.object_query)
    if instr.verb in ("move", "reach"):
        return None
    if obj is None:
        raise GoalError(f"unknown object {instr.object_query!r}")
    pos = instr.tag("position_ref")
    if instr.verb == "rotate":
        return GoalAtom("rotate", obj)
    if pos is not None:
        return GoalAtom("at_position", obj, position=parse_position(pos.value))
    if instr.verb == "push" or not instr.target_query:
        return None
    tgt = ids.get(instr.target_query)
    if tgt is None:
        ref = instr.tag("object_ref")
        tgt = ref.value if ref is not None and ref.value in world else None
    if tgt is None:
        raise GoalError(f"unknown target {instr.target_query!r}")
    if world[tgt].hollow and world[obj].size < 2 * world[tgt].inner_radius:
        return GoalAtom("inside", obj, tgt)
    return GoalAtom("on_top_of", obj, tgt)


def target_yaw(instr: AtomicInstruction) -> float | None:
    for t in instr.memory_tags:
        if t.key in ("yaw", "yaw_deg"):
            v = float(_NUM.findall(t.value)[0])
            return math.radians(v) if t.key == "yaw_deg" else v
    return None


def holds_postcondition(world, instr: AtomicInstruction, delta: float) -> bool:
    try:
        atom = postcondition_atom(world, instr)
    except GoalError:
        return False
    if atom is None:
        return True
    if atom.kind == "rotate":
        want = target_yaw(instr)
        return want is None or abs(wrap_angle(world[atom.subject].pose[3] - want)) <= ROTATE_TOL
    return check_goal(world, [atom], delta)


# -- environment ----------------------------------------------------------------------

class TabletopSim:
    """One simulated episode: world state, seeded RNG, render cache and step history."""

    def __init__(self, scenario: Scenario, seed=None):
        self.scenario = scenario
        self.camera = scenario.camera
        self.size = tuple(scenario.image_size)
        self._seed = scenario.seed if seed is None else seed
        self.reset()

    def reset(self) -> Observation:
        self.world: dict[str, SimObject] = {o.id: copy.copy(o) for o in self.scenario.objects}
        check_no_overlap(list(self.world.values()))
        self.rng = np.random.default_rng(self._seed)
        self.step_index = 0
        self.history: list[dict[str, SimObject]] = [self._snapshot()]
        self._obs: Observation | None = None
        return self.observe()

    def _snapshot(self) -> dict[str, SimObject]:
        return {k: copy.copy(v) for k, v in self.world.items()}

    def observe(self) -> Observation:
        if self._obs is None or self._obs.step_index != self.step_index:
            self._obs = render(self.world, self.camera, self.size, self.step_index)
        return self._obs

    def world_at(self, step_index: int) -> dict[str, SimObject]:
        return self.history[step_index]

    def object_heights(self) -> dict[str, float]:
        return {o.label: o.height for o in self.world.values()}

    def label_to_id(self, label: str) -> str | None:
        return label_index(self.world).get(label)

    def _check_bounds(self, pose) -> None:
        x, y, z, _ = pose
        if abs(x) > WORKSPACE_HALF or abs(y) > WORKSPACE_HALF or not (-Z_TOL <= z <= WORKSPACE_TOP):
            raise ActuationError(f"pose {tuple(round(p, 4) for p in pose)} is outside the workspace")

    def _topmost_at(self, x: float, y: float) -> SimObject | None:
        hits = [o for o in self.world.values() if o.contains(x, y)]
        return max(hits, key=lambda o: o.top) if hits else None

    def _settle(self, obj: SimObject, x: float, y: float, yaw: float) -> None:
        x, y, yaw = float(x), float(y), float(yaw)
        obj.pose = (x, y, 0.0, yaw)
        pts = obj.footprint_samples()
        base = 0.0
        for other in self.world.values():
            if other is obj:
                continue
            if other.contains(pts[:, 0], pts[:, 1]).any():
                base = max(base, other.top)
        obj.pose = (x, y, float(base), yaw)

    def execute(self, cmd: ActionPlan) -> tuple[Observation, ActuationResult]:
        """Run one primitive; returns the new observation and what happened."""
        self._check_bounds(cmd.pick_pose)
        self._check_bounds(cmd.place_pose)
        sid = cmd.subtask_id
        # fixed draw order keeps the RNG stream independent of the branch taken
        u_drop = self.rng.random()
        noise = self.rng.normal(0.0, 1.0, 2) * self.scenario.displacement_sigma
        u_yaw = self.rng.uniform(-math.pi, math.pi)

        if cmd.primitive in ("move", "reach"):
            result = ActuationResult(sid, executed=True)
        else:
            obj = self._topmost_at(*cmd.pick_pose[:2])
            if obj is None:
                result = ActuationResult(sid, executed=False)
            elif cmd.primitive == "rotate":
                self._settle(obj, obj.pose[0], obj.pose[1], wrap_angle(cmd.place_pose[3]))
                result = ActuationResult(sid, True, False, obj.top_pose(), obj.id)
            elif u_drop < self.scenario.p_drop:
                # slipped out of the gripper during the lift: lands back where it was, reoriented
                self._settle(obj, obj.pose[0], obj.pose[1], wrap_angle(u_yaw))
                result = ActuationResult(sid, True, True, obj.top_pose(), obj.id)
            else:
                if cmd.primitive == "push":
                    dx = cmd.place_pose[0] - cmd.pick_pose[0]
                    dy = cmd.place_pose[1] - cmd.pick_pose[1]
                    x, y, yaw = obj.pose[0] + dx, obj.pose[1] + dy, obj.pose[3]
                else:
                    x, y, yaw = cmd.place_pose[0], cmd.place_pose[1], wrap_angle(cmd.place_pose[3])
                self._settle(obj, x + noise[0], y + noise[1], yaw)
                result = ActuationResult(sid, True, False, obj.top_pose(), obj.id)

        self.step_index += 1
        self.history.append(self._snapshot())
        return self.observe(), result

    def check_goal(self, goal=None) -> bool:
        return check_goal(self.world, self.scenario.goal if goal is None else goal, self.scenario.delta)

    def evaluate(self, instr: AtomicInstruction, step_index: int | None = None) -> bool:
        world = self.world if step_index is None else self.history[step_index]
        return holds_postcondition(world, instr, self.scenario.delta)


def reset(scenario: Scenario, seed=None) -> tuple[TabletopSim, Observation]:
    sim = TabletopSim(scenario, seed)
    return sim, sim.observe()


# -- synthetic detector --------------------------------------------------------------

def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    """Pixel bounds (u_min, v_min, u_max, v_max) with exclusive max; None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def oracle_detect(obs: Observation, labels, noise: DetectionNoise, source_id: str, seed) -> list[Detection]:
    """Ground-truth boxes from the rendered masks, with seeded jitter, misses and confidences."""
    seq = [int(s) for s in np.atleast_1d(seed)] + [zlib.crc32(source_id.encode())]
    rng = np.random.default_rng(seq)
    w, h = obs.size
    lo, hi = noise.conf_range
    out = []
    for label in labels:
        u_miss = rng.random()
        jitter = rng.normal(0.0, 1.0, 4) * noise.bbox_jitter
        u_conf = rng.random()
        oid = obs.id_for_label(label)
        if oid is None:
            continue
        box = mask_bbox(obs.masks[oid])
        if box is None or u_miss < noise.miss_rate:
            continue
        u0, v0, u1, v1 = np.asarray(box) + jitter
        u0, u1 = np.clip([u0, u1], 0.0, w)
        v0, v1 = np.clip([v0, v1], 0.0, h)
        if not (u0 < u1 and v0 < v1):
            continue
        conf = hi if noise.is_zero else lo + (hi - lo) * u_conf
        out.append(Detection(label, (u0, v0, u1, v1), float(conf), source_id))
    return out


def goal_from_dicts(items) -> list[GoalAtom]:
    return [_goal_atom(d) for d in items]


def scenario_summary(s: Scenario) -> dict:
    return {"name": s.name, "instruction": s.instruction, "p_drop": s.p_drop,
            "displacement_sigma": s.displacement_sigma, "seed": s.seed,
            "objects": [o.id for o in s.objects], "goal": [g.to_dict() for g in s.goal]}


__all__ = [
    "SimObject", "GoalAtom", "Scenario", "DetectionNoise", "TabletopSim", "render", "reset",
    "check_goal", "oracle_detect", "load_scenario", "scenario_from_dict", "overhead_camera",
    "postcondition_atom", "holds_postcondition", "mask_bbox", "builtin_scenarios",
]
