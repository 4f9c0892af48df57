"""Sequential subtask loop with reflection-driven recovery.

Each subtask runs perceive -> ground -> project -> think -> act -> reflect. On a
failed reflection the ladder escalates strictly:
retry the subtask, then reactivate the failing stage, then rescan the scene,
then give up with a failure report.
"""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import agents as ag
from .backends import BackendConfig, BackendFactory
from .detection import default_providers
from .errors import (
    BackendError,
    ConfigError,
    DescriptorError,
    InvalidInputError,
    SchemaViolation,
    StageError,
)
from .sim import TabletopSim
from .state import (
    STAGES,
    AtomicInstruction,
    MemoryTag,
    PerceptionTargets,
    RecoveryAction,
    ReflectionResult,
    SubtaskRecord,
    TaskState,
    new_task_state,
)
from .trace import Tracer, make_run_id

PIPELINE = ("descriptor", "perceptor", "grounder", "projector", "thinker", "actor")
EVENT_NAME = {"decomposer": "decompose", "descriptor": "describe", "perceptor": "perceive",
              "grounder": "ground", "projector": "project", "thinker": "think", "actor": "act",
              "reflector": "reflect", "single_agent": "single_agent"}


@dataclass
class RecoveryConfig:
    max_retries_same: int = 2
    max_reactivations: int = 1
    max_rescans: int = 1
    reflector_enabled: bool = True
    single_agent_mode: bool = False

    def __post_init__(self):
        for name in ("max_retries_same", "max_reactivations", "max_rescans"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")

    def budgets(self) -> tuple[int, int, int]:
        if not self.reflector_enabled:
            return (0, 0, 0)
        return (self.max_retries_same, self.max_reactivations, self.max_rescans)

    @property
    def max_attempts(self) -> int:
        r, a, s = self.budgets()
        return r + 1 + a + s

    @property
    def mode(self) -> str:
        if self.single_agent_mode:
            return "single_agent"
        return "closed_loop" if self.reflector_enabled else "open_loop"

    @classmethod
    def from_dict(cls, d: dict) -> RecoveryConfig:
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown recovery option(s): {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RunReport:
    subtasks: list[SubtaskRecord]
    task_outcome: str
    failure_report: dict | None = None
    goal_met: bool | None = None
    mode: str = "closed_loop"
    scenario: str = ""
    episode: int = 0
    seed: int = 0
    aborted: str | None = None
    ladder: dict[str, list[str]] = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.task_outcome == "success"

    def to_dict(self) -> dict:
        return {"subtasks": [s.to_dict() for s in self.subtasks], "task_outcome": self.task_outcome,
                "failure_report": self.failure_report, "goal_met": self.goal_met, "mode": self.mode,
                "scenario": self.scenario, "episode": self.episode, "seed": self.seed,
                "aborted": self.aborted, "ladder": {k: list(v) for k, v in self.ladder.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        return cls([SubtaskRecord(**s) for s in d["subtasks"]], d["task_outcome"], d.get("failure_report"),
                   d.get("goal_met"), d.get("mode", "closed_loop"), d.get("scenario", ""),
                   d.get("episode", 0), d.get("seed", 0), d.get("aborted"),
                   {k: list(v) for k, v in d.get("ladder", {}).items()})


@dataclass(frozen=True)
class SubtaskOutcome:
    reflection: ReflectionResult

    @property
    def success(self) -> bool:
        return self.reflection.success

    @property
    def failing_stage(self) -> str:
        return self.reflection.failing_stage

    def __str__(self):
        return "success" if self.success else f"failed({self.failing_stage})"


# -- ladder ---------------------------------------------------------------------------

def next_recovery(state: TaskState, last: ReflectionResult, cfg: RecoveryConfig) -> RecoveryAction:
    """Next rung for a failed subtask. Counters are per subtask."""
    if last.success:
        raise InvalidInputError("next_recovery needs a failed reflection")
    sid = last.subtask_id
    retries, reactivations, rescans = cfg.budgets()
    if state.attempt_counts.get(sid, 0) <= retries:
        return RecoveryAction("retry_subtask")
    if state.reactivation_counts.get(sid, 0) < reactivations:
        return RecoveryAction("reactivate", last.failing_stage)
    if state.rescan_counts.get(sid, 0) < rescans:
        return RecoveryAction("rescan_scene")
    return RecoveryAction("terminate_failure")


def _stage_index(stage: str) -> int:
    return PIPELINE.index(stage)


def _first_missing(state: TaskState, sid: str) -> str:
    if state.scene_graph is None:
        return "descriptor"
    if not state.object_of_interest:
        return "perceptor"
    if not state.grounder_output:
        return "grounder"
    if not state.grasp_points_3d:
        return "projector"
    if sid not in state.thinker_output:
        return "thinker"
    return "actor"


def _reset_subtask(state: TaskState) -> None:
    state.object_of_interest = ""
    state.target_of_interest = ""
    state.not_object_of_interest = []
    state.geometry_hint = None
    state.grounder_output = []
    state.grasp_points_2d = []
    state.grasp_points_3d = []


def _invalidate_scene(state: TaskState) -> None:
    state.scene_graph = None
    state.grounder_output = []
    state.grasp_points_2d = []
    state.grasp_points_3d = []


def _attempt_seed(agents: ag.AgentSet, sid: str, attempt: int) -> tuple[int, ...]:
    return (agents.seed, int(sid.lstrip("sa") or 0), attempt)


def _model_payload(agents: ag.AgentSet, extra: dict | None = None) -> tuple[str, dict]:
    calls = agents.take_calls()
    payload = dict(extra or {})
    if calls:
        payload["model"] = [{"role": c.role, "request_hash": c.request_hash, "response": c.response}
                            for c in calls]
    return ("model" if calls else "tool"), payload


def _emit(tracer: Tracer, agents: ag.AgentSet, stage: str, sid: str | None, extra: dict) -> None:
    kind, payload = _model_payload(agents, extra)
    tracer.emit(EVENT_NAME.get(stage, stage), kind, sid, payload)


# -- one attempt ----------------------------------------------------------------------

def step_subtask(state: TaskState, agents: ag.AgentSet, env, cfg: RecoveryConfig,
                 tracer: Tracer | None = None, start: str = "perceptor") -> SubtaskOutcome:
    """One attempt at ``state.current`` starting from ``start``; records exactly one reflection."""
    tracer = tracer or Tracer()
    cur = state.current
    if cur is None:
        raise InvalidInputError("step_subtask needs state.current")
    sid = cur.id
    state.attempt_counts[sid] = attempt = state.attempt_counts.get(sid, 0) + 1
    first = _first_missing(state, sid)
    if _stage_index(first) < _stage_index(start):
        start = first
    k = _stage_index(start)
    seed = _attempt_seed(agents, sid, attempt)
    plan = res = before = after = None
    stage = start
    try:
        if k <= 0:
            stage = "descriptor"
            state.observation = env.observe()
            state.scene_graph = ag.describe(state.observation, agents)
            _emit(tracer, agents, stage, sid, {"nodes": len(state.scene_graph)})
        if state.scene_graph is None:
            raise DescriptorError("no scene graph available")
        if k <= 1:
            stage = "perceptor"
            t = ag.perceive(cur, state.scene_graph, agents, attempt, state.geometry_hint)
            state.object_of_interest, state.target_of_interest = t.object_of_interest, t.target
            state.not_object_of_interest = list(t.not_object_of_interest)
            state.all_objects = list(t.all_objects)
            state.geometry_hint = t.geometry_class
            _emit(tracer, agents, stage, sid, {"object_of_interest": t.object_of_interest, "target": t.target})
        targets = PerceptionTargets(state.object_of_interest, state.target_of_interest,
                                    tuple(state.not_object_of_interest), tuple(state.all_objects),
                                    state.geometry_hint)
        # the placement target does not move during its subtask: keep its first measurement
        memory = _target_memory(state, sid, targets)
        if k <= 2:
            stage = "grounder"
            required = [targets.object_of_interest] + ([] if memory else [targets.target])
            fused, _, faults = ag.ground(targets, state.observation, agents, state.scene_graph, seed,
                                         required)
            state.grounder_output = fused
            _emit(tracer, agents, stage, sid, {"detections": [d.to_dict() for d in fused],
                                               "faults": [f.to_dict() for f in faults]})
        if k <= 3:
            stage = "projector"
            state.grasp_points_2d, state.grasp_points_3d = ag.project(
                targets, state.grounder_output, state.observation, state.camera, state.scene_graph,
                state.geometry_hint, seed, memory)
            _remember_target(state, sid, targets)
            _emit(tracer, agents, stage, sid, {"grasp_points": [g.to_dict() for g in state.grasp_points_3d]})
        if k <= 4:
            stage = "thinker"
            state.thinker_output[sid] = ag.think(cur, state.grasp_points_3d, state.scene_graph, agents,
                                                 agents.object_heights, targets)
            _emit(tracer, agents, stage, sid, {"plan": state.thinker_output[sid].to_dict()})
        stage = "actor"
        plan = state.thinker_output[sid]
        before = state.observation
        after, res = ag.act(plan, env)
        state.observation = after
        state.actor_output[sid] = res
        _emit(tracer, agents, stage, sid, {"result": res.to_dict()})
    except StageError as exc:
        charged = exc.stage if exc.stage in STAGES else "actor"
        refl = ReflectionResult(sid, "failure", charged, str(exc))
        _emit(tracer, agents, stage, sid, {"error": str(exc), "charged_to": charged})
        if cfg.reflector_enabled:
            state.reflection_output[sid] = refl
        return SubtaskOutcome(refl)

    if not cfg.reflector_enabled:
        # open loop: nothing is verified; the ground-truth check only feeds the report
        ok = env.evaluate(cur)
        return SubtaskOutcome(ReflectionResult(sid, "success") if ok else
                              ReflectionResult(sid, "failure", "actor", "postcondition not met"))

    try:
        refl = ag.reflect(before, after, cur, agents, plan, res)
    except SchemaViolation as exc:
        refl = ReflectionResult(sid, "failure", "actor", str(exc))
    state.reflection_output[sid] = refl
    _emit(tracer, agents, "reflector", sid, {"reflection": refl.to_dict()})
    if not refl.success and refl.observed_position is not None and state.scene_graph is not None:
        node = state.scene_graph.by_label(plan.object_label)
        if node is not None:
            state.grasp_points_3d = ag.apply_memory_update(state.grasp_points_3d, node.id,
                                                           refl.observed_position)
    return SubtaskOutcome(refl)


def _target_memory(state: TaskState, sid: str, targets: PerceptionTargets) -> dict:
    kept = state.target_memory.get(sid)
    if not targets.target or kept is None or state.scene_graph is None:
        return {}
    node = state.scene_graph.by_label(targets.target)
    if node is None or node.id != kept[1].object_id:
        return {}
    return {targets.target: kept}


def _remember_target(state: TaskState, sid: str, targets: PerceptionTargets) -> None:
    if not targets.target or sid in state.target_memory or state.scene_graph is None:
        return
    node = state.scene_graph.by_label(targets.target)
    for g2, g3 in zip(state.grasp_points_2d, state.grasp_points_3d):
        if node is not None and g3.object_id == node.id:
            state.target_memory[sid] = (g2, g3)


def _apply_recovery(state: TaskState, action: RecoveryAction, sid: str, env) -> str:
    """Update counters for ``action``; returns the stage the next attempt starts from."""
    if action.kind == "retry_subtask":
        return "perceptor"
    if action.kind == "reactivate":
        state.reactivation_counts[sid] = state.reactivation_counts.get(sid, 0) + 1
        return action.stage if action.stage in PIPELINE else "perceptor"
    state.rescan_counts[sid] = state.rescan_counts.get(sid, 0) + 1
    state.rescan_count += 1
    _invalidate_scene(state)
    state.observation = env.observe()
    return "descriptor"


# -- main loop ------------------------------------------------------------------------

_POOL: ThreadPoolExecutor | None = None


def _pool() -> ThreadPoolExecutor:
    global _POOL
    if _POOL is None:
        _POOL = ThreadPoolExecutor(max_workers=2, thread_name_prefix="closedloop-init")
    return _POOL


def _records(state: TaskState) -> list[SubtaskRecord]:
    return [state.results[s.id] for s in state.decomposed_prompts]


def _report(state: TaskState, cfg: RecoveryConfig, env, failure_report=None, aborted=None) -> RunReport:
    recs = _records(state)
    ok = bool(recs) and all(r.outcome == "success" for r in recs) and aborted is None
    return RunReport(recs, "success" if ok else "failure", failure_report,
                     goal_met=env.check_goal() if hasattr(env, "check_goal") else None,
                     mode=cfg.mode, aborted=aborted,
                     ladder={k: list(v) for k, v in state.ladder_history.items()})


def _initial_stage(state: TaskState, agents: ag.AgentSet, env, tracer: Tracer) -> None:
    """Decomposer and descriptor run concurrently; their results are joined here."""
    state.observation = env.observe()
    obs = state.observation
    f_dec = _pool().submit(ag.decompose, state.original_prompt, agents)
    f_des = _pool().submit(ag.describe, obs, agents)
    results = {}
    for name, fut in (("decomposer", f_dec), ("descriptor", f_des)):
        try:
            results[name] = fut.result()
        except (StageError, BackendError) as exc:
            results[name] = exc
    calls = {c.role: c for c in agents.take_calls()}
    for name in ("decomposer", "descriptor"):
        r = results[name]
        payload = {}
        if name in calls:
            c = calls[name]
            payload["model"] = [{"role": c.role, "request_hash": c.request_hash, "response": c.response}]
        if isinstance(r, Exception):
            payload["error"] = str(r)
        elif name == "decomposer":
            payload["subtasks"] = [s.to_dict() for s in r]
        else:
            payload["nodes"] = len(r)
        tracer.emit(EVENT_NAME[name], "model" if name in calls else "tool", None, payload)
    for r in results.values():
        if isinstance(r, BackendError):
            raise r
    if not isinstance(results["descriptor"], Exception):
        state.scene_graph = results["descriptor"]
    plan = results["decomposer"]
    if isinstance(plan, Exception):
        raise plan
    state.decomposed_prompts = list(plan)
    state.queue = list(plan)
    state.initial_decomposition_done = True
    state.multi_object = ag.multi_object(plan)
    state.results = {s.id: SubtaskRecord(s.id) for s in plan}


def run_pipeline(state: TaskState, agents: ag.AgentSet, env, cfg: RecoveryConfig | None = None,
                 tracer: Tracer | None = None) -> RunReport:
    """Decompose and describe, then work the queue subtask by subtask."""
    cfg = cfg or RecoveryConfig()
    tracer = tracer or Tracer()
    try:
        if not state.initial_decomposition_done:
            _initial_stage(state, agents, env, tracer)
    except StageError as exc:
        return _report(state, cfg, env, {"failed_subtask_id": None, "ladder_history": [],
                                         "last_explanation": str(exc)})
    except BackendError as exc:
        return _report(state, cfg, env, {"failed_subtask_id": None, "ladder_history": [],
                                         "last_explanation": str(exc)}, aborted=type(exc).__name__)

    failure_report = None
    try:
        while state.queue and not state.should_terminate:
            cur = state.queue[0]
            state.current = cur
            _reset_subtask(state)
            start = "perceptor"
            rec = state.results[cur.id]
            while True:
                outcome = step_subtask(state, agents, env, cfg, tracer, start)
                rec.attempts = state.attempt_counts[cur.id]
                if outcome.success or not cfg.reflector_enabled:
                    rec.outcome = "success" if outcome.success else "failed"
                    state.queue.pop(0)
                    break
                action = next_recovery(state, outcome.reflection, cfg)
                state.ladder_history.setdefault(cur.id, []).append(str(action))
                tracer.emit("recovery", "ladder", cur.id,
                            {"action": str(action), "attempts": rec.attempts,
                             "failing_stage": outcome.failing_stage,
                             "explanation": outcome.reflection.explanation})
                if action.kind == "terminate_failure":
                    rec.outcome = "failed"
                    state.should_terminate = True
                    failure_report = {"failed_subtask_id": cur.id,
                                      "ladder_history": list(state.ladder_history[cur.id]),
                                      "last_explanation": outcome.reflection.explanation}
                    break
                start = _apply_recovery(state, action, cur.id, env)
        if not state.queue:
            state.current = None
    except BackendError as exc:
        sid = state.current.id if state.current is not None else None
        return _report(state, cfg, env, {"failed_subtask_id": sid,
                                         "ladder_history": list(state.ladder_history.get(sid, [])),
                                         "last_explanation": str(exc)}, aborted=type(exc).__name__)
    return _report(state, cfg, env, failure_report)


# -- single-agent ablation ------------------------------------------------------------

def _action_instruction(plan) -> AtomicInstruction:
    """The subtask an action stands for, so its effect can be checked against ground truth."""
    tags = ()
    if plan.primitive == "pick_place" and not plan.target_label:
        x, y, z, _ = plan.place_pose
        tags = (MemoryTag("goal_position", "position_ref", f"({x}, {y}, 0.0)"),)
    elif plan.primitive == "rotate":
        tags = (MemoryTag("yaw", "context_ref", repr(plan.place_pose[3])),)
    return AtomicInstruction(plan.subtask_id, plan.primitive, plan.object_label, plan.target_label, tags)


def run_single_agent(state: TaskState, backend, env, tracer: Tracer | None = None) -> RunReport:
    """One model call plans every action from the initial image; actions run open-loop."""
    tracer = tracer or Tracer()
    cfg = RecoveryConfig(reflector_enabled=False, single_agent_mode=True)
    agents = backend if isinstance(backend, ag.AgentSet) else ag.AgentSet(backend)
    state.observation = env.observe()
    try:
        plans = ag.single_agent(state.original_prompt, state.observation, agents)
    except StageError as exc:
        _emit(tracer, agents, "single_agent", None, {"error": str(exc)})
        return _report(state, cfg, env, {"failed_subtask_id": None, "ladder_history": [],
                                         "last_explanation": str(exc)})
    except BackendError as exc:
        return _report(state, cfg, env, {"failed_subtask_id": None, "ladder_history": [],
                                         "last_explanation": str(exc)}, aborted=type(exc).__name__)
    _emit(tracer, agents, "single_agent", None, {"actions": [p.to_dict() for p in plans]})
    instrs = [_action_instruction(p) for p in plans]
    state.decomposed_prompts = instrs
    state.initial_decomposition_done = bool(instrs)
    state.results = {s.id: SubtaskRecord(s.id) for s in instrs}
    failure = None
    for plan, instr in zip(plans, instrs):
        rec = state.results[plan.subtask_id]
        rec.attempts = state.attempt_counts[plan.subtask_id] = 1
        try:
            obs, res = env.execute(plan)
        except StageError as exc:
            rec.outcome = "failed"
            tracer.emit("act", "tool", plan.subtask_id, {"error": str(exc), "charged_to": "actor"})
            failure = {"failed_subtask_id": plan.subtask_id, "ladder_history": [], "last_explanation": str(exc)}
            break
        state.observation = obs
        state.actor_output[plan.subtask_id] = res
        tracer.emit("act", "tool", plan.subtask_id, {"result": res.to_dict()})
        rec.outcome = "success" if env.evaluate(instr) else "failed"
    return _report(state, cfg, env, failure)


# -- episodes -------------------------------------------------------------------------

def episode_seed(base_seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(episode)]).generate_state(1)[0])


def run_episode(scenario, episode: int = 0, base_seed: int = 0, cfg: RecoveryConfig | None = None,
                backend_factory=None, detector_count: int = 2, sink: list | None = None,
                run_id: str = "") -> RunReport:
    """Build one seeded environment and run it under the configured mode."""
    from .oracle import OracleBackend

    cfg = cfg or RecoveryConfig()
    seed = episode_seed(base_seed, episode)
    scen = scenario.variant(seed)
    env = TabletopSim(scen, seed)
    backend = backend_factory(env) if backend_factory is not None else OracleBackend(env)
    agents = ag.AgentSet(backend, default_providers(scen.detection, detector_count),
                         env.object_heights(), seed=seed, episode=episode)
    state = new_task_state(scen.name, scen.instruction, env.camera)
    tracer = Tracer(run_id, episode, sink)
    if cfg.single_agent_mode:
        report = run_single_agent(state, agents, env, tracer)
    else:
        report = run_pipeline(state, agents, env, cfg, tracer)
    report.scenario, report.episode, report.seed = scen.name, episode, seed
    if tracer.enabled:
        tracer.emit("episode_end", "episode", None,
                    {"scenario": scen.name, "mode": cfg.mode, "p_drop": scen.p_drop,
                     "report": report.to_dict(), "state": state.to_dict()})
    return report


def batch_run_id(scenario, episodes: int, base_seed: int, cfg: RecoveryConfig) -> str:
    return make_run_id(scenario=scenario.name, p_drop=scenario.p_drop,
                       sigma=scenario.displacement_sigma, episodes=episodes, seed=base_seed,
                       recovery=cfg.to_dict())


def _run_shard(args):
    scenario, eps, base_seed, cfg, backend_cfg, detector_count, trace, run_id = args
    factory = BackendFactory(backend_cfg) if backend_cfg is not None else None
    reports, events = [], []
    for ep in eps:
        sink = [] if trace else None
        reports.append(run_episode(scenario, ep, base_seed, cfg, factory, detector_count, sink, run_id))
        events.extend(sink or [])
        if reports[-1].aborted:
            break
    return reports, events


def run_batch(scenario, episodes: int, base_seed: int = 0, cfg: RecoveryConfig | None = None,
              backend_cfg: BackendConfig | None = None, backend_factory=None, detector_count: int = 2,
              trace: bool = True, workers: int = 1) -> tuple[list[RunReport], list]:
    """Run ``episodes`` seeded episodes. Events come back merged by (episode, step_index).

    A backend abort (unavailable endpoint, fixture or cassette miss) stops the batch.
    """
    cfg = cfg or RecoveryConfig()
    run_id = batch_run_id(scenario, episodes, base_seed, cfg)
    if workers > 1 and backend_factory is None and (backend_cfg is None or backend_cfg.kind == "oracle"):
        chunks = [list(range(i, episodes, workers)) for i in range(workers)]
        # spawn, not fork: the parent may already hold worker threads
        with ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("spawn")) as pool:
            parts = list(pool.map(_run_shard, [(scenario, c, base_seed, cfg, backend_cfg, detector_count,
                                                trace, run_id) for c in chunks if c]))
        reports = sorted((r for rs, _ in parts for r in rs), key=lambda r: r.episode)
        events = sorted((e for _, es in parts for e in es), key=lambda e: (e.episode, e.step_index))
        return reports, events
    factory = backend_factory or (BackendFactory(backend_cfg) if backend_cfg is not None else None)
    reports, events = [], []
    for ep in range(episodes):
        sink = [] if trace else None
        reports.append(run_episode(scenario, ep, base_seed, cfg, factory, detector_count, sink, run_id))
        events.extend(sink or [])
        if reports[-1].aborted:
            break
    return reports, events


def success_rate(reports) -> float:
    return sum(r.success for r in reports) / len(reports) if reports else math.nan


__all__ = [
    "RecoveryConfig", "RunReport", "SubtaskOutcome", "run_pipeline", "step_subtask", "next_recovery",
    "run_single_agent", "run_episode", "run_batch", "episode_seed", "success_rate", "PIPELINE",
]
