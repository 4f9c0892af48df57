import json

import numpy as np
import pytest

from closedloop.backends import AgentResponse
from closedloop.state import CameraModel


class RoleBackend:
    """Test double: per-role canned replies (a dict, a list consumed in order, or a callable)."""

    kind = "test"

    def __init__(self, **replies):
        self.replies = {k: (list(v) if isinstance(v, list) else v) for k, v in replies.items()}
        self.requests = []

    def complete(self, req):
        self.requests.append(req)
        r = self.replies[req.role]
        if callable(r):
            r = r(req)
        elif isinstance(r, list):
            r = r.pop(0)
        return AgentResponse(r if isinstance(r, str) else json.dumps(r))


@pytest.fixture
def ident_cam():
    return CameraModel(500.0, 500.0, 320.0, 240.0)


def random_camera(rng):
    """A valid camera with a random rotation (QR of a Gaussian) and translation."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return CameraModel(rng.uniform(100, 1000), rng.uniform(100, 1000), rng.uniform(0, 640),
                       rng.uniform(0, 480), rng.uniform(-2, 2), q, rng.normal(size=3),
                       baseline=rng.uniform(0.01, 1.0))


FAIL_STAGES = ("decomposer", "descriptor", "perceptor", "grounder", "projector", "thinker", "actor")


class ScriptedReflector:
    """Oracle answers for every role except the reflector, whose verdicts follow a per-subtask script.

    ``scripts`` maps subtask id -> failing stages, one per failed attempt; once a
    script runs out the reflector reports success.
    """

    kind = "test"

    def __init__(self, env, scripts):
        from closedloop.oracle import OracleBackend

        self.oracle = OracleBackend(env)
        self.scripts = {k: list(v) for k, v in scripts.items()}

    def complete(self, req):
        if req.role != "reflector":
            return self.oracle.complete(req)
        script = self.scripts.get(req.user_payload["subtask"]["id"], [])
        if script:
            stage = script.pop(0)
            doc = {"verdict": "failure", "failing_stage": stage, "explanation": f"scripted {stage} fault"}
        else:
            doc = {"verdict": "success", "failing_stage": "none", "explanation": "ok"}
        return AgentResponse(json.dumps(doc))


def expected_ladder(failures, retries=2, reactivations=1, rescans=1):
    """Hand-written escalation oracle: (actions, outcome, attempts) for one subtask."""
    actions, used_a, used_s = [], 0, 0
    for attempt, stage in enumerate(list(failures) + [None], 1):
        if stage is None:
            return actions, "success", attempt
        if attempt <= retries:
            actions.append("retry_subtask")
        elif used_a < reactivations:
            used_a += 1
            actions.append(f"reactivate({stage})")
        elif used_s < rescans:
            used_s += 1
            actions.append("rescan_scene")
        else:
            actions.append("terminate_failure")
            return actions, "failed", attempt
    raise AssertionError("unreachable")


def rung(action: str) -> int:
    return ("retry_subtask", "reactivate", "rescan_scene", "terminate_failure").index(action.split("(")[0])


def run_script(scripts, cfg=None, scenario="stack_distractor", seed=0):
    """Run one episode of ``scenario`` with a scripted reflector; returns (report, events)."""
    from closedloop.orchestrator import RecoveryConfig, run_episode
    from closedloop.sim import load_scenario

    sink = []
    report = run_episode(load_scenario(scenario), 0, seed, cfg or RecoveryConfig(),
                         lambda env: ScriptedReflector(env, scripts), sink=sink)
    return report, sink


def check_script(scripts, cfg=None, scenario="stack_distractor", seed=0):
    """Run a script and compare against `expected_ladder`; returns a list of mismatches."""
    from closedloop.orchestrator import RecoveryConfig

    cfg = cfg or RecoveryConfig()
    report, events = run_script(scripts, cfg, scenario, seed)
    budgets = (cfg.max_retries_same, cfg.max_reactivations, cfg.max_rescans)
    problems = []
    stopped = False
    for rec in report.subtasks:
        if stopped:
            if rec.outcome != "skipped" or rec.attempts != 0:
                problems.append(f"{rec.id}: ran after termination")
            continue
        want_actions, want_outcome, want_attempts = expected_ladder(scripts.get(rec.id, []), *budgets)
        got = report.ladder.get(rec.id, [])
        traced = [e.payload["action"] for e in events if e.stage == "recovery" and e.subtask_id == rec.id]
        if got != want_actions or traced != want_actions:
            problems.append(f"{rec.id}: ladder {got} (trace {traced}) != {want_actions}")
        if (rec.outcome, rec.attempts) != (want_outcome, want_attempts):
            problems.append(f"{rec.id}: {rec.outcome}/{rec.attempts} != {want_outcome}/{want_attempts}")
        if [rung(a) for a in got] != sorted(rung(a) for a in got):
            problems.append(f"{rec.id}: ladder not monotone {got}")
        stopped = want_outcome == "failed"
    if stopped and (report.task_outcome != "failure" or not report.failure_report):
        problems.append("terminal case without a failure report")
    if not stopped and report.task_outcome != "success":
        problems.append(f"expected success, got {report.task_outcome}: {report.failure_report}")
    return problems


def ladder_scripts(n=50, seed=2024, subtasks=("s1", "s2")):
    """Seeded failure scripts: 0-6 failures per subtask with random failing stages."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        out.append({sid: [FAIL_STAGES[i] for i in rng.integers(0, len(FAIL_STAGES), rng.integers(0, 7))]
                    for sid in subtasks})
    return out


# -- acceptance report ----------------------------------------------------------------------

_CRITERIA: dict[int, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    if report.failed:
        _CRITERIA[n] = "FAIL"
    elif report.skipped:
        _CRITERIA.setdefault(n, "SKIP")
    elif report.when == "call":
        _CRITERIA.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {_CRITERIA[n]}")
