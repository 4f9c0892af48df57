"""Simulator-privileged stand-in model.

`OracleBackend` answers every role from the simulator's ground truth, in the
same JSON shapes a real model must produce. It drives the Monte Carlo
ablations, and `mock_completions_server` exposes it over the chat-completions
wire protocol for record/replay tests.
"""

from __future__ import annotations

import json
import math
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .backends import AgentRequest, AgentResponse
from .errors import FixtureMiss
from .sim import (
    UNMOVED_TOL,
    Z_TOL,
    holds_inside,
    holds_postcondition,
    label_index,
    mask_bbox,
    parse_position,
    postcondition_atom,
    render,
    target_yaw,
)
from .state import AtomicInstruction

NEAR_FRACTION = 0.2
REL_MARGIN = 2.0  # pixels of centroid separation before left/right or above/below is asserted


def plan_from_scenario(scenario) -> list[dict]:
    """The scenario's scripted plan, or one pick_place per goal atom."""
    if scenario.plan:
        return [dict(p) for p in scenario.plan]
    labels = {o.id: o.label for o in scenario.objects}
    steps = []
    for g in scenario.goal:
        if g.kind == "at_position":
            steps.append({"verb": "pick_place", "object": labels[g.subject],
                          "memory_tags": [{"key": "goal_position", "kind": "position_ref",
                                           "value": "({:.4f}, {:.4f}, {:.4f})".format(*g.position)}]})
        else:
            steps.append({"verb": "pick_place", "object": labels[g.subject], "target": labels[g.object]})
    return steps


def scene_graph_doc(world, cam, size, obs=None) -> dict:
    """Nodes for visible objects and relations evaluated on their box centres."""
    obs = obs if obs is not None else render(world, cam, size)
    boxes = {oid: mask_bbox(m) for oid, m in obs.masks.items()}
    visible = [oid for oid in world if boxes[oid] is not None]
    nodes = [{"id": oid, "label": world[oid].label, "color": world[oid].color,
              "size_class": world[oid].size_class, "geometry_class": world[oid].geometry_class}
             for oid in visible]
    near = NEAR_FRACTION * math.hypot(*size)
    centers = {oid: ((boxes[oid][0] + boxes[oid][2]) / 2, (boxes[oid][1] + boxes[oid][3]) / 2)
               for oid in visible}
    edges = []
    for i, a in enumerate(visible):
        for b in visible[i + 1:]:
            (ua, va), (ub, vb) = centers[a], centers[b]
            if ub - ua >= REL_MARGIN:
                edges.append([a, "left_of", b])
            elif ua - ub >= REL_MARGIN:
                edges.append([b, "left_of", a])
            if vb - va >= REL_MARGIN:
                edges.append([a, "above", b])
            elif va - vb >= REL_MARGIN:
                edges.append([b, "above", a])
            if math.hypot(ua - ub, va - vb) < near:
                edges.append([a, "near", b])
    for a in visible:
        oa = world[a]
        for b in visible:
            if a == b:
                continue
            ob = world[b]
            if holds_inside(world, a, b):
                edges.append([a, "inside", b])
            elif abs(oa.base - ob.top) <= Z_TOL and ob.contains(*oa.pose[:2], solid=True):
                edges.append([a, "on_top_of", b])
    return {"nodes": nodes, "edges": edges}


class OracleBackend:
    """Answers from simulator ground truth; bound to one episode's `TabletopSim`."""

    kind = "oracle"

    def __init__(self, sim):
        self.sim = sim

    def complete(self, req: AgentRequest) -> AgentResponse:
        return AgentResponse(json.dumps(self.answer(req.role, req.user_payload), sort_keys=True))

    def answer(self, role: str, payload: dict) -> dict:
        handler = getattr(self, f"_{role}", None)
        if handler is None or self.sim is None:
            raise FixtureMiss(f"oracle cannot answer role {role!r}")
        return handler(payload)

    # roles

    def _decomposer(self, payload):
        return {"subtasks": plan_from_scenario(self.sim.scenario)}

    def _descriptor(self, payload):
        step = payload["step_index"]
        obs = self.sim.observe() if step == self.sim.step_index else None
        return scene_graph_doc(self.sim.world_at(step), self.sim.camera, self.sim.size, obs)

    def _perceptor(self, payload):
        instr = AtomicInstruction.from_dict(payload["subtask"])
        labels = payload["scene_labels"]
        ooi = instr.object_query or instr.target_query
        target = instr.target_query if instr.target_query in labels and instr.target_query != ooi else ""
        others = [lab for lab in labels if lab not in (ooi, target)]
        return {"object_of_interest": ooi, "target": target, "not_object_of_interest": others,
                "geometry_class": None}

    def _thinker(self, payload):
        instr = AtomicInstruction.from_dict(payload["subtask"])
        pos = instr.tag("position_ref")
        yaw = None
        if instr.verb == "rotate":
            ref = {"kind": "none", "value": ""}
            yaw = target_yaw(instr)
        elif pos is not None:
            ref = {"kind": "memory_tag", "value": pos.key}
        elif payload.get("target"):
            ref = {"kind": "object", "value": payload["target"]}
        else:
            ref = {"kind": "none", "value": ""}
        return {"pick_object": payload["object_of_interest"], "place_reference": ref, "yaw": yaw}

    def _reflector(self, payload):
        instr = AtomicInstruction.from_dict(payload["subtask"])
        before = self.sim.world_at(payload["before_step"])
        after = self.sim.world_at(payload["after_step"])
        delta = self.sim.scenario.delta
        oid = label_index(after).get(instr.object_query)
        observed = None if oid is None else list(after[oid].top_pose()[:3])
        if holds_postcondition(after, instr, delta):
            return {"verdict": "success", "failing_stage": "none",
                    "explanation": "the subtask's postcondition holds", "observed_position": observed}
        stage, why = self._attribute(before, after, instr, oid)
        return {"verdict": "failure", "failing_stage": stage, "explanation": why,
                "observed_position": observed}

    @staticmethod
    def _attribute(before, after, instr, oid):
        if oid is None:
            return "perceptor", f"no object called {instr.object_query!r} is in the scene"
        moved = {k for k in after if np.hypot(*(after[k].xy - before[k].xy)) > UNMOVED_TOL}
        if oid not in moved:
            if moved:
                return "grounder", "a different object was moved"
            return "actor", f"the {instr.object_query} did not move"
        try:
            atom = postcondition_atom(after, instr)
        except Exception:  # unresolvable target: treat like a wrong placement
            atom = None
        intended = atom.object if atom is not None else ""
        o = after[oid]
        for k, sup in after.items():
            if k in (oid, intended):
                continue
            if abs(o.base - sup.top) <= Z_TOL and sup.contains(*o.pose[:2], solid=True) \
                    or holds_inside(after, oid, k):
                return "grounder", f"the {instr.object_query} ended up on the {sup.label}"
        return "thinker", f"the {instr.object_query} was placed off target"

    def _single_agent(self, payload):
        """Plans every action from the initial scene, chaining predicted positions."""
        world = self.sim.world_at(payload["step_index"])
        ids = label_index(world)
        pred = {oid: [o.pose[0], o.pose[1], o.top] for oid, o in world.items()}
        actions = []
        for step in plan_from_scenario(self.sim.scenario):
            instr = AtomicInstruction.from_dict({"id": "x", "verb": step["verb"],
                                                 "object_query": step.get("object", ""),
                                                 "target_query": step.get("target", ""),
                                                 "memory_tags": step.get("memory_tags", [])})
            oid = ids.get(instr.object_query)
            if oid is None:
                continue
            obj = world[oid]
            px, py, pz = pred[oid]
            if obj.hollow:  # grasp the rim, not the hole
                px += 0.5 * (obj.inner_radius + obj.size / 2.0)
            pick = [px, py, pz, obj.pose[3]]
            pos = instr.tag("position_ref")
            if instr.verb == "rotate":
                yaw = target_yaw(instr) or 0.0
                pick[3] = yaw
                place = list(pick)
            elif pos is not None:
                p = parse_position(pos.value)
                place = [p[0], p[1], (p[2] if len(p) == 3 else 0.0) + obj.height, obj.pose[3]]
                pred[oid] = place[:3]
            elif instr.target_query in ids:
                tx, ty, tz = pred[ids[instr.target_query]]
                place = [tx, ty, tz + obj.height, obj.pose[3]]
                pred[oid] = place[:3]
            else:
                place = list(pick)
            actions.append({"primitive": instr.verb, "pick_pose": pick, "place_pose": place,
                            "object": instr.object_query, "target": instr.target_query})
        return {"actions": actions}


# -- wire-level mock ------------------------------------------------------------------

class _Holder:
    def __init__(self):
        self.backend: OracleBackend | None = None
        self.hits = 0
        self.lock = threading.Lock()


def _role_of(system_text: str) -> str:
    first = system_text.splitlines()[0] if system_text else ""
    if not first.startswith("role:"):
        raise ValueError("system message does not start with a role line")
    return first.split(":", 1)[1].strip()


def _make_handler(holder: _Holder):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            with holder.lock:
                holder.hits += 1
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                msgs = body["messages"]
                role = _role_of(msgs[0]["content"])
                parts = msgs[1]["content"]
                text = parts if isinstance(parts, str) else next(p["text"] for p in parts if p["type"] == "text")
                answer = holder.backend.answer(role, json.loads(text))
                out = {"id": "mock", "object": "chat.completion", "model": body.get("model", ""),
                       "choices": [{"index": 0, "finish_reason": "stop",
                                    "message": {"role": "assistant",
                                                "content": json.dumps(answer, sort_keys=True)}}]}
                code, data = 200, json.dumps(out).encode()
            except Exception as exc:
                code, data = 400, json.dumps({"error": str(exc)}).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return Handler


class MockCompletionsServer:
    """Chat-completions endpoint on localhost answering with an `OracleBackend`."""

    def __init__(self):
        self.holder = _Holder()
        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), _make_handler(self.holder))
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    @property
    def hits(self) -> int:
        return self.holder.hits

    def bind(self, sim) -> None:
        """Point the oracle at the simulator of the episode being served."""
        self.holder.backend = OracleBackend(sim)

    def start(self):
        self.thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


@contextmanager
def mock_completions_server():
    server = MockCompletionsServer().start()
    try:
        yield server
    finally:
        server.stop()


__all__ = ["OracleBackend", "MockCompletionsServer", "mock_completions_server", "plan_from_scenario",
           "scene_graph_doc"]
