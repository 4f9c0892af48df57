"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line; the run ends with a summary section."""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from closedloop.agents import fuse_detections, iou, merge_group
from closedloop.backends import BackendConfig, HttpBackend, RecordBackend
from closedloop.cli import package_asset
from closedloop.errors import InvalidDisparityError, RayMissError
from closedloop.geometry import backproject, grasp_point_2d, project_to_pixel, stereo_depth
from closedloop.oracle import mock_completions_server
from closedloop.orchestrator import RecoveryConfig, run_batch, success_rate
from closedloop.sim import DetectionNoise, load_scenario, mask_bbox, oracle_detect, reset
from closedloop.state import Detection
from conftest import check_script, ladder_scripts, random_camera


def verdict(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


# -- 1 --------------------------------------------------------------------------------------

def test_criterion_1_geometry_round_trip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        cam = random_camera(rng)
        z = rng.uniform(0.1, 20.0)
        pc = np.array([rng.uniform(-z, z), rng.uniform(-z, z), z])
        world = cam.R.T @ (pc - cam.t)
        u, v, za = project_to_pixel(cam, world)
        worst = max(worst, float(np.max(np.abs(np.asarray(backproject(cam, u, v, za)) - world))))
    elapsed = time.perf_counter() - t0
    assert verdict(1, worst <= 1e-9 and elapsed < 5.0, f"max error {worst:.2e}, {elapsed:.2f} s")


# -- 2 --------------------------------------------------------------------------------------

def test_criterion_2_stereo_depth():
    exact = stereo_depth(Fraction(1, 10), 500, 50) == 1 and stereo_depth(0.1, 500, 50) == 1.0
    rejected = 0
    for d in (0, 0.0, -3):
        try:
            stereo_depth(0.1, 500, d)
        except InvalidDisparityError:
            rejected += 1
    assert verdict(2, exact and rejected == 3, f"z=1 exact: {exact}, invalid disparities rejected: {rejected}/3")


# -- 3 --------------------------------------------------------------------------------------

def _disc(shape, c, r):
    vv, uu = np.mgrid[: shape[0], : shape[1]]
    return (uu - c[0]) ** 2 + (vv - c[1]) ** 2 <= r * r


def _mask_corpus(n, seed=3):
    """Annuli, multi-hole blobs and rectangles with holes, all seeded."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        h, w = rng.integers(24, 72, 2)
        c = (rng.uniform(w * 0.3, w * 0.7), rng.uniform(h * 0.3, h * 0.7))
        kind = k % 3
        if kind == 0:
            r_out = rng.uniform(4, min(h, w) / 2.5)
            r_in = rng.uniform(1, r_out - 1.5)
            m = _disc((h, w), c, r_out) & ~_disc((h, w), c, r_in)
        elif kind == 1:
            m = np.zeros((h, w), bool)
            for _ in range(rng.integers(2, 6)):
                m |= _disc((h, w), (c[0] + rng.normal(0, 4), c[1] + rng.normal(0, 4)), rng.uniform(3, 10))
            for _ in range(rng.integers(2, 5)):
                m &= ~_disc((h, w), (c[0] + rng.normal(0, 5), c[1] + rng.normal(0, 5)), rng.uniform(1, 3))
        else:
            m = np.zeros((h, w), bool)
            u0, v0 = int(c[0]) - rng.integers(3, 10), int(c[1]) - rng.integers(3, 10)
            m[max(v0, 0): int(c[1]) + rng.integers(3, 10), max(u0, 0): int(c[0]) + rng.integers(3, 10)] = True
            for _ in range(rng.integers(1, 4)):
                m[rng.integers(0, h), rng.integers(0, w)] = False
        if m.any():
            out.append(m)
    return out


def test_criterion_3_grasp_in_mask():
    masks = _mask_corpus(1200)
    total = on = 0
    for i, m in enumerate(masks):
        for cls in ("irregular", "rimmed", "round", "flat"):
            total += 1
            try:
                gp = grasp_point_2d(m, cls, rng_seed=i)
            except RayMissError:
                continue
            on += bool(m[int(gp.v), int(gp.u)]) and gp.on_mask
    vv, uu = np.mgrid[:33, :33]
    d = np.hypot(uu - 16, vv - 16)
    ring = (d >= 5) & (d <= 8)
    fx = grasp_point_2d(ring, "irregular", theta=0.0)
    fixture = (fx.u, fx.v, fx.radius) == (21.0, 16.0, 5.0)
    assert verdict(3, len(masks) >= 1000 and on == total and fixture,
                   f"{on}/{total} on mask over {len(masks)} masks, annulus r*={fx.radius}")


# -- 4 --------------------------------------------------------------------------------------

def test_criterion_4_ladder_conformance():
    scripts = ladder_scripts(50)
    problems = {i: p for i, s in enumerate(scripts) if (p := check_script(s))}
    terminal = sum(any(len(v) >= 5 for v in s.values()) for s in scripts)
    assert verdict(4, not problems, f"{50 - len(problems)}/50 scripts conform ({terminal} terminal)"), problems


# -- 5 --------------------------------------------------------------------------------------

def test_criterion_5_closed_loop_benefit():
    sc = load_scenario("stack_blocks").with_failures(p_drop=0.3, sigma=0.005)
    arms = {"closed": RecoveryConfig(), "open": RecoveryConfig(reflector_enabled=False),
            "single": RecoveryConfig(single_agent_mode=True)}
    t0 = time.perf_counter()
    rates = {k: success_rate(run_batch(sc, 2000, 0, cfg, trace=False)[0]) for k, cfg in arms.items()}
    elapsed = time.perf_counter() - t0
    # a placement misses when the 2-D Gaussian offset leaves a disc of radius delta = 2 sigma
    p_eff = sc.p_drop + (1 - sc.p_drop) * math.exp(-(sc.delta / sc.displacement_sigma) ** 2 / 2)
    model = (1 - p_eff ** 5) ** 2
    ok = (rates["closed"] - rates["open"] >= 0.15 and rates["open"] > rates["single"]
          and abs(rates["closed"] - model) <= 0.03 and elapsed < 120)
    detail = (f"closed {rates['closed']:.4f} open {rates['open']:.4f} single {rates['single']:.4f} "
              f"model {model:.4f}, {elapsed:.1f} s")
    assert verdict(5, ok, detail)


# -- 6 --------------------------------------------------------------------------------------

def test_criterion_6_fusion_properties():
    rng = np.random.default_rng(6)
    perm_ok = idem_ok = nor_ok = True
    for _ in range(500):
        n = rng.integers(1, 6)
        dets = [Detection("obj", tuple(b), float(c), f"s{rng.integers(0, 3)}")
                for b, c in zip(np.c_[rng.uniform(0, 60, (n, 2)), rng.uniform(62, 100, (n, 2))],
                                rng.uniform(0.05, 1.0, n))]
        per = {}
        for d in dets:
            per.setdefault(d.source, []).append(d)
        base = fuse_detections(per, ["obj"])
        order = rng.permutation(list(per))
        shuffled = {k: [per[k][i] for i in rng.permutation(len(per[k]))] for k in order}
        perm_ok &= fuse_detections(shuffled, ["obj"]) == base
        idem_ok &= fuse_detections({"a": [dets[0]]}, ["obj"]) == [dets[0]]
        confs = rng.uniform(0.01, 0.99, n)
        agree = [Detection("o", (0, 0, 10, 10), float(c), f"s{i}") for i, c in enumerate(confs)]
        nor_ok &= math.isclose(merge_group(agree).confidence, 1 - np.prod(1 - confs), abs_tol=1e-12)

    sc = load_scenario("stack_blocks")
    fused_iou, src_iou, below = [], {"a": [], "b": []}, 0
    for s in range(500):
        sim, obs = reset(sc, s)
        labels = [o.label for o in sim.scenario.objects]
        per = {k: oracle_detect(obs, labels, sc.detection, k, seed=s) for k in ("a", "b")}
        for d in fuse_detections(per, labels, required=[]):
            gt = mask_bbox(obs.masks[obs.id_for_label(d.label)])
            own = {k: [iou(x.bbox, gt) for x in v if x.label == d.label] for k, v in per.items()}
            if all(own.values()):
                fused_iou.append(iou(d.bbox, gt))
                for k in own:
                    src_iou[k].append(own[k][0])
                below += fused_iou[-1] < min(own["a"][0], own["b"][0]) - 1e-12
    means = {k: float(np.mean(v)) for k, v in src_iou.items()}
    dominance = all(np.mean(fused_iou) >= m for m in means.values()) and below == 0
    detail = (f"permutation {perm_ok}, idempotent {idem_ok}, noisy-or {nor_ok}, mean IoU fused "
              f"{np.mean(fused_iou):.3f} vs {means['a']:.3f}/{means['b']:.3f} over {len(fused_iou)} boxes")
    assert verdict(6, perm_ok and idem_ok and nor_ok and dominance, detail)


# -- 7 --------------------------------------------------------------------------------------

def test_criterion_7_record_and_replay(tmp_path, monkeypatch):
    sc = load_scenario("stack_blocks")
    cassette = tmp_path / "run.jsonl"
    with mock_completions_server() as server:
        http = HttpBackend(BackendConfig(kind="http", endpoint_url=server.url))

        def recorder(env):
            server.bind(env)
            return RecordBackend(http, cassette)

        rec_reports, rec_events = run_batch(sc, 5, 0, backend_factory=recorder)
        hits = server.hits

        import httpx

        def no_network(*a, **k):
            raise AssertionError("replay touched the network")

        monkeypatch.setattr(httpx.Client, "send", no_network)
        rep_reports, rep_events = run_batch(sc, 5, 0, backend_cfg=BackendConfig(kind="replay",
                                                                               cassette_path=str(cassette)))
        replay_calls = server.hits - hits
    same_reports = [r.to_dict() for r in rec_reports] == [r.to_dict() for r in rep_reports]
    same_traces = [e.without_time() for e in rec_events] == [e.without_time() for e in rep_events]
    ok = hits > 0 and replay_calls == 0 and same_reports and same_traces and not any(r.aborted for r in rep_reports)
    assert verdict(7, ok, f"recorded {hits} calls, replay calls {replay_calls}, "
                          f"reports equal {same_reports}, traces equal {same_traces}")


# -- 8 --------------------------------------------------------------------------------------

def test_criterion_8_end_to_end_fixture():
    sc = load_scenario("stack_distractor").with_failures(p_drop=0.0, sigma=0.0)
    assert sc.detection == DetectionNoise()
    fixture = package_asset("fixtures", "stack_distractor", ".json")
    (report,), _ = run_batch(sc, 1, 0, backend_cfg=BackendConfig(kind="scripted", fixture_path=str(fixture)))
    assert verdict(8, report.task_outcome == "success" and report.goal_met is True,
                   f"outcome {report.task_outcome}, check_goal {report.goal_met}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
