"""Command-line entry points: run episodes, summarize traces, sweep ablations, record fixtures.

Exit codes: 0 when every episode ran to completion (task failures are data),
2 for invalid configuration or scenario input, 3 when a backend aborted a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import yaml

from .backends import BACKEND_KINDS, BackendConfig, BackendFactory, FixtureRecorder
from .errors import ConfigError, InvalidInputError
from .orchestrator import RecoveryConfig, run_batch, run_episode, success_rate
from .sim import builtin_scenarios, load_scenario
from .trace import summarize, summarize_events, write_trace

log = logging.getLogger("closedloop")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
CONFIG_KEYS = {"recovery", "backend", "episodes", "seed", "detectors", "workers"}


def package_asset(kind: str, scenario_name: str, suffix: str) -> Path:
    return Path(str(resources.files("closedloop").joinpath(f"{kind}/{scenario_name}{suffix}")))


def load_config(path) -> dict:
    """YAML (or JSON) run configuration; unknown keys are rejected."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    extra = set(doc) - CONFIG_KEYS
    if extra:
        raise ConfigError(f"{p}: unknown key(s) {sorted(extra)}")
    return doc


def _positive(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return value


def resolve_run(args) -> tuple:
    """Merge config file and flags into (scenario, recovery, backend config, episodes, seed, ...)."""
    conf = load_config(args.config)
    scenario = load_scenario(args.scenario)
    if args.p_drop is not None:
        scenario = scenario.with_failures(p_drop=args.p_drop)

    rec = dict(conf.get("recovery") or {})
    if args.no_reflector:
        rec["reflector_enabled"] = False
    if args.single_agent:
        rec["single_agent_mode"] = True
        rec["reflector_enabled"] = False
    recovery = RecoveryConfig.from_dict(rec)

    bk = dict(conf.get("backend") or {})
    if args.backend:
        bk["kind"] = args.backend
    if args.inner:
        bk["inner"] = args.inner
    bk.setdefault("kind", "oracle")
    if args.cassette:
        bk["cassette_path"] = args.cassette
    if args.fixture:
        bk["fixture_path"] = args.fixture
    if bk["kind"] == "replay" and not bk.get("cassette_path"):
        bk["cassette_path"] = str(package_asset("cassettes", scenario.name, ".jsonl"))
    if bk["kind"] == "record" and not bk.get("cassette_path"):
        bk["cassette_path"] = str(Path("cassettes") / f"{scenario.name}.jsonl")
    if bk["kind"] == "scripted" and not bk.get("fixture_path"):
        bk["fixture_path"] = str(package_asset("fixtures", scenario.name, ".json"))
    backend = BackendConfig.from_dict(bk)
    for key in ("cassette_path", "fixture_path"):
        needed = {"cassette_path": ("replay",), "fixture_path": ("scripted",)}[key]
        if backend.kind in needed and not Path(getattr(backend, key)).is_file():
            raise ConfigError(f"{backend.kind} backend: {getattr(backend, key)} does not exist")

    episodes = _positive("episodes", args.episodes if args.episodes is not None else conf.get("episodes", 1))
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    detectors = _positive("detectors", conf.get("detectors", 2))
    workers = _positive("workers", args.workers if args.workers is not None else conf.get("workers", 1))
    return scenario, recovery, backend, episodes, seed, detectors, workers


def _default_trace_path(scenario, recovery) -> Path:
    return Path("traces") / f"{scenario.name}_{recovery.mode}_p{scenario.p_drop:.2f}.jsonl"


def cmd_run(args) -> int:
    scenario, recovery, backend, episodes, seed, detectors, workers = resolve_run(args)
    if backend.kind == "record":
        Path(backend.cassette_path).unlink(missing_ok=True)  # a cassette holds exactly one run
    reports, events = run_batch(scenario, episodes, seed, recovery, backend_cfg=backend,
                                detector_count=detectors, trace=True, workers=workers)
    out = Path(args.trace_out) if args.trace_out else _default_trace_path(scenario, recovery)
    write_trace(out, events)
    aborted = [r for r in reports if r.aborted]
    print(f"{scenario.name} [{recovery.mode}] episodes={len(reports)}/{episodes} "
          f"success={100 * success_rate(reports):.1f}% trace={out}")
    if args.report_out:
        Path(args.report_out).write_text(json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    if aborted:
        r = aborted[0]
        print(f"error: episode {r.episode} aborted by the backend ({r.aborted}): "
              f"{(r.failure_report or {}).get('last_explanation', '')}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_summarize(args) -> int:
    summary = summarize(args.traces)
    print(summary.format_table(), end="")
    if args.out:
        paths = summary.write(args.out, args.stem, figures=not args.no_figures)
        for kind, p in sorted(paths.items()):
            print(f"{kind}: {p}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    """The three arms (closed loop, open loop, single agent) on one scenario family."""
    scenario = load_scenario(args.scenario)
    if args.p_drop is not None:
        scenario = scenario.with_failures(p_drop=args.p_drop)
    episodes = _positive("episodes", args.episodes)
    arms = [RecoveryConfig(), RecoveryConfig(reflector_enabled=False),
            RecoveryConfig(reflector_enabled=False, single_agent_mode=True)]
    outdir = Path(args.out)
    events = []
    for cfg in arms:
        _, ev = run_batch(scenario, episodes, args.seed, cfg, trace=True, workers=args.workers)
        write_trace(outdir / f"{scenario.name}_{cfg.mode}.jsonl", ev)
        events.extend(ev)
    summary = summarize_events(events)
    print(summary.format_table(), end="")
    for kind, p in sorted(summary.write(outdir, "summary", figures=not args.no_figures).items()):
        print(f"{kind}: {p}")
    return EXIT_OK


def cmd_record_fixture(args) -> int:
    """Capture the oracle's answers for one episode as a scripted fixture."""
    from .oracle import OracleBackend

    scenario = load_scenario(args.scenario)
    recorders = []

    def factory(env):
        recorders.append(FixtureRecorder(OracleBackend(env)))
        return recorders[-1]

    report = run_episode(scenario, args.episode, args.seed, RecoveryConfig(), factory)
    out = Path(args.out) if args.out else Path("fixtures") / f"{scenario.name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    recorders[0].save(out)
    print(f"{scenario.name}: {len(recorders[0].responses)} responses, "
          f"task_outcome={report.task_outcome} -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="closedloop", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run seeded episodes of a scenario and write a trace")
    run.add_argument("--scenario", required=True,
                     help=f"built-in name ({', '.join(builtin_scenarios())}) or a YAML path")
    run.add_argument("--config", help="YAML file with recovery/backend sections")
    run.add_argument("--backend", choices=BACKEND_KINDS)
    run.add_argument("--inner", choices=("http", "oracle"), help="backend wrapped by --backend record")
    run.add_argument("--episodes", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--no-reflector", action="store_true", help="open loop: no verification or recovery")
    run.add_argument("--single-agent", action="store_true", help="one model call plans every action")
    run.add_argument("--trace-out", help="trace path (default traces/<scenario>_<mode>_p<p>.jsonl)")
    run.add_argument("--report-out", help="also write the RunReports as JSON")
    run.add_argument("--p-drop", type=float, help="override the scenario's drop probability")
    run.add_argument("--cassette", help="cassette for replay/record")
    run.add_argument("--fixture", help="fixture for the scripted backend")
    run.add_argument("--workers", type=int, help="parallel episode workers (oracle backend only)")
    run.set_defaults(func=cmd_run)

    sm = sub.add_parser("summarize", help="tabulate one or more trace files")
    sm.add_argument("traces", nargs="*", help="trace files (line-delimited JSON)")
    sm.add_argument("--out", help="directory for txt/json/csv/png outputs")
    sm.add_argument("--stem", default="summary")
    sm.add_argument("--no-figures", action="store_true")
    sm.set_defaults(func=cmd_summarize)

    ab = sub.add_parser("ablate", help="closed loop vs open loop vs single agent on one scenario")
    ab.add_argument("--scenario", default="stack_blocks")
    ab.add_argument("--episodes", type=int, default=200)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--p-drop", type=float)
    ab.add_argument("--workers", type=int, default=1)
    ab.add_argument("--out", default="ablation")
    ab.add_argument("--no-figures", action="store_true")
    ab.set_defaults(func=cmd_ablate)

    rf = sub.add_parser("record-fixture", help="capture oracle answers as a scripted fixture")
    rf.add_argument("--scenario", required=True)
    rf.add_argument("--episode", type=int, default=0)
    rf.add_argument("--seed", type=int, default=0)
    rf.add_argument("--out")
    rf.set_defaults(func=cmd_record_fixture)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
