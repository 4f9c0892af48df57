"""Line-delimited run traces and the summary tables built from them."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EVENT_KINDS = ("model", "tool", "ladder", "episode")
RUNGS = ("retry_subtask", "reactivate", "rescan_scene", "terminate_failure")
_REQUIRED = ("run_id", "episode", "step_index", "stage", "kind", "payload")


@dataclass
class TraceEvent:
    run_id: str
    episode: int
    step_index: int
    stage: str
    kind: str
    subtask_id: str | None = None
    payload: dict = field(default_factory=dict)
    wall_time: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> TraceEvent:
        missing = [k for k in _REQUIRED if k not in d]
        if missing:
            raise ValueError(f"trace event lacks {missing}")
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported trace schema version {d['schema_version']}")
        if d["kind"] not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {d['kind']!r}")
        return cls(d["run_id"], int(d["episode"]), int(d["step_index"]), d["stage"], d["kind"],
                   d.get("subtask_id"), d["payload"], float(d.get("wall_time", 0.0)))

    def without_time(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


class Tracer:
    """Collects the events of one episode; a tracer without a sink records nothing."""

    def __init__(self, run_id: str = "", episode: int = 0, sink: list | None = None, clock=time.time):
        self.run_id = run_id
        self.episode = episode
        self.sink = sink
        self.clock = clock
        self.step_index = 0

    @property
    def enabled(self) -> bool:
        return self.sink is not None

    def emit(self, stage: str, kind: str, subtask_id: str | None = None, payload: dict | None = None) -> None:
        if self.sink is None:
            return
        self.sink.append(TraceEvent(self.run_id, self.episode, self.step_index, stage, kind,
                                    subtask_id, payload or {}, self.clock()))
        self.step_index += 1


def make_run_id(**parts) -> str:
    text = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def merge_shards(shards) -> list[TraceEvent]:
    """Interleave per-episode shards deterministically by (episode, step_index)."""
    events = [e for shard in shards for e in shard]
    return sorted(events, key=lambda e: (e.run_id, e.episode, e.step_index))


def write_trace(path, events, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w") as fh:
        for e in events:
            fh.write(e.to_json() + "\n")


def read_trace(paths) -> tuple[list[TraceEvent], list[str]]:
    """Parse trace files; corrupt lines are skipped and reported as warnings."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    events, warnings = [], []
    for p in paths:
        p = Path(p)
        try:
            lines = p.read_text().splitlines()
        except OSError as exc:
            warnings.append(f"{p}: unreadable ({exc})")
            continue
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                events.append(TraceEvent.from_dict(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                warnings.append(f"{p}:{n}: skipped corrupt line ({exc})")
    for w in warnings:
        log.warning(w)
    return events, warnings


def check_monotonic(events) -> bool:
    """(run_id, episode, step_index) unique and increasing within each episode."""
    last: dict[tuple, int] = {}
    for e in events:
        key = (e.run_id, e.episode)
        if e.step_index <= last.get(key, -1):
            return False
        last[key] = e.step_index
    return True


# -- summary --------------------------------------------------------------------------

@dataclass
class SummaryRow:
    scenario: str
    mode: str
    p_drop: float
    episodes: int = 0
    successes: int = 0
    attempts: int = 0
    subtasks: int = 0
    recovery: Counter = field(default_factory=Counter)

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    @property
    def mean_attempts(self) -> float:
        return self.attempts / self.subtasks if self.subtasks else 0.0

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "mode": self.mode, "p_drop": self.p_drop,
                "episodes": self.episodes, "success_rate": round(self.success_rate, 6),
                "mean_attempts": round(self.mean_attempts, 6),
                "recovery": {r: self.recovery.get(r, 0) for r in RUNGS}}


@dataclass
class Summary:
    rows: list[SummaryRow]
    warnings: list[str]

    COLUMNS = ("scenario", "mode", "p_drop", "episodes", "success_%", "attempts/subtask",
               "retry", "reactivate", "rescan", "terminate")

    def table_rows(self) -> list[list[str]]:
        return [[r.scenario, r.mode, f"{r.p_drop:.2f}", str(r.episodes), f"{100 * r.success_rate:.1f}",
                 f"{r.mean_attempts:.2f}", *(str(r.recovery.get(k, 0)) for k in RUNGS)]
                for r in self.rows]

    def format_table(self) -> str:
        body = self.table_rows()
        widths = [max([len(c)] + [len(row[i]) for row in body]) for i, c in enumerate(self.COLUMNS)]
        numeric = [False, False] + [True] * (len(self.COLUMNS) - 2)

        def line(cells):
            return "  ".join(c.rjust(w) if num else c.ljust(w)
                             for c, w, num in zip(cells, widths, numeric)).rstrip()

        out = [line(self.COLUMNS), line(["-" * w for w in widths])]
        out += [line(row) for row in body]
        if not body:
            out.append("(no episodes)")
        out.append(f"warnings: {len(self.warnings)}")
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "rows": [r.to_dict() for r in self.rows],
                "warnings": list(self.warnings)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "mode", "p_drop", "episodes", "success_rate", "mean_attempts", *RUNGS])
        for r in self.rows:
            w.writerow([r.scenario, r.mode, r.p_drop, r.episodes, f"{r.success_rate:.6f}",
                        f"{r.mean_attempts:.6f}", *(r.recovery.get(k, 0) for k in RUNGS)])
        return buf.getvalue()

    def write(self, outdir, stem: str = "summary", figures: bool = True) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {"txt": outdir / f"{stem}.txt", "json": outdir / f"{stem}.json", "csv": outdir / f"{stem}.csv"}
        paths["txt"].write_text(self.format_table())
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        paths["csv"].write_text(self.to_csv())
        if figures and self.rows:
            from .plotting import plot_summary
            paths.update(plot_summary(self, outdir, stem))
        return paths


def summarize_events(events, warnings=()) -> Summary:
    rows: dict[tuple, SummaryRow] = {}
    for e in events:
        if e.kind != "episode" or e.stage != "episode_end":
            continue
        p = e.payload
        report = p.get("report", {})
        key = (p.get("scenario", report.get("scenario", "?")), p.get("mode", report.get("mode", "?")),
               float(p.get("p_drop", 0.0)))
        row = rows.setdefault(key, SummaryRow(*key))
        row.episodes += 1
        row.successes += report.get("task_outcome") == "success"
        for rec in report.get("subtasks", []):
            if rec.get("outcome") != "skipped":
                row.attempts += rec.get("attempts", 0)
                row.subtasks += 1
        for actions in report.get("ladder", {}).values():
            for a in actions:
                row.recovery[a.split("(")[0]] += 1
    warnings = list(warnings)
    if not rows:
        warnings.append("no completed episodes in the trace set")
    return Summary([rows[k] for k in sorted(rows)], warnings)


def summarize(paths) -> Summary:
    events, warnings = read_trace(paths)
    return summarize_events(events, warnings)


__all__ = [
    "SCHEMA_VERSION", "TraceEvent", "Tracer", "make_run_id", "merge_shards", "write_trace", "read_trace",
    "check_monotonic", "Summary", "SummaryRow", "summarize", "summarize_events",
]
