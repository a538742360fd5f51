"""Event-sourced run state.

The run directory's ``events.jsonl`` is the only source of truth. Live runs
and resumed runs build their in-memory state the same way: by applying each
event in order with ``apply_event``.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorruptManifest
from .memory import MemoryPackage

EVENT_VERSION = 1

PENDING = "Pending"
KEYFRAME_READY = "KeyframeReady"
CLIP_READY = "ClipReady"
VERIFIED = "Verified"
EXHAUSTED = "Exhausted"
STATES = (PENDING, KEYFRAME_READY, CLIP_READY, VERIFIED, EXHAUSTED)

# forward edges plus the failed-verdict back-edges; any state may go to Exhausted
TRANSITIONS = {
    PENDING: {KEYFRAME_READY},
    KEYFRAME_READY: {CLIP_READY, PENDING},
    CLIP_READY: {VERIFIED, KEYFRAME_READY},
    VERIFIED: set(),
    EXHAUSTED: set(),
}

STAGES = ("keyframe", "clip")


def derive_seed(seed: int, *parts) -> int:
    blob = json.dumps([seed, *parts], default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big") & 0x7FFFFFFF


@dataclass
class ShotJob:
    shot_id: str
    package: MemoryPackage
    state: str = PENDING
    attempts: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    keyframes: dict = field(default_factory=dict)  # attempt -> {path, batch_id, row, col}
    clips: dict = field(default_factory=dict)  # attempt -> clip handle dict
    audits: dict = field(default_factory=lambda: {s: {} for s in STAGES})
    selected: dict = field(default_factory=dict)  # stage -> attempt
    exhausted_stage: str | None = None
    feedback_count: int = 0
    failed_verdicts: int = 0
    clip_identity_failures: int = 0
    salvage: bool = False

    def pending(self, stage: str):
        """Attempt generated but not yet audited, or None."""
        k = self.attempts[stage]
        if k and k not in self.audits[stage]:
            return k
        return None

    @property
    def keyframe_attempt(self) -> int | None:
        if "keyframe" in self.selected:
            return self.selected["keyframe"]
        return max(self.keyframes) if self.keyframes else None

    @property
    def keyframe_path(self) -> str | None:
        k = self.keyframe_attempt
        return self.keyframes[k]["path"] if k else None

    @property
    def clip_attempt(self) -> int | None:
        if "clip" in self.selected:
            return self.selected["clip"]
        return max(self.clips) if self.clips else None

    def scores(self, stage: str) -> dict[int, float]:
        return {a: r["score"] for a, r in self.audits[stage].items()}

    def summary(self) -> dict:
        return {
            "shot_id": self.shot_id,
            "state": self.state,
            "attempts": dict(self.attempts),
            "selected": dict(self.selected),
            "exhausted_stage": self.exhausted_stage,
            "salvage": self.salvage,
            "generation_feedback": len(self.package.generation_feedback),
            "scores": {s: {str(a): v for a, v in sorted(self.scores(s).items())} for s in STAGES},
        }


@dataclass
class RunState:
    run_id: str = ""
    seed: int = 0
    screenplay_path: str | None = None
    registry_index: str | None = None
    batches: list | None = None
    jobs: dict = field(default_factory=dict)
    stages_done: list = field(default_factory=list)
    edl: str | None = None
    completed: bool = False
    findings: list = field(default_factory=list)

    def ordered_jobs(self, shot_ids) -> list[ShotJob]:
        return [self.jobs[s] for s in shot_ids if s in self.jobs]


def _job(state: RunState, ev: dict) -> ShotJob:
    try:
        return state.jobs[ev["shot_id"]]
    except KeyError:
        raise CorruptManifest(f"event for unknown shot {ev.get('shot_id')!r}") from None


def apply_event(state: RunState, ev: dict) -> None:
    t = ev.get("type")
    if t == "run_started":
        state.run_id = ev["run_id"]
        state.seed = ev.get("seed", 0)
    elif t == "screenplay_ready":
        state.screenplay_path = ev["path"]
    elif t == "references_ready":
        state.registry_index = ev["index"]
    elif t == "package_allocated":
        state.jobs[ev["shot_id"]] = ShotJob(ev["shot_id"], MemoryPackage.from_dict(ev["package"]))
    elif t == "batch_planned":
        state.batches = ev["batches"]
    elif t == "keyframe":
        job = _job(state, ev)
        a = ev["attempt"]
        job.attempts["keyframe"] = max(job.attempts["keyframe"], a)
        job.keyframes[a] = {k: ev[k] for k in ("path", "batch_id", "row", "col")}
    elif t == "clip":
        job = _job(state, ev)
        a = ev["attempt"]
        job.attempts["clip"] = max(job.attempts["clip"], a)
        job.clips[a] = ev["clip"]
        job.salvage = job.salvage or bool(ev.get("salvage"))
    elif t == "audit":
        job = _job(state, ev)
        job.audits[ev["stage"]][ev["attempt"]] = {
            "verdicts": ev["verdicts"],
            "pass": ev["pass"],
            "score": sum(v["score"] for v in ev["verdicts"]),
        }
        job.failed_verdicts += sum(1 for v in ev["verdicts"] if not v["pass"])
    elif t == "feedback":
        job = _job(state, ev)
        job.feedback_count += 1
        if ev["stage"] == "clip" and ev["feedback"]["dimension"] == "identity":
            job.clip_identity_failures += 1
    elif t == "refine":
        _job(state, ev).package = MemoryPackage.from_dict(ev["package"])
    elif t == "state":
        job = _job(state, ev)
        to = ev["to"]
        if to not in STATES:
            raise CorruptManifest(f"unknown state {to!r}")
        if to != EXHAUSTED and to not in TRANSITIONS[job.state]:
            raise CorruptManifest(f"illegal transition {job.state} -> {to} for {job.shot_id}")
        job.state = to
    elif t == "select":
        _job(state, ev).selected[ev["stage"]] = ev["attempt"]
    elif t == "exhausted":
        _job(state, ev).exhausted_stage = ev["stage"]
    elif t == "stage_completed":
        state.stages_done.append(ev["stage"])
    elif t == "stitched":
        state.edl = ev["edl"]
    elif t == "run_completed":
        state.completed = True
    elif t == "finding":
        state.findings.append({k: v for k, v in ev.items() if k not in ("type", "v", "ts")})
    elif t in ("generation_request", "reference_request"):
        pass
    else:
        raise CorruptManifest(f"unknown event type {t!r}")


def read_events(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise CorruptManifest(f"no event log at {path}")
    raw = path.read_bytes()
    if raw and not raw.endswith(b"\n"):
        raise CorruptManifest("event log is truncated (last line incomplete)")
    events = []
    for n, line in enumerate(raw.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            ev = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptManifest(f"event log line {n} is not JSON: {exc}") from None
        if not isinstance(ev, dict) or "type" not in ev:
            raise CorruptManifest(f"event log line {n} has no type")
        events.append(ev)
    return events


def replay(events) -> RunState:
    state = RunState()
    for ev in events:
        try:
            apply_event(state, ev)
        except KeyError as exc:
            raise CorruptManifest(f"event {ev.get('type')} lacks field {exc}") from None
    return state


def normalize(events) -> list[dict]:
    """Drop wall-clock fields for run-to-run comparison."""
    return [{k: v for k, v in ev.items() if k != "ts"} for ev in events]


class EventLog:
    """Append-only JSON-lines writer; the single writer for a run."""

    def __init__(self, path, state: RunState):
        self.path = Path(path)
        self.state = state
        self._lock = threading.Lock()

    def make(self, type_: str, **fields) -> dict:
        return {"type": type_, "v": EVENT_VERSION, "ts": round(time.time(), 3), **fields}

    def commit(self, events: list[dict]) -> None:
        """Apply and persist a batch atomically with respect to other writers."""
        if not events:
            return
        lines = "".join(json.dumps(ev, sort_keys=True) + "\n" for ev in events)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(lines)
                fh.flush()

    def emit(self, type_: str, **fields) -> dict:
        ev = self.make(type_, **fields)
        apply_event(self.state, ev)
        self.commit([ev])
        return ev


class ShotBuffer:
    """Per-shot event buffer: events apply to the shot's job immediately and
    reach the log when the shot's work is committed."""

    def __init__(self, log: EventLog):
        self.log = log
        self.events: list[dict] = []

    def emit(self, type_: str, **fields) -> dict:
        ev = self.log.make(type_, **fields)
        apply_event(self.log.state, ev)
        self.events.append(ev)
        return ev

    def flush(self) -> None:
        self.log.commit(self.events)
        self.events = []
