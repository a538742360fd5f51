"""End-to-end remake: understanding, references, allocation, grid keyframes,
clips, verification and stitching, persisted as an event log."""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backends.base import (
    MAX_CLIP_SECONDS,
    MIN_CLIP_SECONDS,
    ClipHandle,
    ImageGenRequest,
    VideoGenRequest,
)
from .config import RunConfig
from .errors import (
    ConfigError,
    DimensionMismatch,
    IncompleteRun,
    NonconformingOutput,
    PreconditionViolation,
    ReshootError,
    RunInterrupted,
    UnderstandingFailed,
)
from .grid import TEXT_CLAUSE, GridBatch, GridSpec, compose_grid_prompt, plan_batches, split_grid
from .images import decode_png, read_sidecar, write_image, write_sidecar
from .manifest import (
    CLIP_READY,
    EXHAUSTED,
    KEYFRAME_READY,
    PENDING,
    VERIFIED,
    EventLog,
    RunState,
    ShotBuffer,
    ShotJob,
    derive_seed,
    read_events,
    replay,
)
from .memory import (
    REF_DIR,
    MemoryPackage,
    ReferenceRegistry,
    allocate,
    allocate_global,
    char_stem,
    clothing_label_matches,
    order_references,
    wardrobe_to_prompt,
)
from .screenplay import (
    CHARACTER_TOKEN_RE,
    Screenplay,
    load_screenplay,
    parse_screenplay,
    serialize_screenplay,
    validate_screenplay,
)
from .verifier import (
    AuditResult,
    audit_clip,
    audit_keyframe,
    best_attempt,
    clip_fallback_after,
    refine,
    verification_loop,
)

log = logging.getLogger(__name__)

RUN_FILE = "run.json"
EVENTS_FILE = "events.jsonl"
SCREENPLAY_FILE = "screenplay.json"
EDL_FILE = "edl.json"
REPORT_FILE = "report.json"


@dataclass(frozen=True)
class CastEntry:
    target_name: str
    portraits: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "portraits", tuple(str(p) for p in self.portraits))


@dataclass(frozen=True)
class SourceSpec:
    screenplay_path: str = ""
    video_path: str = ""
    character_mapping: dict = field(default_factory=dict)  # character_id -> CastEntry
    style: str = ""
    copy_mode: bool = False

    def __post_init__(self):
        if not (self.screenplay_path or self.video_path):
            raise ConfigError("source needs a screenplay path or a video path")
        mapping = {}
        for cid, entry in self.character_mapping.items():
            if isinstance(entry, dict):
                entry = CastEntry(entry.get("target_name", cid), tuple(entry.get("portraits", ())))
            mapping[cid] = entry
        object.__setattr__(self, "character_mapping", mapping)

    def to_dict(self) -> dict:
        return {
            "screenplay_path": self.screenplay_path,
            "video_path": self.video_path,
            "character_mapping": {
                cid: {"target_name": e.target_name, "portraits": list(e.portraits)}
                for cid, e in sorted(self.character_mapping.items())
            },
            "style": self.style,
            "copy_mode": self.copy_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SourceSpec:
        return cls(
            screenplay_path=d.get("screenplay_path", ""),
            video_path=d.get("video_path", ""),
            character_mapping=d.get("character_mapping", {}),
            style=d.get("style", ""),
            copy_mode=bool(d.get("copy_mode", False)),
        )


def load_mapping(path) -> dict:
    """Mapping file: ``{character_id: {target_name, portraits: [paths]}}``;
    relative portrait paths resolve against the file's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read mapping {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("mapping must be a JSON object")
    out = {}
    for cid, entry in raw.items():
        if not isinstance(entry, dict) or "portraits" not in entry:
            raise ConfigError(f"mapping/{cid}: needs target_name and portraits")
        ports = [str((path.parent / p).resolve()) if not Path(p).is_absolute() else p
                 for p in entry["portraits"]]
        out[cid] = CastEntry(entry.get("target_name", cid), tuple(ports))
    return out


# ---------------------------------------------------------------------------
# prompts for reference images


def environment_prompt(sp: Screenplay, scene_id: str, style: str) -> str:
    scene = sp.scene(scene_id)
    desc = CHARACTER_TOKEN_RE.sub("", " ".join(scene.environment_description.split()))
    lines = [
        f"REFERENCE: [kind=environment; scene={scene_id}; characters=]",
        f"STYLE: {style}",
        f"ENVIRONMENT: {desc}",
    ]
    extra = [x for x in (scene.lighting_style, scene.color_palette) if x]
    if extra:
        lines.append("LOOK: " + "; ".join(extra))
    lines.append(f"LAYOUT: single frame at {sp.metadata.aspect_ratio_label} aspect ratio")
    lines.append(f"CONSTRAINTS: empty set, no people, no characters; {TEXT_CLAUSE}")
    return "\n".join(lines)


def clothing_prompt(character_id: str, scene_id: str, target_name: str, dna, style: str) -> str:
    return "\n".join([
        f"REFERENCE: [kind=clothing; scene={scene_id}; characters={character_id}]",
        f"STYLE: {style}",
        f"SUBJECT: {target_name}, full-body outfit reference; face and hair from the portrait",
        f"WARDROBE: {wardrobe_to_prompt(dna)}",
        f"CONSTRAINTS: plain backdrop; {TEXT_CLAUSE}",
    ])


def wardrobe_for(sp: Screenplay, character_id: str, scene_id: str):
    profile = sp.character(character_id)
    if profile is None:
        return None
    for v in profile.clothing_variations:
        if clothing_label_matches(sp, v.scene, scene_id) and "wardrobe_dna" in v.extras:
            return v.extras["wardrobe_dna"]
    return None


def clamp_duration(seconds: float) -> tuple[float, bool]:
    clamped = min(MAX_CLIP_SECONDS, max(MIN_CLIP_SECONDS, float(seconds)))
    return clamped, clamped != seconds


# ---------------------------------------------------------------------------
# the run


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


class Run:
    def __init__(self, run_dir, config: RunConfig, source: SourceSpec, backends,
                 state: RunState | None = None):
        self.dir = Path(run_dir)
        self.config = config
        self.source = source
        self.backends = backends
        self.state = state or RunState()
        self.log = EventLog(self.dir / EVENTS_FILE, self.state)
        self.sp: Screenplay | None = None
        self.registry: ReferenceRegistry | None = None
        self.style = source.style or config.style

    # -- helpers

    def abs(self, rel: str) -> str:
        return str(self.dir / rel)

    def rel(self, path) -> str:
        return Path(path).resolve().relative_to(self.dir.resolve()).as_posix()

    def _finding(self, sink, severity: str, code: str, message: str, **extra) -> None:
        log.log(logging.WARNING if severity == "warning" else logging.INFO, message)
        sink.emit("finding", severity=severity, code=code, message=message, **extra)

    def _map(self, fn, items):
        """Run ``fn`` over items with bounded parallelism; results come back in
        input order so per-item buffers can be committed deterministically."""
        if self.config.parallelism == 1 or len(items) <= 1:
            for item in items:
                yield fn(item)
            return
        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            yield from pool.map(fn, items)

    def _stop(self, stage: str, stop_after: str | None) -> None:
        if stop_after == stage:
            raise RunInterrupted(f"stopped after {stage} stage")

    # -- stages

    def execute(self, stop_after: str | None = None) -> RunState:
        self.dir.mkdir(parents=True, exist_ok=True)
        if not self.state.run_id:
            self._start()
        self._understand()
        self._stop("understanding", stop_after)
        self._references()
        self._stop("references", stop_after)
        self._allocate()
        self._stop("allocation", stop_after)
        if "keyframe" not in self.state.stages_done:
            self._keyframes()
            self.log.emit("stage_completed", stage="keyframe")
        self._stop("keyframe", stop_after)
        if "clip" not in self.state.stages_done:
            self._clips()
            self.log.emit("stage_completed", stage="clip")
        self._stop("clip", stop_after)
        if self.state.edl is None:
            self._stitch()
        if not self.state.completed:
            self._write_report()
            self.log.emit("run_completed")
        return self.state

    def _start(self) -> None:
        if (self.dir / EVENTS_FILE).exists() and (self.dir / EVENTS_FILE).stat().st_size:
            raise ConfigError(f"{self.dir} already holds a run; use resume")
        snapshot = self.config.to_dict()
        identity = {k: v for k, v in snapshot.items() if k not in ("output_dir", "registry_dir")}
        run_id = "run-" + _sha(json.dumps([identity, self.style], sort_keys=True))[:12]
        (self.dir / RUN_FILE).write_text(json.dumps(
            {"v": 1, "run_id": run_id, "config": snapshot, "source": self.source.to_dict()},
            indent=2, sort_keys=True) + "\n")
        self.log.emit("run_started", run_id=run_id, seed=self.config.seed)

    def _understand(self) -> None:
        path = self.dir / SCREENPLAY_FILE
        if self.state.screenplay_path:
            self.sp = load_screenplay(self.dir / self.state.screenplay_path)
            return
        if self.source.screenplay_path:
            text = Path(self.source.screenplay_path).read_text(encoding="utf-8")
            sp = parse_screenplay(text)
            report = validate_screenplay(sp)
            if not report.ok:
                first = report.errors[0]
                raise UnderstandingFailed(f"screenplay invalid at {first.path}: {first.code}")
        else:
            sp = None
            last: Exception | None = None
            for _ in range(self.config.understanding_retries + 1):
                try:
                    text = self.backends.understanding.understand(self.source.video_path, "")
                    sp = parse_screenplay(text)
                    break
                except NonconformingOutput as exc:
                    last = exc
            if sp is None:
                raise UnderstandingFailed(f"understanding output stayed nonconforming: {last}")
        unknown = sorted(set(self.source.character_mapping) - {c.character_id for c in sp.characters})
        if unknown:
            raise ConfigError(f"mapping names characters not in the screenplay: {unknown}")
        text = serialize_screenplay(sp)
        path.write_text(text, encoding="utf-8")
        self.sp = sp
        self.log.emit("screenplay_ready", path=SCREENPLAY_FILE, sha256=_sha(text),
                      shot_ids=sp.shot_ids)

    def _references(self) -> None:
        sp = self.sp
        if self.state.registry_index:
            self.registry = ReferenceRegistry.load(sp, self.dir)
            return
        reg = ReferenceRegistry(sp, self.dir, copy_mode=self.source.copy_mode)
        width, height = sp.metadata.width, sp.metadata.height
        buf = ShotBuffer(self.log)

        for cid in sorted(self.source.character_mapping):
            entry = self.source.character_mapping[cid]
            for p in entry.portraits:
                reg.register_portrait(cid, p, entry.target_name)

        premade = Path(self.config.registry_dir) if self.config.registry_dir else None
        for scene in sp.major_scenes:
            sid = scene.scene_id
            candidate = premade / f"{sid}_environment.png" if premade else None
            if candidate is not None and candidate.exists():
                reg.register_environment(sid, candidate)
                continue
            prompt = environment_prompt(sp, sid, self.style)
            out = self.dir / REF_DIR / f"{sid}_environment.png"
            seed = derive_seed(self.config.seed, "environment", sid)
            buf.emit("reference_request", kind="environment", scene_id=sid, prompt=prompt,
                     references=[], seed=seed)
            try:
                data = self.backends.image_gen.generate_image(
                    ImageGenRequest(prompt, (), width, height, seed, str(out)))
                write_image(out, decode_png(data))
                reg.register_environment(sid, out)
            except ReshootError as exc:
                self._finding(buf, "error", "environment reference failed", str(exc), scene_id=sid)

        if not self.source.copy_mode:
            for cid in sorted(self.source.character_mapping):
                profile = sp.character(cid)
                if profile is None or profile.role_classification != "main":
                    continue
                portraits = reg.portraits(cid)
                for scene in sp.major_scenes:
                    dna = wardrobe_for(sp, cid, scene.scene_id)
                    if dna is None:
                        self._finding(buf, "warning", "no wardrobe",
                                      f"{cid} has no wardrobe description for {scene.scene_id}")
                        continue
                    entry = self.source.character_mapping[cid]
                    try:
                        from .memory import WardrobeDNA

                        dna_obj = WardrobeDNA.from_dict(dna)
                        prompt = clothing_prompt(cid, scene.scene_id, entry.target_name, dna_obj,
                                                 self.style)
                        refs = [p.image.path for p in portraits[:1]]
                        name = f"{scene.scene_id}_{char_stem(cid)}_clothing.png"
                        out = self.dir / REF_DIR / name
                        seed = derive_seed(self.config.seed, "clothing", cid, scene.scene_id)
                        buf.emit("reference_request", kind="clothing", scene_id=scene.scene_id,
                                 character_id=cid, prompt=prompt, references=refs, seed=seed)
                        data = self.backends.image_gen.generate_image(ImageGenRequest(
                            prompt, tuple(self.abs(r) for r in refs), width, height, seed,
                            str(out)))
                        write_image(out, decode_png(data))
                        reg.register_clothing(cid, scene.scene_id, dna_obj, out)
                    except ReshootError as exc:
                        self._finding(buf, "error", "clothing reference failed", str(exc),
                                      character_id=cid, scene_id=scene.scene_id)

        index = reg.save()
        buf.emit("references_ready", index=self.rel(index),
                 counts={"environments": len(reg.environments),
                         "portraits": len(reg.all_portraits),
                         "clothing": len(reg.all_clothing)})
        buf.flush()
        self.registry = reg

    def _allocate(self) -> None:
        sp, reg = self.sp, self.registry
        alloc = allocate_global if self.config.global_context else allocate
        buf = ShotBuffer(self.log)
        for shot in sp.shots:
            if shot.shot_id in self.state.jobs:
                continue
            findings: list = []
            pkg = alloc(sp, shot.shot_id, reg, self.style, findings=findings)
            for f in findings:
                self._finding(buf, f["severity"], f["code"], f["message"], shot_id=shot.shot_id)
            buf.emit("package_allocated", shot_id=shot.shot_id, package=pkg.to_dict())
        if self.state.batches is None:
            batches = plan_batches(sp.shots)
            buf.emit("batch_planned", batches=[b.to_dict() for b in batches])
        buf.flush()

    # -- keyframes

    def _batches(self) -> list[GridBatch]:
        out = []
        for b in self.state.batches:
            first = self.sp.shot(b["shot_ids"][0])
            out.append(GridBatch(b["batch_id"], tuple(b["shot_ids"]), b["order"], first.scene_id,
                                 frozenset(first.characters)))
        return out

    def _grid_request(self, batch: GridBatch, packages: dict, attempt: int,
                      buf: ShotBuffer) -> tuple[ImageGenRequest, str]:
        sp = self.sp
        scene = sp.scene(batch.scene_id)
        prompt, refs = compose_grid_prompt(
            batch, packages, environment=scene.environment_description,
            shots={sid: sp.shot(sid) for sid in batch.shot_ids}, attempt=attempt,
            aspect_label=sp.metadata.aspect_ratio_label,
        )
        spec = GridSpec.for_tile(batch.order, sp.metadata.width, sp.metadata.height)
        if batch.order == 1:
            name = f"keyframes/shot_{batch.shot_ids[0]}_attempt{attempt}.png"
        else:
            name = f"keyframes/batch_{batch.batch_id}_attempt{attempt}.png"
        seed = derive_seed(self.config.seed, "keyframe", batch.batch_id, attempt)
        buf.emit(
            "generation_request", stage="keyframe", batch_id=batch.batch_id,
            shot_ids=list(batch.shot_ids), attempt=attempt, prompt=prompt, references=refs,
            semantic={sid: packages[sid].narrative.get("language_prompt", "")
                      for sid in batch.shot_ids},
            seed=seed,
        )
        req = ImageGenRequest(prompt, tuple(self.abs(r) for r in refs), spec.canvas_width,
                              spec.canvas_height, seed, self.abs(name))
        return req, name

    def _render(self, batch: GridBatch, packages: dict, attempt: int, buf: ShotBuffer) -> dict:
        """Generate one canvas, split it, write per-shot tiles; returns shot -> rel path."""
        spec = GridSpec.for_tile(batch.order, self.sp.metadata.width, self.sp.metadata.height)
        req, name = self._grid_request(batch, packages, attempt, buf)
        data = self.backends.image_gen.generate_image(req)
        pixels = decode_png(data)
        tiles = split_grid(pixels, spec, batch, attempt)  # DimensionMismatch on wrong size
        canvas = self.dir / name
        write_image(canvas, pixels)
        tags = read_sidecar(canvas)
        out = {}
        for kf in tiles:
            rel = f"keyframes/shot_{kf.shot_id}_attempt{attempt}.png"
            if batch.order != 1:
                write_image(self.dir / rel, kf.image)
            if tags is not None:
                cells = [dict(c, row=0, col=0) for c in tags.get("cells", [])
                         if c["row"] == kf.provenance.row and c["col"] == kf.provenance.col]
                write_sidecar(self.dir / rel, {"cells": cells})
            out[kf.shot_id] = (rel, kf.provenance)
        return out

    def _keyframes(self) -> None:
        sp = self.sp
        remaining = [b for b in self._batches()
                if any(self.state.jobs[s].attempts["keyframe"] == 0 for s in b.shot_ids)]

        def run_batch(batch: GridBatch) -> ShotBuffer:
            buf = ShotBuffer(self.log)
            packages = {sid: self.state.jobs[sid].package for sid in batch.shot_ids}
            for _ in range(self.config.batch_retries + 1):
                try:
                    rendered = self._render(batch, packages, 1, buf)
                except DimensionMismatch as exc:
                    self._finding(buf, "warning", "canvas size", str(exc), batch_id=batch.batch_id)
                    continue
                for sid in batch.shot_ids:
                    rel, prov = rendered[sid]
                    buf.emit("keyframe", shot_id=sid, attempt=1, path=rel,
                             batch_id=prov.batch_id, row=prov.row, col=prov.col)
                break
            return buf

        for buf in self._map(run_batch, remaining):
            buf.flush()

        jobs = [j for j in self.state.ordered_jobs(sp.shot_ids) if j.state == PENDING]
        for buf in self._map(self._keyframe_job, jobs):
            buf.flush()

    def _keyframe_generate(self, job: ShotJob, buf: ShotBuffer):
        def generate(pkg: MemoryPackage, attempt: int) -> str:
            shot = self.sp.shot(job.shot_id)
            single = GridBatch(f"s{job.shot_id}", (job.shot_id,), 1, shot.scene_id,
                               frozenset(shot.characters))
            rendered = self._render(single, {job.shot_id: pkg}, attempt, buf)
            rel, prov = rendered[job.shot_id]
            buf.emit("keyframe", shot_id=job.shot_id, attempt=attempt, path=rel,
                     batch_id=prov.batch_id, row=prov.row, col=prov.col)
            return self.abs(rel)

        return generate

    def _auditor(self, job: ShotJob, stage: str):
        shot = self.sp.shot(job.shot_id)
        b = self.backends
        th = self.config.thresholds

        def audit(content, pkg: MemoryPackage, attempt: int) -> AuditResult:
            fn = audit_keyframe if stage == "keyframe" else audit_clip
            return fn(content, pkg, shot, b.judge, b.embed, th, resolve=self.abs, attempt=attempt)

        return audit

    def _recorders(self, job: ShotJob, stage: str, buf: ShotBuffer):
        def on_audit(attempt: int, result: AuditResult) -> None:
            buf.emit("audit", shot_id=job.shot_id, stage=stage, attempt=attempt,
                     verdicts=[v.to_dict() for v in result.verdicts],
                     **{"pass": result.overall_pass})
            for f in result.feedback:
                buf.emit("feedback", shot_id=job.shot_id, stage=stage, attempt=attempt,
                         route=f.route, feedback=f.to_dict())

        def on_refine(pkg: MemoryPackage, feedback) -> None:
            buf.emit("refine", shot_id=job.shot_id, stage=stage, package=pkg.to_dict())

        return on_audit, on_refine

    def _keyframe_loop(self, job: ShotJob, buf: ShotBuffer, *, fallback: bool = False) -> bool:
        on_audit, on_refine = self._recorders(job, "keyframe", buf)
        pending = job.pending("keyframe")
        outcome = verification_loop(
            job.package, self.sp,
            generate=self._keyframe_generate(job, buf),
            audit=self._auditor(job, "keyframe"),
            thresholds=self.config.thresholds,
            start_attempt=job.attempts["keyframe"],
            pending=self.abs(job.keyframes[pending]["path"]) if pending else None,
            on_audit=on_audit,
            on_refine=on_refine,
            prior_scores=job.scores("keyframe"),
        )
        if outcome.passed:
            buf.emit("select", shot_id=job.shot_id, stage="keyframe", attempt=outcome.best_attempt)
            buf.emit("state", shot_id=job.shot_id, to=KEYFRAME_READY)
            return True
        buf.emit("select", shot_id=job.shot_id, stage="keyframe", attempt=outcome.best_attempt)
        if fallback:
            self._finding(buf, "warning", "keyframe redo failed",
                          f"shot {job.shot_id}: redone keyframe still fails; keeping best attempt",
                          shot_id=job.shot_id)
            buf.emit("state", shot_id=job.shot_id, to=KEYFRAME_READY)
            return False
        buf.emit("exhausted", shot_id=job.shot_id, stage="keyframe",
                 best_attempt=outcome.best_attempt)
        buf.emit("state", shot_id=job.shot_id, to=EXHAUSTED)
        return False

    def _keyframe_job(self, job: ShotJob) -> ShotBuffer:
        buf = ShotBuffer(self.log)
        self._keyframe_loop(job, buf)
        return buf

    # -- clips

    def _clip_generate(self, job: ShotJob, buf: ShotBuffer, salvage: bool = False):
        duration, clamped = clamp_duration(self.config.clip_duration)
        if clamped:
            self._finding(buf, "warning", "clip duration clamped",
                          f"clip duration {self.config.clip_duration} clamped to {duration}",
                          shot_id=job.shot_id)

        def generate(pkg: MemoryPackage, attempt: int) -> ClipHandle:
            keyframe = job.keyframe_path
            if not keyframe:
                raise PreconditionViolation(f"shot {job.shot_id} has no keyframe")
            if job.state == CLIP_READY:
                buf.emit("state", shot_id=job.shot_id, to=KEYFRAME_READY)
            refs = order_references(pkg)
            i2v = pkg.narrative.get("i2v_prompt", "")
            rel = f"clips/shot_{job.shot_id}_attempt{attempt}.json"
            seed = derive_seed(self.config.seed, "clip", job.shot_id, attempt)
            buf.emit("generation_request", stage="clip", batch_id=None, shot_ids=[job.shot_id],
                     attempt=attempt, prompt=i2v, references=refs, keyframe=keyframe,
                     semantic={job.shot_id: i2v}, seed=seed)
            req = VideoGenRequest(self.abs(keyframe), tuple(self.abs(r) for r in refs), i2v,
                                  duration, seed, attempt, self.abs(rel))
            handle = self.backends.video_gen.generate_video(req)
            record = handle.to_dict()
            if record["path"]:
                try:
                    record["path"] = self.rel(record["path"])
                except ValueError:
                    pass
            buf.emit("clip", shot_id=job.shot_id, attempt=attempt, clip=record,
                     salvage=salvage)
            if job.state == KEYFRAME_READY:
                buf.emit("state", shot_id=job.shot_id, to=CLIP_READY)
            return self._handle(record)

        return generate

    def _handle(self, record: dict) -> ClipHandle:
        h = ClipHandle.from_dict(record)
        if h.path and not Path(h.path).is_absolute() and "://" not in h.path:
            h.path = self.abs(h.path)
        return h

    def _clip_job(self, job: ShotJob) -> ShotBuffer:
        buf = ShotBuffer(self.log)
        if job.state == VERIFIED or (job.state == EXHAUSTED and job.clips):
            return buf
        if job.state == EXHAUSTED:
            self._salvage(job, buf)
            return buf

        th = self.config.thresholds
        on_audit, on_refine = self._recorders(job, "clip", buf)
        fallback_at = clip_fallback_after(th.max_retries)
        fallback_used = False

        def stop_when(attempt: int, result: AuditResult) -> bool:
            return (not fallback_used
                    and job.clip_identity_failures >= fallback_at
                    and job.attempts["keyframe"] < th.budget)

        while True:
            pending = job.pending("clip")
            outcome = verification_loop(
                job.package, self.sp,
                generate=self._clip_generate(job, buf),
                audit=self._auditor(job, "clip"),
                thresholds=th,
                start_attempt=job.attempts["clip"],
                pending=self._handle(job.clips[pending]) if pending else None,
                on_audit=on_audit,
                on_refine=on_refine,
                stop_when=stop_when,
                prior_scores=job.scores("clip"),
            )
            if outcome.passed:
                buf.emit("select", shot_id=job.shot_id, stage="clip", attempt=outcome.best_attempt)
                buf.emit("state", shot_id=job.shot_id, to=VERIFIED)
                return buf
            if outcome.stopped:
                fallback_used = True
                self._finding(buf, "info", "keyframe redo",
                              f"shot {job.shot_id}: repeated clip identity failures, "
                              f"regenerating the keyframe", shot_id=job.shot_id)
                if job.state == CLIP_READY:
                    buf.emit("state", shot_id=job.shot_id, to=KEYFRAME_READY)
                buf.emit("state", shot_id=job.shot_id, to=PENDING)
                self._keyframe_loop(job, buf, fallback=True)
                continue
            buf.emit("select", shot_id=job.shot_id, stage="clip", attempt=outcome.best_attempt)
            buf.emit("exhausted", shot_id=job.shot_id, stage="clip",
                     best_attempt=outcome.best_attempt)
            buf.emit("state", shot_id=job.shot_id, to=EXHAUSTED)
            return buf

    def _salvage(self, job: ShotJob, buf: ShotBuffer) -> None:
        """A keyframe-exhausted shot still gets one clip from its best keyframe
        so a lenient stitch has something to place."""
        on_audit, on_refine = self._recorders(job, "clip", buf)
        generate = self._clip_generate(job, buf, salvage=True)
        handle = generate(job.package, 1)
        result = self._auditor(job, "clip")(handle, job.package, 1)
        on_audit(1, result)
        if not result.overall_pass:
            pkg, _ = refine(job.package, self.sp, result.feedback)
            on_refine(pkg, list(result.feedback))
        buf.emit("select", shot_id=job.shot_id, stage="clip", attempt=1)

    def _clips(self) -> None:
        jobs = self.state.ordered_jobs(self.sp.shot_ids)
        for buf in self._map(self._clip_job, jobs):
            buf.flush()

    # -- stitching and report

    def _stitch(self) -> None:
        jobs = self.state.ordered_jobs(self.sp.shot_ids)
        bad = [j.shot_id for j in jobs if j.state != VERIFIED]
        if self.config.strict_stitch and bad:
            self._write_report()
            raise IncompleteRun(f"{len(bad)} shots not verified: {', '.join(bad)}")
        edl = build_edl(jobs, self.sp)
        (self.dir / EDL_FILE).write_text(json.dumps(edl, indent=2, sort_keys=True) + "\n")
        if self.config.stitch_cmd:
            out = self.dir / "final.mp4"
            cmd = self.config.stitch_cmd.format(edl=shlex.quote(str(self.dir / EDL_FILE)),
                                                out=shlex.quote(str(out)))
            proc = subprocess.run(shlex.split(cmd), cwd=self.dir, capture_output=True, text=True)
            if proc.returncode != 0:
                self.log.emit("finding", severity="error", code="stitch command failed",
                              message=proc.stderr.strip()[:500])
        self.log.emit("stitched", edl=EDL_FILE, entries=len(edl["entries"]),
                      exhausted=[j.shot_id for j in jobs if j.state == EXHAUSTED])

    def report(self) -> dict:
        jobs = self.state.ordered_jobs(self.sp.shot_ids)
        counts = {s: sum(1 for j in jobs if j.state == s) for s in
                  (VERIFIED, EXHAUSTED, PENDING, KEYFRAME_READY, CLIP_READY)}
        return {
            "v": 1,
            "run_id": self.state.run_id,
            "seed": self.config.seed,
            "max_retries": self.config.max_retries,
            "global_context": self.config.global_context,
            "backends": self.backends.identities() if self.backends else {},
            "summary": {"total": len(jobs), **counts,
                        "verified_fraction": counts[VERIFIED] / len(jobs) if jobs else 0.0},
            "shots": [j.summary() for j in jobs],
            "findings": sorted(self.state.findings, key=lambda f: json.dumps(f, sort_keys=True)),
        }

    def _write_report(self) -> None:
        (self.dir / REPORT_FILE).write_text(json.dumps(self.report(), indent=2, sort_keys=True)
                                            + "\n")


def build_edl(jobs, sp: Screenplay) -> dict:
    """Entries in screenplay order; Exhausted shots use their selected (best)
    attempt and are flagged."""
    by_id = {j.shot_id: j for j in jobs}
    entries = []
    for sid in sp.shot_ids:
        job = by_id.get(sid)
        if job is None or not job.clips:
            raise IncompleteRun(f"shot {sid} has no clip")
        attempt = job.clip_attempt
        if attempt not in job.clips:
            attempt = best_attempt(job.scores("clip")) if job.scores("clip") else max(job.clips)
        clip = job.clips[attempt]
        entries.append({
            "shot_id": sid,
            "clip": clip["path"],
            "attempt": attempt,
            "in_point": 0.0,
            "duration": clip["duration"],
            "status": "verified" if job.state == VERIFIED else "exhausted",
        })
    return {"v": 1, "entries": entries}


# ---------------------------------------------------------------------------
# entry points


def run_remake(source: SourceSpec, backends, config: RunConfig, run_dir=None, *,
               stop_after: str | None = None) -> Run:
    run = Run(run_dir or config.output_dir, config, source, backends)
    run.execute(stop_after=stop_after)
    return run


def open_run(run_dir, backends=None) -> Run:
    """Rebuild a run from its directory by replaying the event log."""
    run_dir = Path(run_dir)
    try:
        meta = json.loads((run_dir / RUN_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        from .errors import CorruptManifest

        raise CorruptManifest(f"cannot read {run_dir / RUN_FILE}: {exc}") from None
    config = RunConfig.from_dict(meta["config"])
    source = SourceSpec.from_dict(meta["source"])
    state = replay(read_events(run_dir / EVENTS_FILE))
    run = Run(run_dir, config, source, backends, state)
    if state.screenplay_path:
        run.sp = load_screenplay(run_dir / state.screenplay_path)
    return run


def resume(run_dir, backends, *, stop_after: str | None = None) -> Run:
    run = open_run(run_dir, backends)
    if not run.state.run_id:
        from .errors import CorruptManifest

        raise CorruptManifest("event log has no run_started event")
    run.execute(stop_after=stop_after)
    return run
