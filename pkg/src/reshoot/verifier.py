"""Four-dimension audits, dual-path identity matching, feedback and refinement."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

from .backends.base import DIMENSIONS, BackendUnavailable, JudgeContext, JudgeVerdict, Region
from .errors import BothPathsUnavailable, ConfigError, PreconditionViolation, TransportError
from .memory import PORTRAIT_CAP, MemoryPackage
from .screenplay import Screenplay, Shot

ROUTE_UNDERSTANDING = "understanding"
ROUTE_GENERATION = "generation"
FEEDBACK_VERSION = 1


@dataclass(frozen=True)
class AuditThresholds:
    quality: float = 7.0
    identity: float = 7.0
    environment: float = 7.0
    plot: float = 7.0
    face_match_accept: float = 0.75
    fallback_switch: float = 0.5
    max_retries: int = 3

    def __post_init__(self):
        for d in DIMENSIONS:
            if not 0.0 <= getattr(self, d) <= 10.0:
                raise ConfigError(f"threshold {d} must be in [0, 10]")
        for name in ("face_match_accept", "fallback_switch"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    def for_dimension(self, dimension: str) -> float:
        return getattr(self, dimension)

    @property
    def budget(self) -> int:
        return self.max_retries + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AuditThresholds:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown threshold keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Feedback:
    dimension: str
    severity: str
    description: str
    route: str
    corrective_hints: tuple[str, ...]
    shot_id: str
    attempt: int
    # characters the feedback is about (identity drift)
    subjects: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "corrective_hints", tuple(self.corrective_hints))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"unknown dimension {self.dimension!r}")
        if self.severity not in ("minor", "major"):
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.route != route_for(self.dimension):
            raise ValueError(f"{self.dimension} feedback must route to {route_for(self.dimension)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corrective_hints"] = list(self.corrective_hints)
        d["subjects"] = list(self.subjects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Feedback:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def route_for(dimension: str) -> str:
    return ROUTE_UNDERSTANDING if dimension == "plot" else ROUTE_GENERATION


@dataclass(frozen=True)
class IdentityMatch:
    character_id: str
    similarity: float
    matched: bool
    mode: str  # "primary" | "fallback"


@dataclass(frozen=True)
class AuditResult:
    verdicts: tuple[JudgeVerdict, ...]
    feedback: tuple[Feedback, ...] = ()
    identity_matches: tuple[IdentityMatch, ...] = ()

    @property
    def overall_pass(self) -> bool:
        return all(v.passed for v in self.verdicts)

    @property
    def total_score(self) -> float:
        return sum(v.score for v in self.verdicts)

    def verdict(self, dimension: str) -> JudgeVerdict:
        return next(v for v in self.verdicts if v.dimension == dimension)

    @property
    def failed(self) -> list[JudgeVerdict]:
        return [v for v in self.verdicts if not v.passed]


# ---------------------------------------------------------------------------
# identity


def match_identity(region, portrait, judge, embed, thresholds: AuditThresholds,
                   character_id: str = "") -> IdentityMatch:
    """Judge score / 10 first; the embedding path decides when the judge is
    unavailable or scores below ``fallback_switch``."""
    if not isinstance(region, Region):
        region = Region(region)
    primary = None
    try:
        primary = min(1.0, max(0.0, judge.compare_identity(region, portrait) / 10.0))
    except (BackendUnavailable, TransportError):
        primary = None
    if primary is not None and primary >= thresholds.fallback_switch:
        return IdentityMatch(character_id, primary, primary >= thresholds.face_match_accept,
                             "primary")
    try:
        fallback = embed.embed_similarity(region, Region(portrait))
    except (BackendUnavailable, TransportError) as exc:
        if primary is None:
            raise BothPathsUnavailable(f"no identity path for {character_id or portrait}") from exc
        return IdentityMatch(character_id, primary, primary >= thresholds.face_match_accept,
                             "primary")
    sim = min(1.0, max(0.0, float(fallback)))
    return IdentityMatch(character_id, sim, sim >= thresholds.face_match_accept, "fallback")


# ---------------------------------------------------------------------------
# audits


def _audit(content, pkg: MemoryPackage, shot: Shot, judge, embed, thresholds: AuditThresholds,
           *, resolve: Callable[[str], object] = str, attempt: int = 1) -> AuditResult:
    ctx = JudgeContext(pkg, shot)
    verdicts = {
        d: judge.judge(content, ctx, d, thresholds.for_dimension(d)) for d in DIMENSIONS
    }

    matches = []
    for cid in shot.characters:
        portrait = (pkg.character_mappings.get(cid) or {}).get("portrait")
        if not portrait:
            continue
        matches.append(
            match_identity(Region(content), resolve(portrait), judge, embed, thresholds, cid)
        )
    misses = [m for m in matches if not m.matched]
    if misses:
        v = verdicts["identity"]
        worst = min(m.similarity for m in misses) * 10.0
        note = "face match failed for " + ", ".join(m.character_id for m in misses)
        rationale = f"{v.rationale}; {note}" if v.rationale else note
        verdicts["identity"] = JudgeVerdict.scored(
            "identity", min(v.score, worst), thresholds.identity, rationale
        )

    ordered = tuple(verdicts[d] for d in DIMENSIONS)
    feedback: tuple[Feedback, ...] = ()
    if not all(v.passed for v in ordered):
        drifting = [m.character_id for m in misses]
        feedback = tuple(
            formulate_feedback(ordered, pkg, shot, attempt=attempt, drifting=drifting,
                               thresholds=thresholds)
        )
    return AuditResult(ordered, feedback, tuple(matches))


def audit_keyframe(keyframe, pkg: MemoryPackage, shot: Shot, judge, embed,
                   thresholds: AuditThresholds | None = None, **kw) -> AuditResult:
    """``keyframe`` is an image path (the judge reads it directly)."""
    return _audit(keyframe, pkg, shot, judge, embed, thresholds or AuditThresholds(), **kw)


def audit_clip(clip, pkg: MemoryPackage, shot: Shot, judge, embed,
               thresholds: AuditThresholds | None = None, **kw) -> AuditResult:
    """Same rubric on sampled clip content (first, middle, last)."""
    return _audit(clip, pkg, shot, judge, embed, thresholds or AuditThresholds(), **kw)


# ---------------------------------------------------------------------------
# feedback and refinement


def _name(pkg: MemoryPackage, cid: str) -> str:
    return (pkg.character_mappings.get(cid) or {}).get("target_name") or cid


def formulate_feedback(verdicts, pkg: MemoryPackage, shot: Shot, *, attempt: int = 1,
                       drifting=None, thresholds: AuditThresholds | None = None) -> list[Feedback]:
    thresholds = thresholds or AuditThresholds()
    failed = [v for v in verdicts if not v.passed]
    if not failed:
        raise PreconditionViolation("feedback needs at least one failed verdict")
    out = []
    for v in failed:
        threshold = thresholds.for_dimension(v.dimension)
        severity = "minor" if v.score >= threshold / 2 else "major"
        subjects: tuple[str, ...] = ()
        if v.dimension == "identity":
            subjects = tuple(drifting) if drifting else tuple(shot.characters)
            hints = []
            for cid in subjects:
                portrait = (pkg.character_mappings.get(cid) or {}).get("portrait")
                hint = f"keep {cid} ({_name(pkg, cid)}) identical to the portrait"
                hints.append(f"{hint} {portrait}" if portrait else hint)
            if not hints:
                hints = ["no unexpected people in frame"]
        elif v.dimension == "environment":
            hints = [f"match the {shot.scene_id} environment anchor {pkg.environment_ref}"]
        elif v.dimension == "quality":
            n = len(shot.characters)
            who = ", ".join(shot.characters) or "nobody"
            hints = [f"render exactly {n} character{'s' if n != 1 else ''}: {who}; no artifacts"]
        else:
            action = shot.subject_movement.action or shot.one_shot_prompt
            hints = [f"depict exactly: {action}"]
        out.append(Feedback(
            dimension=v.dimension,
            severity=severity,
            description=f"{v.dimension} scored {v.score:g}/10 on attempt {attempt}: {v.rationale}",
            route=route_for(v.dimension),
            corrective_hints=tuple(hints),
            shot_id=shot.shot_id,
            attempt=attempt,
            subjects=subjects,
        ))
    return out


def _promote(refs: tuple[str, ...], first: list[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(list(first) + list(refs)))[:PORTRAIT_CAP]


def refine(pkg: MemoryPackage, sp: Screenplay, feedback) -> tuple[MemoryPackage, str]:
    """Fold feedback into a new package; ``pkg`` is left untouched."""
    feedback = list(feedback)
    if not feedback:
        raise PreconditionViolation("refine needs feedback")
    shot = sp.shot(pkg.shot_id)
    narrative = dict(pkg.narrative)
    refs = tuple(pkg.character_refs)
    env_ref = pkg.environment_ref
    dims = {f.dimension for f in feedback}

    if "plot" in dims:
        narrative["language_prompt"] = shot.one_shot_prompt
        narrative["i2v_prompt"] = shot.i2v_prompt
        narrative["action"] = shot.subject_movement.action

    if "identity" in dims:
        promoted = []
        for f in feedback:
            if f.dimension != "identity":
                continue
            for cid in f.subjects:
                p = (pkg.character_mappings.get(cid) or {}).get("portrait")
                if p and p not in promoted:
                    promoted.append(p)
        refs = _promote(refs, promoted)

    if "environment" in dims:
        env_ref = pkg.environment_ref
        scene = sp.scene(shot.scene_id)
        desc = " ".join(scene.environment_description.split())
        if desc:
            narrative["language_prompt"] = f"{desc} {narrative.get('language_prompt', '')}"

    hints = [h for f in feedback for h in f.corrective_hints]
    clause = "CORRECTIONS: " + "; ".join(hints)
    narrative["language_prompt"] = f"{narrative.get('language_prompt', '')} {clause}".strip()
    narrative["i2v_prompt"] = f"{narrative.get('i2v_prompt', '')} {clause}".strip()

    new = replace(
        pkg,
        narrative=narrative,
        character_refs=refs,
        environment_ref=env_ref,
        generation_feedback=pkg.generation_feedback + tuple(f.description for f in feedback),
    )
    return new, narrative["i2v_prompt"]


# ---------------------------------------------------------------------------
# loop driver


def clip_fallback_after(max_retries: int) -> int:
    """Identity failures at the clip stage before the keyframe is redone."""
    return max(1, math.ceil(max_retries / 2))


@dataclass
class LoopOutcome:
    passed: bool
    attempts: int
    best_attempt: int
    results: dict[int, AuditResult] = field(default_factory=dict)
    package: MemoryPackage | None = None
    stopped: bool = False  # stop_when fired before the budget ran out


def best_attempt(scores: dict[int, float]) -> int:
    """Highest summed score; ties go to the earliest attempt."""
    return min(scores, key=lambda a: (-scores[a], a))


def verification_loop(
    package: MemoryPackage,
    sp: Screenplay,
    *,
    generate: Callable[[MemoryPackage, int], object],
    audit: Callable[[object, MemoryPackage, int], AuditResult],
    thresholds: AuditThresholds,
    start_attempt: int = 0,
    pending=None,
    on_audit: Callable[[int, AuditResult], None] | None = None,
    on_refine: Callable[[MemoryPackage, list[Feedback]], None] | None = None,
    stop_when: Callable[[int, AuditResult], bool] | None = None,
    prior_scores: dict[int, float] | None = None,
) -> LoopOutcome:
    """Audit, refine and regenerate until pass or the budget is spent.

    ``start_attempt`` is the number of attempts already made; ``pending`` is
    content generated for that attempt but not yet audited (resume).
    """
    scores = dict(prior_scores or {})
    results: dict[int, AuditResult] = {}
    attempt = start_attempt
    content = pending
    while True:
        if content is None:
            if attempt >= thresholds.budget:
                break
            attempt += 1
            content = generate(package, attempt)
        result = audit(content, package, attempt)
        content = None
        results[attempt] = result
        scores[attempt] = result.total_score
        if on_audit:
            on_audit(attempt, result)
        if result.overall_pass:
            return LoopOutcome(True, attempt, attempt, results, package)
        # refine even on the last attempt so the package records every failure
        package, _ = refine(package, sp, result.feedback)
        if on_refine:
            on_refine(package, list(result.feedback))
        if attempt >= thresholds.budget:
            break
        if stop_when and stop_when(attempt, result):
            return LoopOutcome(False, attempt, best_attempt(scores), results, package, stopped=True)
    best = best_attempt(scores) if scores else 0
    return LoopOutcome(False, attempt, best, results, package)
