"""Evaluation: shot-level character-set metrics, plot scoring, embedding
similarity over annotated regions, group judge scores and report emission."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .backends.base import JudgeContext, Region
from .errors import (
    EmptyJoin,
    InsufficientSamples,
    IoFailure,
    MissingAnchor,
    MissingPortrait,
    SchemaViolation,
)
from .images import image_size

AGGREGATION = "macro"
REMAKE_COLUMNS = ("ID-VLM", "Scene-VLM", "Plot-VLM", "CLIP-I (ID)", "CLIP-I (Scene)")
UNDERSTANDING_COLUMNS = ("IoU", "Precision", "Recall", "F1", "Plot")

# published full-system numbers; they need the original commercial models and
# film corpus, so they are shown for orientation only
PUBLISHED_REMAKE = {"ID-VLM": 9.17, "Scene-VLM": 8.84, "Plot-VLM": 8.67,
                    "CLIP-I (ID)": 0.842, "CLIP-I (Scene)": 0.819}
PUBLISHED_UNDERSTANDING = {"IoU": 0.921, "Precision": 0.940, "Recall": 0.943, "F1": 0.936}


# ---------------------------------------------------------------------------
# set metrics


class SetMetrics(NamedTuple):
    precision: float
    recall: float
    iou: float
    f1: float


def set_metrics(pred, gt) -> SetMetrics:
    """Precision, recall, IoU and F1 of two id sets.

    Both empty scores 1 everywhere; a one-sided empty set scores 0.
    """
    p, g = set(pred), set(gt)
    if not p and not g:
        return SetMetrics(1.0, 1.0, 1.0, 1.0)
    inter = len(p & g)
    precision = inter / len(p) if p else 0.0
    recall = inter / len(g) if g else 0.0
    iou = inter / len(p | g)
    # 2PR/(P+R) reduces to 2|p&g|/(|p|+|g|); one division keeps it correctly rounded
    f1 = 2 * inter / (len(p) + len(g)) if inter else 0.0
    return SetMetrics(precision, recall, iou, f1)


# ---------------------------------------------------------------------------
# file formats


@dataclass(frozen=True)
class ShotLabel:
    """One shot of a ground-truth or prediction document."""

    shot_id: str
    character_set: frozenset
    plot_description: str = ""
    background: frozenset = frozenset()


GroundTruthShot = ShotLabel
PredictionShot = ShotLabel


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise SchemaViolation(path, msg)


def parse_shot_labels(doc) -> list[ShotLabel]:
    """``{shots: [{shot_id, characters[], plot_description, background_characters?}]}``"""
    _require(isinstance(doc, dict), "", "expected an object")
    shots = doc.get("shots")
    _require(isinstance(shots, list), "/shots", "expected a list")
    out, seen = [], set()
    for i, s in enumerate(shots):
        path = f"/shots/{i}"
        _require(isinstance(s, dict), path, "expected an object")
        sid = s.get("shot_id")
        _require(isinstance(sid, (str, int)) and not isinstance(sid, bool), f"{path}/shot_id",
                 "expected a string")
        sid = str(sid)
        _require(sid not in seen, f"{path}/shot_id", f"duplicate shot id {sid}")
        seen.add(sid)
        chars = s.get("characters", [])
        _require(isinstance(chars, list) and all(isinstance(c, str) for c in chars),
                 f"{path}/characters", "expected a list of strings")
        bg = s.get("background_characters", [])
        _require(isinstance(bg, list) and all(isinstance(c, str) for c in bg),
                 f"{path}/background_characters", "expected a list of strings")
        plot = s.get("plot_description", "")
        _require(isinstance(plot, str), f"{path}/plot_description", "expected a string")
        out.append(ShotLabel(sid, frozenset(chars), plot, frozenset(bg)))
    return out


def labels_from_screenplay(sp) -> list[ShotLabel]:
    """Prediction labels straight from a screenplay (plot = one-shot prompt)."""
    background = {c.character_id for c in sp.characters if c.role_classification == "background"}
    return [ShotLabel(s.shot_id, frozenset(s.characters), s.one_shot_prompt,
                      frozenset(background & set(s.characters))) for s in sp.shots]


@dataclass(frozen=True)
class RegionAnnotation:
    frame: str
    shot_id: str
    kind: str  # "character" | "background"
    box: tuple[int, int, int, int]
    character_id: str | None = None

    def __post_init__(self):
        if self.kind not in ("character", "background"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind == "character" and not self.character_id:
            raise ValueError("character regions need a character_id")
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError("region width and height must be positive")


def parse_regions(doc, base_dir=None, *, check_bounds: bool = True) -> list[RegionAnnotation]:
    """``{frames: [{frame, shot_id, regions: [{kind, character_id?, x, y, w, h}]}]}``"""
    _require(isinstance(doc, dict), "", "expected an object")
    frames = doc.get("frames")
    _require(isinstance(frames, list), "/frames", "expected a list")
    base = Path(base_dir) if base_dir else None
    out = []
    for i, f in enumerate(frames):
        path = f"/frames/{i}"
        _require(isinstance(f, dict), path, "expected an object")
        frame = f.get("frame")
        _require(isinstance(frame, str) and frame, f"{path}/frame", "expected a path")
        sid = f.get("shot_id")
        _require(isinstance(sid, (str, int)) and not isinstance(sid, bool), f"{path}/shot_id",
                 "expected a string")
        resolved = str(base / frame) if base and not Path(frame).is_absolute() else frame
        size = None
        if check_bounds and Path(resolved).exists():
            size = image_size(resolved)
        regions = f.get("regions")
        _require(isinstance(regions, list), f"{path}/regions", "expected a list")
        for j, r in enumerate(regions):
            rpath = f"{path}/regions/{j}"
            _require(isinstance(r, dict), rpath, "expected an object")
            kind = r.get("kind")
            _require(kind in ("character", "background"), f"{rpath}/kind",
                     "expected 'character' or 'background'")
            for k in ("x", "y", "w", "h"):
                _require(isinstance(r.get(k), int) and not isinstance(r.get(k), bool),
                         f"{rpath}/{k}", "expected an integer")
            x, y, w, h = r["x"], r["y"], r["w"], r["h"]
            _require(w > 0 and h > 0, f"{rpath}/w", "width and height must be positive")
            _require(x >= 0 and y >= 0, f"{rpath}/x", "box origin must be inside the frame")
            if size is not None:
                _require(x + w <= size[0] and y + h <= size[1], f"{rpath}/w",
                         f"box exceeds the {size[0]}x{size[1]} frame")
            cid = r.get("character_id")
            if kind == "character":
                _require(isinstance(cid, str) and cid, f"{rpath}/character_id",
                         "character regions need a character_id")
            out.append(RegionAnnotation(resolved, str(sid), kind, (x, y, w, h),
                                        cid if kind == "character" else None))
    return out


def load_json(path) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation("", f"{path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# understanding track


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


@dataclass
class UnderstandingEval:
    rows: list[dict]
    macro: dict
    unmatched: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "macro": self.macro, "unmatched": self.unmatched,
                "n": len(self.rows), "aggregation": AGGREGATION}


def eval_understanding(pred, gt, judge=None) -> UnderstandingEval:
    """Inner join on shot id. Characters the ground truth flags as background
    are dropped from both sides before scoring."""
    pred_by = {s.shot_id: s for s in pred}
    gt_by = {s.shot_id: s for s in gt}
    joined = [sid for sid in gt_by if sid in pred_by]
    unmatched = {
        "missing_in_prediction": sorted(set(gt_by) - set(pred_by), key=_natural),
        "missing_in_ground_truth": sorted(set(pred_by) - set(gt_by), key=_natural),
    }
    if not joined:
        raise EmptyJoin("no shot ids in common between prediction and ground truth")
    rows = []
    for sid in sorted(joined, key=_natural):
        g, p = gt_by[sid], pred_by[sid]
        m = set_metrics(p.character_set - g.background, g.character_set - g.background)
        row = {"shot_id": sid, "IoU": m.iou, "Precision": m.precision, "Recall": m.recall,
               "F1": m.f1}
        if judge is not None:
            row["Plot"] = float(judge.score_plot(p.plot_description, g.plot_description))
        rows.append(row)
    cols = [c for c in UNDERSTANDING_COLUMNS if all(c in r for r in rows)]
    macro = {c: _mean(r[c] for r in rows) for c in cols}
    return UnderstandingEval(rows, macro, unmatched)


def _natural(sid: str):
    return (0, int(sid), "") if sid.isdigit() else (1, 0, sid)


# ---------------------------------------------------------------------------
# remaking track


@dataclass
class ScoreResult:
    overall: float
    per_shot: dict[str, float]


def clip_id_score(regions, portraits: dict, embed) -> ScoreResult:
    """Per region: similarity of the crop to the character's portrait. Mean
    per shot over characters, then mean over shots."""
    per_shot: dict[str, list[float]] = defaultdict(list)
    for r in regions:
        if r.kind != "character":
            continue
        portrait = portraits.get(r.character_id)
        if not portrait:
            raise MissingPortrait(f"no portrait for {r.character_id}")
        sim = embed.embed_similarity(Region(r.frame, r.box), Region(portrait))
        per_shot[r.shot_id].append(float(sim))
    shots = {sid: _mean(v) for sid, v in per_shot.items()}
    return ScoreResult(_mean(shots.values()), shots)


def clip_scene_score(regions, anchors: dict, embed) -> ScoreResult:
    """Background crops against the shot's scene anchor; ``anchors`` maps
    shot id to the environment reference image."""
    per_shot: dict[str, list[float]] = defaultdict(list)
    for r in regions:
        if r.kind != "background":
            continue
        anchor = anchors.get(r.shot_id)
        if not anchor:
            raise MissingAnchor("environment", r.shot_id)
        per_shot[r.shot_id].append(float(embed.embed_similarity(Region(r.frame, r.box),
                                                                Region(anchor))))
    shots = {sid: _mean(v) for sid, v in per_shot.items()}
    return ScoreResult(_mean(shots.values()), shots)


VLM_DIMENSIONS = {"ID-VLM": "identity", "Scene-VLM": "environment", "Plot-VLM": "plot"}


def vlm_scores(groups: dict, judge) -> dict[str, float]:
    """``groups`` maps a scene to [(content, JudgeContext), ...]; each group
    is judged jointly per dimension and scene scores are averaged."""
    if not groups:
        raise InsufficientSamples("no scene groups to judge")
    for scene, items in groups.items():
        if len(items) < 2:
            raise InsufficientSamples(f"scene {scene} has {len(items)} sample(s); need 2")
    out = {}
    for label, dim in VLM_DIMENSIONS.items():
        out[label] = _mean(judge.judge_group(items, dim) for _, items in sorted(groups.items()))
    return out


def consistency_score(row: dict) -> float:
    """One number for ranking remake variants: mean of the judge scores
    scaled to [0, 1] and the two embedding scores."""
    return _mean([row["ID-VLM"] / 10, row["Scene-VLM"] / 10, row["CLIP-I (ID)"],
                  row["CLIP-I (Scene)"]])


def evaluate_run(run_dir, judge, embed, regions_path=None) -> dict:
    """Remaking metrics for a finished run directory."""
    from .pipeline import open_run

    run = open_run(run_dir)
    sp = run.sp
    jobs = run.state.ordered_jobs(sp.shot_ids)

    groups: dict[str, list] = defaultdict(list)
    for job in jobs:
        attempt = job.clip_attempt
        if attempt is None:
            continue
        shot = sp.shot(job.shot_id)
        groups[shot.scene_id].append((run._handle(job.clips[attempt]),
                                      JudgeContext(job.package, shot)))
    warnings = []
    thin = sorted(s for s, items in groups.items() if len(items) < 2)
    if thin:
        warnings.append(f"scenes with fewer than 2 shots left out of group judging: {thin}")
    eligible = {s: items for s, items in groups.items() if len(items) >= 2}
    row = dict(vlm_scores(eligible, judge)) if eligible else {k: 0.0 for k in VLM_DIMENSIONS}

    if regions_path is None:
        regions_path = Path(run_dir) / "regions.json"
    regions = parse_regions(load_json(regions_path), Path(regions_path).parent)
    from .memory import ReferenceRegistry

    registry = ReferenceRegistry.load(sp, run.dir)
    portraits = {}
    for p in registry.all_portraits:
        portraits.setdefault(p.character_id, run.abs(p.image.path))
    anchors = {}
    for s in sp.shots:
        env = registry.environment(s.scene_id)
        if env is not None:
            anchors[s.shot_id] = run.abs(env.image.path)
    ident = clip_id_score(regions, portraits, embed)
    scene = clip_scene_score(regions, anchors, embed)
    row["CLIP-I (ID)"] = ident.overall
    row["CLIP-I (Scene)"] = scene.overall
    verified = sum(1 for j in jobs if j.state == "Verified")
    return {
        "metrics": {k: row[k] for k in REMAKE_COLUMNS},
        "consistency": consistency_score(row),
        "verified": verified,
        "total": len(jobs),
        "verified_fraction": verified / len(jobs) if jobs else 0.0,
        "per_shot": {
            "CLIP-I (ID)": ident.per_shot,
            "CLIP-I (Scene)": scene.per_shot,
        },
        "warnings": warnings,
    }


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    remaking: list[dict] = field(default_factory=list)  # rows with "label" + REMAKE_COLUMNS
    understanding: UnderstandingEval | None = None
    provenance: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "v": 1,
            "provenance": {"aggregation": AGGREGATION, **self.provenance},
            "remaking": {"columns": list(REMAKE_COLUMNS), "rows": self.remaking},
            "published_reference": {
                "reproducible": False,
                "remaking": PUBLISHED_REMAKE,
                "understanding": PUBLISHED_UNDERSTANDING,
            },
            "warnings": list(self.warnings),
        }
        if self.understanding is not None:
            d["understanding"] = self.understanding.to_dict()
        return d


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def _table(columns, rows) -> list[str]:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c, "")) for c in columns) + " |")
    return lines


def render_markdown(report: EvalReport) -> str:
    lines = ["# Evaluation report", ""]
    lines += ["## Remaking", ""]
    cols = ["Method", *REMAKE_COLUMNS]
    rows = [{"Method": r.get("label", ""), **r} for r in report.remaking]
    rows.append({"Method": "published full system (not reproducible here)", **PUBLISHED_REMAKE})
    lines += _table(cols, rows)
    lines.append("")
    if report.understanding is not None:
        u = report.understanding
        lines += ["## Understanding", ""]
        ucols = ["Method", *[c for c in UNDERSTANDING_COLUMNS if c in u.macro]]
        urows = [{"Method": "this run", **u.macro},
                 {"Method": "published full system (not reproducible here)",
                  **PUBLISHED_UNDERSTANDING}]
        lines += _table(ucols, urows)
        lines.append("")
        missing = u.unmatched.get("missing_in_prediction", [])
        extra = u.unmatched.get("missing_in_ground_truth", [])
        lines.append(f"Joined shots: {len(u.rows)}; missing in prediction: {len(missing)}; "
                     f"missing in ground truth: {len(extra)}.")
        lines.append("")
    lines.append(f"Aggregation: {AGGREGATION} (per shot, then mean).")
    if report.warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in report.warnings]
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    if not report.remaking and report.understanding is None:
        if "no rows to report" not in report.warnings:
            report.warnings.append("no rows to report")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, mpath = out_dir / "report.json", out_dir / "report.md"
        jpath.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        mpath.write_text(render_markdown(report))
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out_dir}: {exc}") from exc
    return jpath, mpath
