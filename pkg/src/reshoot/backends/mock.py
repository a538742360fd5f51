"""Deterministic offline backends with seeded drift injection.

The mock image generator reads the machine tags embedded in each ``CELL``
clause of a prompt (scene, characters, attempt), paints one coloured block per
tag using a fixed layout, and writes what it actually painted to the
``<image>.tags.json`` sidecar. Drift is simulated by corrupting a tag before
painting. The mock judge and embedder read sidecars back, so every
verification decision is mechanically checkable.

Everything is a pure function of (world seed, request): output bytes never
depend on where files live on disk.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NonconformingOutput, TransportError
from ..images import encode_png, image_size, read_sidecar, write_sidecar
from ..screenplay import (
    parse_screenplay,
    screenplay_from_dict,
    serialize_screenplay,
    validate_screenplay,
)
from .base import (
    BackendUnavailable,
    ClipHandle,
    ImageGenRequest,
    JudgeContext,
    JudgeVerdict,
    Region,
    VideoGenRequest,
)

DRIFT_KINDS = ("identity_swap", "background_mutation", "character_count", "plot_mismatch")
IMPOSTOR = "@character_impostor"

_CELL_RE = re.compile(r"^CELL \((\d+),(\d+)\): \[([^\]]*)\]\s?(.*?)(?: \| look:.*)?$")
_REF_RE = re.compile(r"^REFERENCE: \[([^\]]*)\]")
_TOKEN_RE = re.compile(r"[a-z0-9@_]+")


@dataclass(frozen=True)
class MockWorld:
    seed: int = 0
    fault_rate: float = 0.0
    drift_kinds: frozenset[str] = frozenset(DRIFT_KINDS)
    # attempts on which drift may fire; None means every attempt
    fault_schedule: frozenset[int] | None = None
    # clip-stage drift probability; None means same as fault_rate
    clip_fault_rate: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.fault_rate <= 1.0:
            raise ValueError("fault_rate must be in [0, 1]")
        object.__setattr__(self, "drift_kinds", frozenset(self.drift_kinds))
        unknown = self.drift_kinds - set(DRIFT_KINDS)
        if unknown:
            raise ValueError(f"unknown drift kinds {sorted(unknown)}")
        if self.fault_schedule is not None:
            object.__setattr__(self, "fault_schedule", frozenset(self.fault_schedule))

    def rng(self, *parts) -> random.Random:
        blob = json.dumps([self.seed, *parts], sort_keys=True, default=str).encode()
        return random.Random(int.from_bytes(hashlib.sha256(blob).digest()[:8], "big"))

    def fires(self, attempt: int) -> bool:
        return self.fault_schedule is None or attempt in self.fault_schedule

    @property
    def video_rate(self) -> float:
        return self.fault_rate if self.clip_fault_rate is None else self.clip_fault_rate


# ---------------------------------------------------------------------------
# tags and layout


def _parse_kv(blob: str) -> dict[str, str]:
    out = {}
    for part in blob.split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def parse_prompt_cells(prompt: str) -> list[dict]:
    """Extract the machine tags from CELL (or REFERENCE) lines."""
    cells = []
    for line in prompt.splitlines():
        m = _CELL_RE.match(line)
        if m:
            kv = _parse_kv(m.group(3))
            cells.append({
                "row": int(m.group(1)),
                "col": int(m.group(2)),
                "scene": kv.get("scene", ""),
                "characters": [c for c in kv.get("characters", "").split(",") if c],
                "attempt": int(kv.get("attempt", "1") or 1),
                "plot": m.group(4).strip(),
            })
    if cells:
        return cells
    for line in prompt.splitlines():
        m = _REF_RE.match(line)
        if m:
            kv = _parse_kv(m.group(1))
            return [{
                "row": 0,
                "col": 0,
                "scene": kv.get("scene", ""),
                "characters": [c for c in kv.get("characters", "").split(",") if c],
                "attempt": 1,
                "plot": "",
            }]
    return [{"row": 0, "col": 0, "scene": "", "characters": [], "attempt": 1, "plot": ""}]


def mock_layout(width: int, height: int, n_characters: int) -> dict:
    """Block layout inside one cell: a sky strip for the scene tag and one
    slot per character across the middle band. Boxes are (x, y, w, h)."""
    slots = []
    if n_characters:
        top, bottom = height // 4, (3 * height) // 4
        for i in range(n_characters):
            x0 = (i * width) // n_characters
            x1 = ((i + 1) * width) // n_characters
            pad = max(0, (x1 - x0) // 10)
            slots.append((x0 + pad, top, max(1, x1 - x0 - 2 * pad), max(1, bottom - top)))
    return {"background": (0, 0, width, max(1, height // 8)), "slots": slots}


def tag_color(tag: str) -> tuple[int, int, int]:
    d = hashlib.sha256(tag.encode()).digest()
    return d[0], d[1], d[2]


def render_cells(width: int, height: int, cells: list[dict]) -> np.ndarray:
    rows = max(c["row"] for c in cells) + 1
    cols = max(c["col"] for c in cells) + 1
    cw, ch = width // cols, height // rows
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    for cell in cells:
        ox, oy = cell["col"] * cw, cell["row"] * ch
        canvas[oy : oy + ch, ox : ox + cw] = tag_color(cell["scene"] or "blank")
        layout = mock_layout(cw, ch, len(cell["characters"]))
        for cid, (x, y, w, h) in zip(cell["characters"], layout["slots"]):
            canvas[oy + y : oy + y + h, ox + x : ox + x + w] = tag_color(cid)
    return canvas


def corrupt(cell: dict, kind: str, rng: random.Random) -> dict:
    cell = dict(cell, characters=list(cell["characters"]))
    chars = cell["characters"]
    if kind == "identity_swap" and not chars:
        kind = "background_mutation"
    if kind == "identity_swap":
        chars[rng.randrange(len(chars))] = IMPOSTOR
    elif kind == "background_mutation":
        cell["scene"] = f"{cell['scene']}_mutated"
    elif kind == "character_count":
        if chars:
            chars.pop(rng.randrange(len(chars)))
        else:
            chars.append(IMPOSTOR)
    elif kind == "plot_mismatch":
        cell["plot"] = "an unrelated moment"
    cell["drift"] = kind
    return cell


def sidecar_cells(source) -> list[dict]:
    """Tag samples of an image path or a clip handle (empty if untagged)."""
    if isinstance(source, ClipHandle):
        return list((source.tags or {}).get("samples", []))
    tags = read_sidecar(source)
    return list(tags.get("cells", [])) if tags else []


def region_tags(region: Region) -> set[str]:
    src = region.image
    cells = sidecar_cells(src)
    if not cells:
        return set()
    if region.box is None or isinstance(src, ClipHandle):
        return {t for c in cells for t in [c["scene"], *c["characters"]] if t}
    width, height = image_size(src)
    rows = max(c["row"] for c in cells) + 1
    cols = max(c["col"] for c in cells) + 1
    cw, ch = width // cols, height // rows
    x, y, w, h = region.box
    cx, cy = x + w // 2, y + h // 2
    r, c = min(cy // ch, rows - 1), min(cx // cw, cols - 1)
    cell = next((k for k in cells if k["row"] == r and k["col"] == c), None)
    if cell is None:
        return set()
    lx, ly = cx - c * cw, cy - r * ch
    layout = mock_layout(cw, ch, len(cell["characters"]))
    for cid, (sx, sy, sw, sh) in zip(cell["characters"], layout["slots"]):
        if sx <= lx < sx + sw and sy <= ly < sy + sh:
            return {cid}
    return {cell["scene"]} if cell["scene"] else set()


def _tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def _band(mismatches: int) -> float:
    return 10.0 if mismatches == 0 else 4.0 if mismatches == 1 else 0.0


# ---------------------------------------------------------------------------
# backends


class _Counting:
    def __init__(self):
        self.calls: list = []
        self._lock = threading.Lock()

    def _record(self, item) -> None:
        with self._lock:
            self.calls.append(item)


class MockUnderstanding(_Counting):
    def __init__(self, world: MockWorld, nonconforming: bool = False):
        super().__init__()
        self.world = world
        self.nonconforming = nonconforming

    def understand(self, source: str, instructions: str = "") -> str:
        from ..fixtures import fixture_document

        self._record(source)
        path = Path(source)
        if source.endswith(".json") and path.exists():
            doc = json.loads(path.read_text())
        else:
            try:
                doc = fixture_document(source, seed=self.world.seed)
            except KeyError:
                raise TransportError(f"mock understanding has no fixture for {source!r}") from None
        if self.nonconforming and doc.get("shots"):
            doc["shots"][0]["scene_id"] = "major_scene_99"
        text = serialize_screenplay(screenplay_from_dict(doc))
        return check_screenplay_output(text)


def check_screenplay_output(text: str) -> str:
    try:
        sp = parse_screenplay(text)
    except Exception as exc:  # MalformedJson / SchemaViolation
        raise NonconformingOutput(f"understanding output does not parse: {exc}") from exc
    report = validate_screenplay(sp)
    if not report.ok:
        first = report.errors[0]
        raise NonconformingOutput(
            f"understanding output invalid at {first.path}: {first.code}", report
        )
    return text


class MockImageGen(_Counting):
    def __init__(self, world: MockWorld):
        super().__init__()
        self.world = world

    def generate_image(self, req: ImageGenRequest) -> bytes:
        self._record(req)
        rng = self.world.rng("image", req.prompt, req.width, req.height, req.seed)
        reference = not any(line.startswith("CELL (") for line in req.prompt.splitlines())
        cells = []
        for cell in parse_prompt_cells(req.prompt):
            if reference:
                cells.append(cell)
                continue
            roll = rng.random()
            kind = rng.choice(sorted(self.world.drift_kinds)) if self.world.drift_kinds else None
            if kind and self.world.fires(cell["attempt"]) and roll < self.world.fault_rate:
                cell = corrupt(cell, kind, rng)
            cells.append(cell)
        pixels = render_cells(req.width, req.height, cells)
        data = encode_png(pixels)
        tags = {"cells": cells}
        if req.out_path:
            out = Path(req.out_path)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_bytes(data)
            write_sidecar(out, tags)
        return data


class MockVideoGen(_Counting):
    def __init__(self, world: MockWorld):
        super().__init__()
        self.world = world

    def generate_video(self, req: VideoGenRequest) -> ClipHandle:
        self._record(req)
        cells = sidecar_cells(req.keyframe)
        base = dict(cells[0]) if cells else {"row": 0, "col": 0, "scene": "", "characters": [],
                                             "attempt": 1, "plot": ""}
        base.pop("drift", None)
        samples = [dict(base, characters=list(base["characters"])) for _ in range(3)]
        rng = self.world.rng("video", req.i2v_prompt, req.seed, req.attempt, req.duration)
        roll = rng.random()
        kind = rng.choice(sorted(self.world.drift_kinds)) if self.world.drift_kinds else None
        which = rng.randrange(3)
        if kind and self.world.fires(req.attempt) and roll < self.world.video_rate:
            samples[which] = corrupt(samples[which], kind, rng)
        tags = {"samples": samples}
        descriptor = {
            "keyframe": Path(req.keyframe).name,
            "references": [Path(r).name for r in req.references],
            "i2v_prompt": req.i2v_prompt,
            "duration": req.duration,
            "samples": samples,
        }
        path = ""
        if req.out_path:
            out = Path(req.out_path)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
            path = str(out)
        return ClipHandle(path=path, duration=req.duration, tags=tags, meta={"mock": True})


class MockJudge(_Counting):
    """Scores sidecar tags against the shot: exact 10, one mismatch 4, else 0."""

    def __init__(self, world: MockWorld | None = None, *, identity_available: bool = True):
        super().__init__()
        self.world = world or MockWorld()
        self.identity_available = identity_available

    def _score_sample(self, cell: dict, ctx: JudgeContext, dimension: str) -> tuple[float, str]:
        shot = ctx.shot
        want = set(shot.characters)
        have = set(cell.get("characters", []))
        if dimension == "identity":
            missing, extra = sorted(want - have), sorted(have - want)
            score = _band(max(len(missing), len(extra)))
            note = "identities match" if score == 10 else f"missing {missing}; unexpected {extra}"
            return score, note
        if dimension == "quality":
            diff = abs(len(have) - len(want))
            note = f"{len(have)} characters rendered, {len(want)} expected"
            return _band(diff), note
        if dimension == "environment":
            ok = cell.get("scene") == shot.scene_id
            return (10.0 if ok else 4.0), f"scene tag {cell.get('scene')!r}, expected {shot.scene_id!r}"
        if dimension == "plot":
            reference = _tokens(shot.one_shot_prompt)
            missing = reference - _tokens(cell.get("plot", ""))
            note = "plot matches" if not missing else f"{len(missing)} plot tokens missing"
            return _band(len(missing)), note
        raise ValueError(dimension)

    def judge(self, content, context: JudgeContext, dimension: str,
              threshold: float = 7.0) -> JudgeVerdict:
        self._record(("judge", dimension))
        samples = sidecar_cells(content)
        if not samples:
            return JudgeVerdict.scored(dimension, 0.0, threshold, "no readable content")
        worst, note, index = 11.0, "", 0
        for i, cell in enumerate(samples):
            score, why = self._score_sample(cell, context, dimension)
            if score < worst:
                worst, note, index = score, why, i
        if len(samples) > 1 and worst < 10:
            note = f"sample {index}: {note}"
        return JudgeVerdict.scored(dimension, worst, threshold, note)

    def compare_identity(self, region: Region, portrait) -> float:
        self._record(("identity", str(portrait)))
        if not self.identity_available:
            raise BackendUnavailable("mock identity path disabled")
        want = region_tags(Region(portrait)) if not isinstance(portrait, Region) else region_tags(portrait)
        want = {t for t in want if t.startswith("@")}
        if not want:
            raise BackendUnavailable(f"portrait {portrait} carries no identity tags")
        have = region_tags(region)
        return 10.0 if want <= have else 0.0

    def score_plot(self, candidate: str, reference: str) -> float:
        self._record(("plot",))
        a, b = _tokens(candidate), _tokens(reference)
        if not a and not b:
            return 10.0
        return round(10.0 * len(a & b) / len(a | b), 4)

    def judge_group(self, items, dimension: str) -> float:
        scores = [self.judge(content, ctx, dimension).score for content, ctx in items]
        return sum(scores) / len(scores)


class MockEmbed(_Counting):
    """Jaccard overlap of region tag sets."""

    def __init__(self, world: MockWorld | None = None):
        super().__init__()
        self.world = world or MockWorld()

    def embed_similarity(self, a: Region, b: Region) -> float:
        self._record(("embed",))
        if not isinstance(a, Region):
            a = Region(a)
        if not isinstance(b, Region):
            b = Region(b)
        ta, tb = region_tags(a), region_tags(b)
        if not ta and not tb:
            return 1.0 if a == b else 0.0
        return len(ta & tb) / len(ta | tb)


@dataclass
class Flaky:
    """Fault-injection wrapper: the first ``failures`` calls raise TransportError."""

    inner: object
    failures: int = 1
    seen: int = field(default=0, init=False)

    def __getattr__(self, name):
        attr = getattr(self.inner, name)
        if not callable(attr):
            return attr

        def call(*args, **kwargs):
            self.seen += 1
            if self.seen <= self.failures:
                raise TransportError(f"injected transport failure {self.seen}")
            return attr(*args, **kwargs)

        return call


def render_portrait(character_id: str, path, width: int = 96, height: int = 128) -> Path:
    """A tagged stand-in portrait for offline runs."""
    cell = {"row": 0, "col": 0, "scene": "", "characters": [character_id], "attempt": 1, "plot": ""}
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_png(render_cells(width, height, [cell])))
    write_sidecar(out, {"cells": [cell]})
    return out


def mock_backends(world: MockWorld, configs: dict | None = None):
    from .base import BackendConfig, Backends, Guarded

    configs = configs or {}

    def wrap(kind, inner):
        return Guarded(inner, configs.get(kind) or BackendConfig(kind))

    return Backends(
        understanding=wrap("understanding", MockUnderstanding(world)),
        image_gen=wrap("image_gen", MockImageGen(world)),
        video_gen=wrap("video_gen", MockVideoGen(world)),
        judge=wrap("judge", MockJudge(world)),
        embed=wrap("embed", MockEmbed(world)),
    )
