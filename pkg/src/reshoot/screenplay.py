"""The scene-aware JSON screenplay: types, parsing, validation, serialization.

Field names on the wire follow the understanding-agent output format exactly
(``I2V_Prompt``, ``Language_to_One_Shot_Prompt``, nested ``names`` etc.).
Shots live in a flat top-level ``shots`` array and carry an explicit
``characters`` list. Keys the parser does not know are kept in ``extras`` so a
parse/serialize round trip loses nothing.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable

from .errors import MalformedJson, SchemaViolation, UnknownScene, UnknownShot

PRIMARY_SOURCES = ("on_screen_label", "dialogue", "visual")
ROLE_CLASSES = ("main", "supporting", "background")

CHARACTER_ID_RE = re.compile(r"^@character_\w+$")
CHARACTER_TOKEN_RE = re.compile(r"@character_\w+")
SCENE_ID_RE = re.compile(r"^major_scene_\w+$")
TIMESTAMP_RE = re.compile(r"^(\d{2,}):([0-5]\d):([0-5]\d)(?:\.(\d{1,3}))?$")

RATIO_TOL = 1e-4
LABEL_TOL = 1e-3
DURATION_TOL = 1e-3


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class VideoMetadata:
    width: int
    height: int
    aspect_ratio_label: str
    ratio_decimal: float
    total_scenes: int
    extras: dict = field(default_factory=dict)  # unknown keys of aspect_ratio

    @property
    def ratio(self) -> float:
        return self.width / self.height


@dataclass(frozen=True)
class ClothingVariation:
    scene: str
    description: str
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CharacterProfile:
    character_id: str
    primary_name: str
    primary_source: str = "visual"
    aliases: tuple[str, ...] = ()
    titles: tuple[str, ...] = ()
    roles: tuple[str, ...] = ()
    physical_attributes: str = ""
    hair: str = ""
    face: str = ""
    clothing_variations: tuple[ClothingVariation, ...] = ()
    first_appearance: float = 0.0
    role_classification: str = "main"
    names_extras: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MajorScene:
    scene_id: str
    start_time: float
    end_time: float
    duration: float
    location_type: str = ""
    setting_description: str = ""
    lighting_style: str = ""
    color_palette: str = ""
    environment_description: str = ""
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Dialogue:
    timestamp: str
    text: str
    extras: dict = field(default_factory=dict)

    @property
    def seconds(self) -> float:
        return parse_timestamp(self.timestamp)


@dataclass(frozen=True)
class SubjectMovement:
    action: str = ""
    dialogue: Dialogue | None = None
    extras: dict = field(default_factory=dict)


SHOT_TEXT_FIELDS = (
    "lighting_setup",
    "color_grading",
    "composition",
    "mood_atmosphere",
    "shot_size",
    "camera_angle",
    "camera_height",
    "horizontal_angle",
    "focal_length",
    "depth_of_field",
    "tech_device",
    "camera_movement",
)


@dataclass(frozen=True)
class Shot:
    shot_id: str
    scene_id: str
    characters: tuple[str, ...]
    i2v_prompt: str
    one_shot_prompt: str
    lighting_setup: str = ""
    color_grading: str = ""
    composition: str = ""
    mood_atmosphere: str = ""
    shot_size: str = ""
    camera_angle: str = ""
    camera_height: str = ""
    horizontal_angle: str = ""
    focal_length: str = ""
    depth_of_field: str = ""
    tech_device: str = ""
    camera_movement: str = ""
    subject_movement: SubjectMovement = field(default_factory=SubjectMovement)
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Screenplay:
    video_file: str
    metadata: VideoMetadata
    characters: tuple[CharacterProfile, ...]
    major_scenes: tuple[MajorScene, ...]
    shots: tuple[Shot, ...]
    metadata_extras: dict = field(default_factory=dict)  # unknown keys of video_metadata
    extras: dict = field(default_factory=dict)

    @cached_property
    def _scene_index(self) -> dict[str, MajorScene]:
        return {s.scene_id: s for s in self.major_scenes}

    @cached_property
    def _shot_index(self) -> dict[str, Shot]:
        return {s.shot_id: s for s in self.shots}

    @cached_property
    def _character_index(self) -> dict[str, CharacterProfile]:
        return {c.character_id: c for c in self.characters}

    def scene(self, scene_id: str) -> MajorScene:
        try:
            return self._scene_index[scene_id]
        except KeyError:
            raise UnknownScene(scene_id) from None

    def shot(self, shot_id: str) -> Shot:
        try:
            return self._shot_index[shot_id]
        except KeyError:
            raise UnknownShot(shot_id) from None

    def character(self, character_id: str) -> CharacterProfile | None:
        return self._character_index.get(character_id)

    def has_scene(self, scene_id: str) -> bool:
        return scene_id in self._scene_index

    def has_character(self, character_id: str) -> bool:
        return character_id in self._character_index

    @property
    def shot_ids(self) -> list[str]:
        return [s.shot_id for s in self.shots]


def parse_timestamp(text: str) -> float:
    """``HH:MM:SS.mmm`` to seconds."""
    m = TIMESTAMP_RE.match(text)
    if not m:
        raise ValueError(f"not a HH:MM:SS.mmm timestamp: {text!r}")
    hh, mm, ss, frac = m.groups()
    millis = int((frac or "0").ljust(3, "0"))
    return int(hh) * 3600 + int(mm) * 60 + int(ss) + millis / 1000.0


# ---------------------------------------------------------------------------
# parsing


def _join(path: str, key: str | int) -> str:
    return f"{path}/{key}"


def _obj(value: Any, path: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaViolation(path, "expected an object")
    return value


def _get(obj: dict, key: str, path: str, kind, *, default=..., convert=None):
    p = _join(path, key)
    if key not in obj:
        if default is ...:
            raise SchemaViolation(p, "required field absent")
        return default
    value = obj[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaViolation(p, "expected a number")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise SchemaViolation(p, "expected an integer")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise SchemaViolation(p, "expected a string")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise SchemaViolation(p, "expected an array")
        return value
    if kind is dict:
        return _obj(value, p)
    raise TypeError(kind)


def _str_list(values: list, path: str) -> tuple[str, ...]:
    out = []
    for i, v in enumerate(values):
        if not isinstance(v, str):
            raise SchemaViolation(_join(path, i), "expected a string")
        out.append(v)
    return tuple(out)


def _extras(obj: dict, known: Iterable[str]) -> dict:
    known = set(known)
    return {k: v for k, v in obj.items() if k not in known}


def _seconds(value: Any, path: str) -> float:
    # the understanding output writes "0.0s"; plain numbers are accepted too
    if isinstance(value, bool):
        raise SchemaViolation(path, "expected seconds")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("s"):
            text = text[:-1]
        try:
            return float(text)
        except ValueError:
            pass
    raise SchemaViolation(path, "expected seconds")


_AR_KEYS = ("width", "height", "aspect_ratio", "ratio_decimal")


def parse_metadata(doc: dict, path: str = "") -> tuple[VideoMetadata, dict]:
    vm = _get(doc, "video_metadata", path, dict)
    vm_path = _join(path, "video_metadata")
    ar = _get(vm, "aspect_ratio", vm_path, dict)
    ar_path = _join(vm_path, "aspect_ratio")
    width = _get(ar, "width", ar_path, int)
    height = _get(ar, "height", ar_path, int)
    label = _get(ar, "aspect_ratio", ar_path, str, default="")
    default_ratio = width / height if height else 0.0
    ratio = _get(ar, "ratio_decimal", ar_path, float, default=round(default_ratio, 6))
    total = _get(doc, "total_scenes", path, int, default=-1)
    meta = VideoMetadata(width, height, label, ratio, total, _extras(ar, _AR_KEYS))
    return meta, _extras(vm, ("aspect_ratio",))


_NAME_KEYS = ("primary_name", "primary_source", "aliases", "titles", "roles")
_CHAR_KEYS = (
    "character_id",
    "names",
    "physical_attributes",
    "hair",
    "face",
    "clothing_variations",
    "first_appearance",
    "role_classification",
)


def parse_character(obj: Any, path: str = "") -> CharacterProfile:
    obj = _obj(obj, path)
    cid = _get(obj, "character_id", path, str)
    names = _get(obj, "names", path, dict)
    npath = _join(path, "names")
    variations = []
    vpath = _join(path, "clothing_variations")
    for i, raw in enumerate(_get(obj, "clothing_variations", path, list, default=[])):
        p = _join(vpath, i)
        raw = _obj(raw, p)
        variations.append(
            ClothingVariation(
                scene=_get(raw, "scene", p, str),
                description=_get(raw, "description", p, str, default=""),
                extras=_extras(raw, ("scene", "description")),
            )
        )
    first = obj.get("first_appearance", 0.0)
    return CharacterProfile(
        character_id=cid,
        primary_name=_get(names, "primary_name", npath, str),
        primary_source=_get(names, "primary_source", npath, str, default="visual"),
        aliases=_str_list(_get(names, "aliases", npath, list, default=[]), _join(npath, "aliases")),
        titles=_str_list(_get(names, "titles", npath, list, default=[]), _join(npath, "titles")),
        roles=_str_list(_get(names, "roles", npath, list, default=[]), _join(npath, "roles")),
        physical_attributes=_get(obj, "physical_attributes", path, str, default=""),
        hair=_get(obj, "hair", path, str, default=""),
        face=_get(obj, "face", path, str, default=""),
        clothing_variations=tuple(variations),
        first_appearance=_seconds(first, _join(path, "first_appearance")),
        role_classification=_get(obj, "role_classification", path, str),
        names_extras=_extras(names, _NAME_KEYS),
        extras=_extras(obj, _CHAR_KEYS),
    )


_SCENE_TEXT = (
    "location_type",
    "setting_description",
    "lighting_style",
    "color_palette",
    "environment_description",
)
_SCENE_KEYS = ("scene_id", "start_time", "end_time", "duration") + _SCENE_TEXT


def parse_scene(obj: Any, path: str = "") -> MajorScene:
    obj = _obj(obj, path)
    start = _get(obj, "start_time", path, float)
    end = _get(obj, "end_time", path, float)
    return MajorScene(
        scene_id=_get(obj, "scene_id", path, str),
        start_time=start,
        end_time=end,
        duration=_get(obj, "duration", path, float, default=end - start),
        **{k: _get(obj, k, path, str, default="") for k in _SCENE_TEXT},
        extras=_extras(obj, _SCENE_KEYS),
    )


_SHOT_KEYS = (
    ("shot_id", "scene_id", "characters")
    + SHOT_TEXT_FIELDS
    + ("subject_movement", "I2V_Prompt", "Language_to_One_Shot_Prompt")
)


def parse_shot(obj: Any, path: str = "") -> Shot:
    obj = _obj(obj, path)
    raw_id = obj.get("shot_id")
    if isinstance(raw_id, int) and not isinstance(raw_id, bool):
        shot_id = str(raw_id)
    else:
        shot_id = _get(obj, "shot_id", path, str)
    movement = SubjectMovement()
    if "subject_movement" in obj:
        mpath = _join(path, "subject_movement")
        sm = _get(obj, "subject_movement", path, dict)
        dialogue = None
        if sm.get("dialogue") is not None:
            dpath = _join(mpath, "dialogue")
            d = _get(sm, "dialogue", mpath, dict)
            dialogue = Dialogue(
                timestamp=_get(d, "timestamp", dpath, str),
                text=_get(d, "text", dpath, str, default=""),
                extras=_extras(d, ("timestamp", "text")),
            )
        movement = SubjectMovement(
            action=_get(sm, "action", mpath, str, default=""),
            dialogue=dialogue,
            extras=_extras(sm, ("action", "dialogue")),
        )
    return Shot(
        shot_id=shot_id,
        scene_id=_get(obj, "scene_id", path, str),
        characters=_str_list(_get(obj, "characters", path, list), _join(path, "characters")),
        i2v_prompt=_get(obj, "I2V_Prompt", path, str),
        one_shot_prompt=_get(obj, "Language_to_One_Shot_Prompt", path, str),
        **{k: _get(obj, k, path, str, default="") for k in SHOT_TEXT_FIELDS},
        subject_movement=movement,
        extras=_extras(obj, _SHOT_KEYS),
    )


_TOP_KEYS = ("video_file", "video_metadata", "total_scenes", "characters", "major_scenes", "shots")


def screenplay_from_dict(doc: Any) -> Screenplay:
    doc = _obj(doc, "")
    meta, meta_extras = parse_metadata(doc)
    characters = tuple(
        parse_character(c, f"/characters/{i}")
        for i, c in enumerate(_get(doc, "characters", "", list))
    )
    scenes = [
        parse_scene(s, f"/major_scenes/{i}")
        for i, s in enumerate(_get(doc, "major_scenes", "", list))
    ]
    # stable: equal start times keep document order
    scenes.sort(key=lambda s: s.start_time)
    shots = tuple(
        parse_shot(s, f"/shots/{i}") for i, s in enumerate(_get(doc, "shots", "", list))
    )
    if meta.total_scenes < 0:
        meta = VideoMetadata(
            meta.width, meta.height, meta.aspect_ratio_label, meta.ratio_decimal,
            len(scenes), meta.extras,
        )
    return Screenplay(
        video_file=_get(doc, "video_file", "", str, default=""),
        metadata=meta,
        characters=characters,
        major_scenes=tuple(scenes),
        shots=shots,
        metadata_extras=meta_extras,
        extras=_extras(doc, _TOP_KEYS),
    )


def parse_screenplay(document: str | bytes) -> Screenplay:
    try:
        doc = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc
    return screenplay_from_dict(doc)


# ---------------------------------------------------------------------------
# serialization


def _seconds_text(value: float) -> str:
    return f"{value!r}s"


def metadata_to_dict(sp: Screenplay) -> dict:
    m = sp.metadata
    return {
        "aspect_ratio": {
            "width": m.width,
            "height": m.height,
            "aspect_ratio": m.aspect_ratio_label,
            "ratio_decimal": m.ratio_decimal,
            **m.extras,
        },
        **sp.metadata_extras,
    }


def character_to_dict(c: CharacterProfile) -> dict:
    return {
        "character_id": c.character_id,
        "names": {
            "primary_name": c.primary_name,
            "primary_source": c.primary_source,
            "aliases": list(c.aliases),
            "titles": list(c.titles),
            "roles": list(c.roles),
            **c.names_extras,
        },
        "physical_attributes": c.physical_attributes,
        "hair": c.hair,
        "face": c.face,
        "clothing_variations": [
            {"scene": v.scene, "description": v.description, **v.extras}
            for v in c.clothing_variations
        ],
        "first_appearance": _seconds_text(c.first_appearance),
        "role_classification": c.role_classification,
        **c.extras,
    }


def scene_to_dict(s: MajorScene) -> dict:
    return {
        "scene_id": s.scene_id,
        "start_time": s.start_time,
        "end_time": s.end_time,
        "duration": s.duration,
        **{k: getattr(s, k) for k in _SCENE_TEXT},
        **s.extras,
    }


def shot_to_dict(s: Shot) -> dict:
    sm = s.subject_movement
    movement: dict[str, Any] = {"action": sm.action}
    if sm.dialogue is not None:
        movement["dialogue"] = {
            "timestamp": sm.dialogue.timestamp,
            "text": sm.dialogue.text,
            **sm.dialogue.extras,
        }
    movement.update(sm.extras)
    return {
        "shot_id": s.shot_id,
        "scene_id": s.scene_id,
        "characters": list(s.characters),
        **{k: getattr(s, k) for k in SHOT_TEXT_FIELDS},
        "subject_movement": movement,
        "I2V_Prompt": s.i2v_prompt,
        "Language_to_One_Shot_Prompt": s.one_shot_prompt,
        **s.extras,
    }


def screenplay_to_dict(sp: Screenplay) -> dict:
    return {
        "video_file": sp.video_file,
        "video_metadata": metadata_to_dict(sp),
        "total_scenes": sp.metadata.total_scenes,
        "characters": [character_to_dict(c) for c in sp.characters],
        "major_scenes": [scene_to_dict(s) for s in sp.major_scenes],
        "shots": [shot_to_dict(s) for s in sp.shots],
        **sp.extras,
    }


def serialize_screenplay(sp: Screenplay) -> str:
    return json.dumps(screenplay_to_dict(sp), indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    path: str
    severity: str  # "error" | "warning"
    code: str
    message: str = ""


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    def error(self, path: str, code: str, message: str = "") -> None:
        self.findings.append(Finding(path, "error", code, message))

    def warning(self, path: str, code: str, message: str = "") -> None:
        self.findings.append(Finding(path, "warning", code, message))

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> set[str]:
        return {f.code for f in self.findings}

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "findings": [
                {"path": f.path, "severity": f.severity, "code": f.code, "message": f.message}
                for f in self.findings
            ],
        }


def _validate_metadata(sp: Screenplay, report: ValidationReport) -> None:
    m = sp.metadata
    base = "/video_metadata/aspect_ratio"
    if m.width <= 0 or m.height <= 0:
        report.error(base, "nonpositive dimension", f"{m.width}x{m.height}")
        return
    if not math.isclose(m.ratio_decimal, m.ratio, rel_tol=0.0, abs_tol=RATIO_TOL):
        report.error(
            f"{base}/ratio_decimal", "ratio mismatch",
            f"{m.ratio_decimal} != {m.width}/{m.height}",
        )
    label = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*:\s*(\d+(?:\.\d+)?)\s*", m.aspect_ratio_label)
    if label and float(label.group(2)) > 0:
        labelled = float(label.group(1)) / float(label.group(2))
        if abs(labelled - m.ratio) > LABEL_TOL:
            report.error(f"{base}/aspect_ratio", "aspect label mismatch", m.aspect_ratio_label)
    if m.total_scenes != len(sp.major_scenes):
        report.warning(
            "/total_scenes", "scene count mismatch",
            f"declared {m.total_scenes}, found {len(sp.major_scenes)}",
        )


def _validate_characters(sp: Screenplay, report: ValidationReport) -> None:
    seen: set[str] = set()
    for i, c in enumerate(sp.characters):
        p = f"/characters/{i}"
        if not CHARACTER_ID_RE.match(c.character_id):
            report.error(f"{p}/character_id", "character id format", c.character_id)
        if c.character_id in seen:
            report.error(f"{p}/character_id", "duplicate character id", c.character_id)
        seen.add(c.character_id)
        if not c.first_appearance >= 0:
            report.error(f"{p}/first_appearance", "negative first appearance")
        if c.primary_source not in PRIMARY_SOURCES:
            report.error(f"{p}/names/primary_source", "primary source", c.primary_source)
        if c.role_classification not in ROLE_CLASSES:
            report.error(f"{p}/role_classification", "role classification", c.role_classification)


def _validate_scenes(sp: Screenplay, report: ValidationReport) -> None:
    seen: set[str] = set()
    prev: MajorScene | None = None
    for i, s in enumerate(sp.major_scenes):
        p = f"/major_scenes/{i}"
        if not SCENE_ID_RE.match(s.scene_id):
            report.error(f"{p}/scene_id", "scene id format", s.scene_id)
        if s.scene_id in seen:
            report.error(f"{p}/scene_id", "duplicate scene id", s.scene_id)
        seen.add(s.scene_id)
        if not s.start_time < s.end_time:
            report.error(p, "scene time ordering", f"start {s.start_time} >= end {s.end_time}")
        elif abs(s.duration - (s.end_time - s.start_time)) > DURATION_TOL:
            report.error(f"{p}/duration", "scene duration", f"{s.duration}")
        if prev is not None and s.start_time < prev.end_time:
            report.error(p, "scene overlap", f"{prev.scene_id} overlaps {s.scene_id}")
        if CHARACTER_TOKEN_RE.search(s.environment_description):
            report.error(
                f"{p}/environment_description", "environment contains character",
                "environment descriptions must not name characters",
            )
        if prev is None or s.end_time > prev.end_time:
            prev = s


def _validate_shots(sp: Screenplay, report: ValidationReport) -> None:
    seen: set[str] = set()
    for i, s in enumerate(sp.shots):
        p = f"/shots/{i}"
        if s.shot_id in seen:
            report.error(f"{p}/shot_id", "duplicate shot id", s.shot_id)
        seen.add(s.shot_id)
        if not sp.has_scene(s.scene_id):
            report.error(f"{p}/scene_id", "dangling scene reference", s.scene_id)
        for j, cid in enumerate(s.characters):
            if not sp.has_character(cid):
                report.error(f"{p}/characters/{j}", "dangling character reference", cid)
        if not s.i2v_prompt.strip():
            report.error(f"{p}/I2V_Prompt", "empty prompt")
        if not s.one_shot_prompt.strip():
            report.error(f"{p}/Language_to_One_Shot_Prompt", "empty prompt")
        dialogue = s.subject_movement.dialogue
        if dialogue is not None:
            try:
                parse_timestamp(dialogue.timestamp)
            except ValueError:
                report.error(
                    f"{p}/subject_movement/dialogue/timestamp", "dialogue timestamp",
                    dialogue.timestamp,
                )


def validate_screenplay(sp: Screenplay) -> ValidationReport:
    report = ValidationReport()
    _validate_metadata(sp, report)
    _validate_characters(sp, report)
    _validate_scenes(sp, report)
    _validate_shots(sp, report)
    return report


# ---------------------------------------------------------------------------
# queries


def shots_of_scene(sp: Screenplay, scene_id: str) -> list[Shot]:
    sp.scene(scene_id)
    return [s for s in sp.shots if s.scene_id == scene_id]


def characters_in_shot(sp: Screenplay, shot_id: str) -> frozenset[str]:
    return frozenset(sp.shot(shot_id).characters)


def load_screenplay(path) -> Screenplay:
    with open(path, "rb") as fh:
        return parse_screenplay(fh.read())
