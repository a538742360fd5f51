"""Visual reference registry and per-shot memory allocation.

The registry holds three kinds of anchors: one environment image per scene
(per style label), any number of target portraits per character, and one
clothing reference per (character, scene) pair described by a WardrobeDNA
record. ``allocate`` turns a shot plus the registry into the minimal
conditioning bundle (a MemoryPackage) handed to every generation call.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import (
    AspectRatioMismatch,
    InvalidDNA,
    MissingAnchor,
    UnknownCharacter,
    UnknownScene,
)
from .images import ImageRef, copy_with_sidecar, image_size
from .screenplay import ROLE_CLASSES, Screenplay, ValidationReport

log = logging.getLogger(__name__)

PORTRAIT_CAP = 5
ASPECT_TOL = 1e-3
DEFAULT_STYLE = "default"
REF_DIR = "reference_images"

HEX_RE = re.compile(r"^#?[0-9A-Fa-f]{6}$")


# ---------------------------------------------------------------------------
# wardrobe DNA


@dataclass(frozen=True)
class ColorSpec:
    pantone_tcx: str
    hex: str


@dataclass(frozen=True)
class FabricSpec:
    material: str = ""
    weave: str = ""
    weight: str = ""
    opacity: str = ""
    finish: str = ""
    stretch: str = ""
    texture: str = ""
    drape: str = ""


@dataclass(frozen=True)
class CutFit:
    top: str = ""
    bottom: str = ""


@dataclass(frozen=True)
class PatternSpec:
    type: str = ""
    size: str = ""
    arrangement: str = ""
    direction: str = ""
    density: str = ""


@dataclass(frozen=True)
class Accessories:
    footwear: str = ""
    jewelry: str = ""
    bags: str = ""


@dataclass(frozen=True)
class Styling:
    layering: str = ""
    tucking: str = ""
    sleeve_state: str = ""
    overall_style: str = ""


DNA_DIMENSIONS = ("color", "fabric", "cut_fit", "details", "pattern", "accessories", "styling")


@dataclass(frozen=True)
class WardrobeDNA:
    color: ColorSpec
    fabric: FabricSpec = FabricSpec()
    cut_fit: CutFit = CutFit()
    details: tuple[str, ...] = ()
    pattern: PatternSpec = PatternSpec()
    accessories: Accessories = Accessories()
    styling: Styling = Styling()

    def __post_init__(self):
        if not HEX_RE.match(self.color.hex):
            raise InvalidDNA(f"color.hex {self.color.hex!r} is not a 6-digit hex code")

    @classmethod
    def from_dict(cls, raw: Any) -> WardrobeDNA:
        if not isinstance(raw, dict):
            raise InvalidDNA("wardrobe DNA must be an object")
        keys = set(raw)
        if keys != set(DNA_DIMENSIONS):
            missing = sorted(set(DNA_DIMENSIONS) - keys)
            extra = sorted(keys - set(DNA_DIMENSIONS))
            raise InvalidDNA(f"expected 7 dimensions; missing={missing} extra={extra}")

        def sub(name, kind):
            part = raw[name]
            if not isinstance(part, dict):
                raise InvalidDNA(f"{name} must be an object")
            try:
                return kind(**{k: str(v) for k, v in part.items()})
            except TypeError as exc:
                raise InvalidDNA(f"{name}: {exc}") from exc

        details = raw["details"]
        if not isinstance(details, list) or not all(isinstance(d, str) for d in details):
            raise InvalidDNA("details must be a list of strings")
        return cls(
            color=sub("color", ColorSpec),
            fabric=sub("fabric", FabricSpec),
            cut_fit=sub("cut_fit", CutFit),
            details=tuple(details),
            pattern=sub("pattern", PatternSpec),
            accessories=sub("accessories", Accessories),
            styling=sub("styling", Styling),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["details"] = list(self.details)
        return d


def _attrs(obj, labels: dict[str, str] | None = None) -> str:
    labels = labels or {}
    parts = []
    for k, v in asdict(obj).items():
        parts.append(f"{labels.get(k, k.replace('_', ' '))} {v or 'unspecified'}")
    return ", ".join(parts)


def wardrobe_clauses(dna: WardrobeDNA) -> list[str]:
    """One clause per dimension, always in the same order."""
    return [
        f"Color: Pantone {dna.color.pantone_tcx} / HEX {dna.color.hex}",
        f"Fabric: {_attrs(dna.fabric)}",
        f"Cut & fit: {_attrs(dna.cut_fit)}",
        f"Details: {', '.join(dna.details) if dna.details else 'none'}",
        f"Pattern: {_attrs(dna.pattern)}",
        f"Accessories: {_attrs(dna.accessories)}",
        f"Styling: {_attrs(dna.styling)}",
    ]


def wardrobe_to_prompt(dna: WardrobeDNA) -> str:
    return "; ".join(wardrobe_clauses(dna))


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class EnvironmentRef:
    id: str
    scene_id: str
    image: ImageRef
    style_label: str = DEFAULT_STYLE


@dataclass(frozen=True)
class PortraitRef:
    id: str
    character_id: str
    image: ImageRef
    target_name: str


@dataclass(frozen=True)
class ClothingRef:
    id: str
    character_id: str
    scene_id: str
    dna: WardrobeDNA
    image: ImageRef


def char_stem(character_id: str) -> str:
    return character_id.lstrip("@")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_").lower() or "style"


class ReferenceRegistry:
    """Environment, portrait and clothing anchors for one screenplay.

    Registered images are copied under ``<root>/reference_images`` with
    canonical names; stored paths are relative to ``root``.
    """

    def __init__(self, screenplay: Screenplay, root, copy_mode: bool = False):
        self.screenplay = screenplay
        self.root = Path(root)
        self.copy_mode = copy_mode
        self._env: dict[tuple[str, str], EnvironmentRef] = {}
        self._portraits: dict[str, list[PortraitRef]] = {}
        self._clothing: dict[tuple[str, str], ClothingRef] = {}
        self._lock = threading.Lock()

    # -- helpers

    def _store(self, image, name: str) -> ImageRef:
        width, height = image_size(image)
        rel = f"{REF_DIR}/{name}"
        copy_with_sidecar(image, self.root / rel)
        return ImageRef(rel, width, height)

    def _require_scene(self, scene_id: str) -> None:
        if not self.screenplay.has_scene(scene_id):
            raise UnknownScene(scene_id)

    def _require_character(self, character_id: str) -> None:
        if not self.screenplay.has_character(character_id):
            raise UnknownCharacter(character_id)

    def resolve(self, rel_path: str) -> Path:
        return self.root / rel_path

    # -- registration

    def register_environment(self, scene_id: str, image, style_label: str = DEFAULT_STYLE) -> str:
        self._require_scene(scene_id)
        width, height = image_size(image)
        want = self.screenplay.metadata.ratio
        if abs(width / height - want) > ASPECT_TOL:
            raise AspectRatioMismatch(
                f"{width}x{height} does not match screenplay ratio {want:.6f}"
            )
        if style_label == DEFAULT_STYLE:
            name = f"{scene_id}_environment.png"
        else:
            name = f"{scene_id}_{_slug(style_label)}_environment.png"
        with self._lock:
            ref = EnvironmentRef(
                f"env/{scene_id}/{style_label}", scene_id, self._store(image, name), style_label
            )
            self._env[(scene_id, style_label)] = ref
        return ref.id

    def register_portrait(self, character_id: str, image, target_name: str) -> str:
        self._require_character(character_id)
        image_size(image)
        with self._lock:
            existing = self._portraits.setdefault(character_id, [])
            n = len(existing) + 1
            stem = char_stem(character_id)
            name = f"{stem}_portrait.png" if n == 1 else f"{stem}_portrait_{n}.png"
            ref = PortraitRef(
                f"portrait/{character_id}/{n}", character_id, self._store(image, name), target_name
            )
            existing.append(ref)
        return ref.id

    def register_clothing(self, character_id: str, scene_id: str, dna, image) -> str:
        self._require_character(character_id)
        self._require_scene(scene_id)
        if not isinstance(dna, WardrobeDNA):
            dna = WardrobeDNA.from_dict(dna)
        name = f"{scene_id}_{char_stem(character_id)}_clothing.png"
        with self._lock:
            ref = ClothingRef(
                f"clothing/{character_id}/{scene_id}", character_id, scene_id, dna,
                self._store(image, name),
            )
            self._clothing[(character_id, scene_id)] = ref
        return ref.id

    # -- lookup

    def environment(self, scene_id: str, style_label: str = DEFAULT_STYLE) -> EnvironmentRef | None:
        return self._env.get((scene_id, style_label))

    def portraits(self, character_id: str) -> list[PortraitRef]:
        return list(self._portraits.get(character_id, ()))

    def clothing(self, character_id: str, scene_id: str) -> ClothingRef | None:
        return self._clothing.get((character_id, scene_id))

    @property
    def environments(self) -> list[EnvironmentRef]:
        return list(self._env.values())

    @property
    def all_portraits(self) -> list[PortraitRef]:
        return [p for refs in self._portraits.values() for p in refs]

    @property
    def all_clothing(self) -> list[ClothingRef]:
        return list(self._clothing.values())

    def __len__(self) -> int:
        return len(self._env) + len(self.all_portraits) + len(self._clothing)

    # -- persistence

    def to_index(self) -> dict:
        def img(ref: ImageRef) -> dict:
            return {"path": ref.path, "width": ref.width, "height": ref.height}

        return {
            "v": 1,
            "copy_mode": self.copy_mode,
            "environments": [
                {"id": e.id, "scene_id": e.scene_id, "style_label": e.style_label, **img(e.image)}
                for e in sorted(self._env.values(), key=lambda e: e.id)
            ],
            "portraits": [
                {"id": p.id, "character_id": p.character_id, "target_name": p.target_name,
                 **img(p.image)}
                for p in self.all_portraits
            ],
            "clothing": [
                {"id": c.id, "character_id": c.character_id, "scene_id": c.scene_id,
                 "dna": c.dna.to_dict(), **img(c.image)}
                for c in sorted(self._clothing.values(), key=lambda c: c.id)
            ],
        }

    def save(self) -> Path:
        path = self.root / REF_DIR / "index.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_index(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, screenplay: Screenplay, root) -> ReferenceRegistry:
        root = Path(root)
        index = json.loads((root / REF_DIR / "index.json").read_text())
        reg = cls(screenplay, root, copy_mode=bool(index.get("copy_mode", False)))

        def img(d: dict) -> ImageRef:
            return ImageRef(d["path"], d["width"], d["height"])

        for e in index["environments"]:
            reg._env[(e["scene_id"], e["style_label"])] = EnvironmentRef(
                e["id"], e["scene_id"], img(e), e["style_label"]
            )
        for p in index["portraits"]:
            reg._portraits.setdefault(p["character_id"], []).append(
                PortraitRef(p["id"], p["character_id"], img(p), p["target_name"])
            )
        for c in index["clothing"]:
            reg._clothing[(c["character_id"], c["scene_id"])] = ClothingRef(
                c["id"], c["character_id"], c["scene_id"], WardrobeDNA.from_dict(c["dna"]), img(c)
            )
        return reg


# ---------------------------------------------------------------------------
# memory packages


@dataclass(frozen=True)
class MemoryPackage:
    shot_id: str
    major_scene: str
    characters: tuple[str, ...]
    environment_ref: str | None
    clothing_refs: tuple[str, ...]
    character_refs: tuple[str, ...]
    visual_dna: dict
    narrative: dict
    character_mappings: dict
    style_prompt: str
    generation_feedback: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "shot_id": self.shot_id,
            "major_scene": self.major_scene,
            "characters": list(self.characters),
            "environment_ref": self.environment_ref,
            "clothing_refs": list(self.clothing_refs),
            "character_refs": list(self.character_refs),
            "visual_dna": dict(self.visual_dna),
            "narrative": dict(self.narrative),
            "character_mappings": {k: dict(v) for k, v in self.character_mappings.items()},
            "style_prompt": self.style_prompt,
            "generation_feedback": list(self.generation_feedback),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MemoryPackage:
        return cls(
            shot_id=d["shot_id"],
            major_scene=d["major_scene"],
            characters=tuple(d["characters"]),
            environment_ref=d.get("environment_ref"),
            clothing_refs=tuple(d.get("clothing_refs", ())),
            character_refs=tuple(d.get("character_refs", ())),
            visual_dna=dict(d.get("visual_dna", {})),
            narrative=dict(d.get("narrative", {})),
            character_mappings={k: dict(v) for k, v in d.get("character_mappings", {}).items()},
            style_prompt=d.get("style_prompt", ""),
            generation_feedback=tuple(d.get("generation_feedback", ())),
        )

    def with_feedback(self, *entries: str) -> MemoryPackage:
        return replace(self, generation_feedback=self.generation_feedback + tuple(entries))


def role_rank(sp: Screenplay, character_id: str) -> tuple[int, str]:
    profile = sp.character(character_id)
    role = profile.role_classification if profile else None
    rank = ROLE_CLASSES.index(role) if role in ROLE_CLASSES else len(ROLE_CLASSES)
    return rank, character_id


def select_portraits(
    sp: Screenplay, registry: ReferenceRegistry, characters, cap: int = PORTRAIT_CAP
) -> list[PortraitRef]:
    """Round-robin over ranked characters: every character's first portrait
    before anyone's second, stopping at ``cap``."""
    ranked = sorted(set(characters), key=lambda c: role_rank(sp, c))
    queues = [registry.portraits(c) for c in ranked]
    chosen: list[PortraitRef] = []
    depth = 0
    while len(chosen) < cap and any(depth < len(q) for q in queues):
        for q in queues:
            if depth < len(q):
                chosen.append(q[depth])
                if len(chosen) == cap:
                    break
        depth += 1
    return chosen


def _needs_portrait(sp: Screenplay, character_id: str) -> bool:
    profile = sp.character(character_id)
    return profile is None or profile.role_classification != "background"


def _clothing_summary(sp: Screenplay, registry, character_id: str, scene_id: str) -> str:
    ref = registry.clothing(character_id, scene_id)
    if ref is not None:
        return wardrobe_to_prompt(ref.dna)
    profile = sp.character(character_id)
    if profile is None:
        return ""
    for v in profile.clothing_variations:
        if clothing_label_matches(sp, v.scene, scene_id):
            return v.description
    return ""


def clothing_label_matches(sp: Screenplay, label: str, scene_id: str) -> bool:
    """Clothing variations name scenes either by id or as ``Scene N`` (1-based)."""
    if label == scene_id:
        return True
    m = re.fullmatch(r"\s*scene\s+(\d+)\s*", label, flags=re.IGNORECASE)
    if not m:
        return False
    idx = int(m.group(1)) - 1
    scenes = sp.major_scenes
    return 0 <= idx < len(scenes) and scenes[idx].scene_id == scene_id


def _build_package(
    sp: Screenplay,
    shot,
    registry: ReferenceRegistry,
    style_prompt: str,
    characters: list[str],
    style_label: str,
    findings: list | None,
) -> MemoryPackage:
    env = registry.environment(shot.scene_id, style_label)
    if env is None:
        raise MissingAnchor("environment", shot.scene_id)
    for cid in characters:
        if _needs_portrait(sp, cid) and not registry.portraits(cid):
            raise MissingAnchor("portrait", cid)

    ranked = sorted(characters, key=lambda c: role_rank(sp, c))
    clothing = []
    for cid in ranked:
        ref = registry.clothing(cid, shot.scene_id)
        if ref is not None:
            clothing.append(ref.image.path)
        elif not registry.copy_mode and role_rank(sp, cid)[0] == 0:
            msg = f"no clothing reference for {cid} in {shot.scene_id}"
            log.warning(msg)
            if findings is not None:
                findings.append({"severity": "warning", "code": "missing clothing", "message": msg})

    portraits = select_portraits(sp, registry, characters)
    first_portrait: dict[str, PortraitRef] = {}
    for p in portraits:
        first_portrait.setdefault(p.character_id, p)

    mappings = {}
    for cid in ranked:
        known = registry.portraits(cid)
        profile = sp.character(cid)
        fallback_name = profile.primary_name if profile else cid
        mappings[cid] = {
            "target_name": known[0].target_name if known else fallback_name,
            "clothing": _clothing_summary(sp, registry, cid, shot.scene_id),
            "portrait": first_portrait[cid].image.path if cid in first_portrait else None,
        }

    return MemoryPackage(
        shot_id=shot.shot_id,
        major_scene=shot.scene_id,
        characters=tuple(characters),
        environment_ref=env.image.path,
        clothing_refs=tuple(clothing),
        character_refs=tuple(p.image.path for p in portraits),
        visual_dna={
            "lighting": shot.lighting_setup,
            "color": shot.color_grading,
            "mood": shot.mood_atmosphere,
        },
        narrative={
            "action": shot.subject_movement.action,
            "camera_movement": shot.camera_movement,
            "language_prompt": shot.one_shot_prompt,
            "i2v_prompt": shot.i2v_prompt,
        },
        character_mappings=mappings,
        style_prompt=style_prompt,
        generation_feedback=(),
    )


def allocate(
    sp: Screenplay,
    shot_id: str,
    registry: ReferenceRegistry,
    style_prompt: str,
    *,
    style_label: str = DEFAULT_STYLE,
    findings: list | None = None,
) -> MemoryPackage:
    """Minimal conditioning context for one shot.

    Raises MissingAnchor when the scene has no environment image or a
    non-background character has no portrait. Missing clothing for a main
    character is only a warning (appended to ``findings`` if given).
    """
    shot = sp.shot(shot_id)
    characters = list(dict.fromkeys(shot.characters))
    return _build_package(sp, shot, registry, style_prompt, characters, style_label, findings)


def allocate_global(
    sp: Screenplay,
    shot_id: str,
    registry: ReferenceRegistry,
    style_prompt: str,
    *,
    style_label: str = DEFAULT_STYLE,
    findings: list | None = None,
) -> MemoryPackage:
    """Ablation: every roster character goes into every package."""
    shot = sp.shot(shot_id)
    characters = [c.character_id for c in sp.characters]
    return _build_package(sp, shot, registry, style_prompt, characters, style_label, findings)


def order_references(pkg: MemoryPackage) -> list[str]:
    head = [pkg.environment_ref] if pkg.environment_ref else []
    return head + list(pkg.clothing_refs) + list(pkg.character_refs)


def validate_package(pkg: MemoryPackage, sp: Screenplay) -> ValidationReport:
    report = ValidationReport()
    if pkg.shot_id not in sp.shot_ids:
        report.error("/shot_id", "unknown shot", pkg.shot_id)
        return report
    shot = sp.shot(pkg.shot_id)
    want, have = set(shot.characters), set(pkg.characters)
    if have - want:
        report.error("/characters", "non-minimal context", ", ".join(sorted(have - want)))
    if want - have:
        report.error("/characters", "insufficient context", ", ".join(sorted(want - have)))
    if len(pkg.character_refs) > PORTRAIT_CAP:
        report.error(
            "/character_refs", "portrait cap", f"{len(pkg.character_refs)} > {PORTRAIT_CAP}"
        )
    if pkg.major_scene != shot.scene_id:
        report.error("/major_scene", "scene mismatch", f"{pkg.major_scene} != {shot.scene_id}")
    if pkg.environment_ref:
        name = Path(pkg.environment_ref).name
        if not (name.startswith(f"{shot.scene_id}_") and name.endswith("_environment.png")):
            report.error("/environment_ref", "foreign environment", pkg.environment_ref)
    return report
