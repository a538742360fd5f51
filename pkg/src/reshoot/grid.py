"""Grid joint synthesis: batch planning, joint prompts, canvas split/recompose."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, HeterogeneousBatch, WrongCount
from .memory import PORTRAIT_CAP, MemoryPackage, order_references
from .screenplay import Shot

TEXT_CLAUSE = "no subtitles, no watermarks, no text overlays"
ASPECT_TOL = 1e-3


@dataclass(frozen=True)
class GridBatch:
    batch_id: str
    shot_ids: tuple[str, ...]
    order: int
    scene_id: str
    character_set: frozenset[str]

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError(f"grid order must be 1, 2 or 3, got {self.order}")
        if len(self.shot_ids) != self.order**2:
            raise ValueError(f"order {self.order} needs {self.order ** 2} shots")

    def cell(self, index: int) -> tuple[int, int]:
        return divmod(index, self.order)

    def to_dict(self) -> dict:
        return {"batch_id": self.batch_id, "order": self.order, "shot_ids": list(self.shot_ids)}


def chunk_sizes(n: int) -> list[int]:
    """Greedy 9s, then 4s, then singletons."""
    sizes = []
    while n >= 9:
        sizes.append(9)
        n -= 9
    while n >= 4:
        sizes.append(4)
        n -= 4
    sizes.extend([1] * n)
    return sizes


def plan_batches(shots: Sequence[Shot]) -> list[GridBatch]:
    """Chunk maximal consecutive runs sharing (scene, exact character set)."""
    runs: list[list[Shot]] = []
    last_key = None
    for shot in shots:
        key = (shot.scene_id, frozenset(shot.characters))
        if runs and key == last_key:
            runs[-1].append(shot)
        else:
            runs.append([shot])
            last_key = key

    batches = []
    for run in runs:
        start = 0
        for size in chunk_sizes(len(run)):
            members = run[start : start + size]
            start += size
            batches.append(
                GridBatch(
                    batch_id=f"b{len(batches):03d}",
                    shot_ids=tuple(s.shot_id for s in members),
                    order=int(round(size**0.5)),
                    scene_id=members[0].scene_id,
                    character_set=frozenset(members[0].characters),
                )
            )
    return batches


def _one_line(text: str) -> str:
    return " ".join(text.split())


def cell_tag(shot_id: str, pkg: MemoryPackage, attempt: int) -> str:
    chars = ",".join(pkg.characters)
    return f"[shot={shot_id}; scene={pkg.major_scene}; characters={chars}; attempt={attempt}]"


def compose_grid_prompt(
    batch: GridBatch,
    packages: Mapping[str, MemoryPackage] | Sequence[MemoryPackage],
    *,
    environment: str = "",
    shots: Mapping[str, Shot] | None = None,
    attempt: int = 1,
    aspect_label: str = "",
) -> tuple[str, list[str]]:
    """One prompt for the whole canvas plus the shared ordered references.

    Cells are enumerated row-major in shot order. ``environment`` is the
    scene's environment description; ``shots`` adds per-cell camera fields
    beyond the package's camera movement.
    """
    if isinstance(packages, Mapping):
        pkgs = [packages[sid] for sid in batch.shot_ids]
    else:
        pkgs = list(packages)
    if len(pkgs) != len(batch.shot_ids):
        raise WrongCount(f"{len(pkgs)} packages for {len(batch.shot_ids)} cells")
    envs = {p.environment_ref for p in pkgs}
    if len(envs) > 1:
        raise HeterogeneousBatch(f"environment refs disagree: {sorted(map(str, envs))}")
    casts = {frozenset(p.characters) for p in pkgs}
    if len(casts) > 1:
        raise HeterogeneousBatch("character sets disagree within batch")

    head = pkgs[0]
    lines = [f"STYLE: {_one_line(head.style_prompt)}"]
    if environment:
        lines.append(f"ENVIRONMENT ({head.major_scene}): {_one_line(environment)}")
    aspect = f" at {aspect_label} aspect ratio" if aspect_label else ""
    if batch.order == 1:
        lines.append(f"LAYOUT: single frame{aspect}")
    else:
        lines.append(
            f"LAYOUT: {batch.order}x{batch.order} grid, row-major, one shot per cell, "
            f"every cell{aspect}, same characters and environment in every cell"
        )
    cast = []
    for cid, m in head.character_mappings.items():
        desc = f"{cid} as {m.get('target_name', cid)}"
        if m.get("clothing"):
            desc += f" wearing {_one_line(m['clothing'])}"
        cast.append(desc)
    if cast:
        lines.append("CHARACTERS: " + "; ".join(cast))

    for i, (sid, pkg) in enumerate(zip(batch.shot_ids, pkgs)):
        r, c = batch.cell(i)
        look = pkg.visual_dna
        camera = [f"movement {pkg.narrative.get('camera_movement', '')}"]
        if shots is not None and sid in shots:
            s = shots[sid]
            camera += [
                f"size {s.shot_size}",
                f"angle {s.camera_angle}",
                f"height {s.camera_height}",
                f"lens {s.focal_length}",
                f"depth of field {s.depth_of_field}",
            ]
        lines.append(
            f"CELL ({r},{c}): {cell_tag(sid, pkg, attempt)} "
            f"{_one_line(pkg.narrative.get('language_prompt', ''))}"
            f" | look: lighting {look.get('lighting', '')}; color {look.get('color', '')}; "
            f"mood {look.get('mood', '')}"
            f" | camera: {', '.join(_one_line(x) for x in camera)}"
        )

    lines.append(f"CONSTRAINTS: keep identities and environment consistent; {TEXT_CLAUSE}")
    return "\n".join(lines), _shared_references(pkgs)


def _shared_references(pkgs: Sequence[MemoryPackage]) -> list[str]:
    clothing = list(dict.fromkeys(r for p in pkgs for r in p.clothing_refs))
    portraits = list(dict.fromkeys(r for p in pkgs for r in p.character_refs))[:PORTRAIT_CAP]
    merged = MemoryPackage(
        shot_id="",
        major_scene=pkgs[0].major_scene,
        characters=(),
        environment_ref=pkgs[0].environment_ref,
        clothing_refs=tuple(clothing),
        character_refs=tuple(portraits),
        visual_dna={},
        narrative={},
        character_mappings={},
        style_prompt="",
    )
    return order_references(merged)


# ---------------------------------------------------------------------------
# canvas geometry


@dataclass(frozen=True)
class GridSpec:
    canvas_width: int
    canvas_height: int
    order: int
    tile_width: int
    tile_height: int

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError(f"grid order must be 1, 2 or 3, got {self.order}")
        if self.tile_width <= 0 or self.tile_height <= 0:
            raise DimensionMismatch("tile dimensions must be positive")
        if (
            self.canvas_width != self.order * self.tile_width
            or self.canvas_height != self.order * self.tile_height
        ):
            raise DimensionMismatch(
                f"canvas {self.canvas_width}x{self.canvas_height} is not "
                f"{self.order} x {self.tile_width}x{self.tile_height}"
            )

    @classmethod
    def for_tile(cls, order: int, tile_width: int, tile_height: int) -> GridSpec:
        return cls(order * tile_width, order * tile_height, order, tile_width, tile_height)

    @classmethod
    def from_canvas(cls, width: int, height: int, order: int) -> GridSpec:
        if width % order or height % order:
            raise DimensionMismatch(f"{width}x{height} is not divisible into {order}x{order} tiles")
        return cls(width, height, order, width // order, height // order)

    def matches_ratio(self, ratio: float) -> bool:
        return abs(self.tile_width / self.tile_height - ratio) <= ASPECT_TOL


@dataclass(frozen=True)
class Provenance:
    batch_id: str
    row: int
    col: int
    attempt: int


@dataclass(eq=False)
class Keyframe:
    shot_id: str
    image: np.ndarray
    provenance: Provenance = field(default_factory=lambda: Provenance("", 0, 0, 1))

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[0]


def _dims(image: np.ndarray) -> tuple[int, int]:
    return image.shape[1], image.shape[0]


def split_grid(
    image: np.ndarray, spec: GridSpec, batch: GridBatch | None = None, attempt: int = 1
) -> list[Keyframe]:
    """Cut a canvas into order² row-major tiles; no resampling, no gaps."""
    if _dims(image) != (spec.canvas_width, spec.canvas_height):
        w, h = _dims(image)
        raise DimensionMismatch(
            f"canvas is {w}x{h}, expected {spec.canvas_width}x{spec.canvas_height}"
        )
    if batch is not None and batch.order != spec.order:
        raise DimensionMismatch(f"batch order {batch.order} != grid order {spec.order}")
    tw, th = spec.tile_width, spec.tile_height
    out = []
    for i in range(spec.order**2):
        r, c = divmod(i, spec.order)
        tile = image[r * th : (r + 1) * th, c * tw : (c + 1) * tw].copy()
        shot_id = batch.shot_ids[i] if batch is not None else str(i)
        batch_id = batch.batch_id if batch is not None else ""
        out.append(Keyframe(shot_id, tile, Provenance(batch_id, r, c, attempt)))
    return out


def recompose(keyframes: Sequence[Keyframe], spec: GridSpec) -> np.ndarray:
    if len(keyframes) != spec.order**2:
        raise WrongCount(f"{len(keyframes)} keyframes for a {spec.order}x{spec.order} grid")
    for kf in keyframes:
        if _dims(kf.image) != (spec.tile_width, spec.tile_height):
            w, h = _dims(kf.image)
            raise DimensionMismatch(
                f"keyframe {kf.shot_id} is {w}x{h}, expected {spec.tile_width}x{spec.tile_height}"
            )
    rows = [
        np.concatenate([kf.image for kf in keyframes[r * spec.order : (r + 1) * spec.order]], axis=1)
        for r in range(spec.order)
    ]
    return np.concatenate(rows, axis=0)
