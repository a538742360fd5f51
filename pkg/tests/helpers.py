"""Shared builders for the test suite."""

from __future__ import annotations

import copy
import json
import random
from pathlib import Path

from reshoot.backends.mock import render_portrait
from reshoot.fixtures import synthesize_dict
from reshoot.images import write_image
from reshoot.memory import ReferenceRegistry
from reshoot.screenplay import screenplay_from_dict

import numpy as np

DATA = Path(__file__).parent / "data"


def fragment(name: str) -> dict:
    return json.loads((DATA / f"{name}.json").read_text(encoding="utf-8"))


def schema_document() -> dict:
    """The four example fragments assembled into one screenplay document."""
    doc = fragment("schema_metadata")
    doc["characters"] = fragment("schema_characters")["characters"]
    doc["major_scenes"] = fragment("schema_major_scenes")["major_scenes"]
    doc["shots"] = [fragment("schema_shot")]
    return doc


# ---------------------------------------------------------------------------
# invariant-breaking mutations; each returns a new document


def _first(doc, key):
    return doc[key][0]


def _inverted_interval(doc, rng):
    s = _first(doc, "major_scenes")
    s["start_time"], s["end_time"] = s["end_time"] + 1.0, s["start_time"]


def _duration_mismatch(doc, rng):
    s = rng.choice(doc["major_scenes"])
    s["duration"] = s["duration"] + rng.choice([-5.0, 0.5, 3.0])


def _overlap(doc, rng):
    if len(doc["major_scenes"]) < 2:
        return _inverted_interval(doc, rng)
    a, b = doc["major_scenes"][0], doc["major_scenes"][1]
    b["start_time"] = a["end_time"] - 1.0
    b["duration"] = b["end_time"] - b["start_time"]


def _bad_character_id(doc, rng):
    rng.choice(doc["characters"])["character_id"] = rng.choice(["character_01", "@char_9", "x"])


def _duplicate_character(doc, rng):
    doc["characters"].append(copy.deepcopy(_first(doc, "characters")))


def _duplicate_scene(doc, rng):
    dup = copy.deepcopy(doc["major_scenes"][-1])
    dup["start_time"] = max(s["end_time"] for s in doc["major_scenes"])
    dup["end_time"] = dup["start_time"] + 10.0
    dup["duration"] = 10.0
    doc["major_scenes"].append(dup)


def _negative_first_appearance(doc, rng):
    rng.choice(doc["characters"])["first_appearance"] = -rng.uniform(0.1, 50.0)


def _bad_primary_source(doc, rng):
    rng.choice(doc["characters"])["names"]["primary_source"] = "guess"


def _bad_role(doc, rng):
    rng.choice(doc["characters"])["role_classification"] = "extra"


def _dangling_scene(doc, rng):
    rng.choice(doc["shots"])["scene_id"] = "major_scene_99"


def _dangling_character(doc, rng):
    rng.choice(doc["shots"])["characters"].append("@character_ghost")


def _empty_i2v(doc, rng):
    rng.choice(doc["shots"])["I2V_Prompt"] = rng.choice(["", "   "])


def _empty_language(doc, rng):
    rng.choice(doc["shots"])["Language_to_One_Shot_Prompt"] = ""


def _bad_timestamp(doc, rng):
    shot = rng.choice(doc["shots"])
    shot["subject_movement"]["dialogue"] = {"timestamp": rng.choice(["2:15", "00:61:00.000", "-1"]),
                                            "text": "hello"}


def _ratio_mismatch(doc, rng):
    doc["video_metadata"]["aspect_ratio"]["ratio_decimal"] += rng.choice([-0.1, 0.01, 0.5])


def _label_mismatch(doc, rng):
    doc["video_metadata"]["aspect_ratio"]["aspect_ratio"] = "4:3"


def _character_in_environment(doc, rng):
    s = rng.choice(doc["major_scenes"])
    s["environment_description"] += f" {doc['characters'][0]['character_id']} waits here."


def _duplicate_shot(doc, rng):
    doc["shots"].append(copy.deepcopy(rng.choice(doc["shots"])))


def _nonpositive_dimension(doc, rng):
    doc["video_metadata"]["aspect_ratio"]["height"] = 0


MUTATIONS = {
    "scene time ordering": _inverted_interval,
    "scene duration": _duration_mismatch,
    "scene overlap": _overlap,
    "character id format": _bad_character_id,
    "duplicate character id": _duplicate_character,
    "duplicate scene id": _duplicate_scene,
    "negative first appearance": _negative_first_appearance,
    "primary source": _bad_primary_source,
    "role classification": _bad_role,
    "dangling scene reference": _dangling_scene,
    "dangling character reference": _dangling_character,
    "empty i2v prompt": _empty_i2v,
    "empty language prompt": _empty_language,
    "dialogue timestamp": _bad_timestamp,
    "ratio mismatch": _ratio_mismatch,
    "aspect label mismatch": _label_mismatch,
    "environment contains character": _character_in_environment,
    "duplicate shot id": _duplicate_shot,
    "nonpositive dimension": _nonpositive_dimension,
}


def mutate(doc: dict, name: str, seed: int) -> dict:
    out = copy.deepcopy(doc)
    MUTATIONS[name](out, random.Random(seed))
    return out


# ---------------------------------------------------------------------------
# registries


def solid_image(path, width: int, height: int, color=(40, 80, 120)) -> Path:
    pixels = np.zeros((height, width, 3), dtype=np.uint8)
    pixels[:] = color
    return write_image(path, pixels)


def populated_registry(sp, root, portraits_per_character: int = 1, *, clothing: bool = False):
    """Environment for every scene and ``portraits_per_character`` tagged
    portraits for every roster character."""
    root = Path(root)
    reg = ReferenceRegistry(sp, root)
    w, h = sp.metadata.width, sp.metadata.height
    for scene in sp.major_scenes:
        img = solid_image(root / "src" / f"{scene.scene_id}.png", w, h)
        reg.register_environment(scene.scene_id, img)
    for c in sp.characters:
        for k in range(portraits_per_character):
            img = render_portrait(c.character_id, root / "src" / f"{c.character_id[1:]}_{k}.png",
                                  16, 16)
            reg.register_portrait(c.character_id, img, f"Actor {c.character_id[-2:]}")
    if clothing:
        from reshoot.fixtures import wardrobe_dna

        rng = random.Random(0)
        for c in sp.characters:
            for scene in sp.major_scenes:
                img = solid_image(root / "src" / f"cl_{c.character_id[1:]}_{scene.scene_id}.png",
                                  16, 16)
                reg.register_clothing(c.character_id, scene.scene_id, wardrobe_dna(rng), img)
    return reg


def synthetic(n_shots: int, seed: int = 0, **kw):
    return screenplay_from_dict(synthesize_dict(n_shots, seed, **kw))
