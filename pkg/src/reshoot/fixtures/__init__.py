"""Synthetic screenplay corpus for offline runs and tests.

``demo_2scene.json`` is hand-written. ``synthesize`` builds arbitrary-size
screenplays from a seed; the same (n_shots, seed, ...) always yields the same
document.
"""

from __future__ import annotations

import json
import random
from importlib import resources

from ..screenplay import Screenplay, screenplay_from_dict

STATIC = ("demo_2scene",)

_LOCATIONS = [
    ("Hospital Ward", "rows of white metal beds under mosquito nets", "bright daylight through blinds"),
    ("Harbor Dock", "wet planks, coiled ropes and stacked crates by the water", "overcast diffuse light"),
    ("Kitchen", "narrow galley kitchen with tiled walls and a steaming kettle", "warm tungsten practicals"),
    ("Rooftop", "gravel rooftop with water tanks and a city skyline", "golden hour backlight"),
    ("Library", "tall oak shelves and green-shaded reading lamps", "low key lamp light"),
    ("Train Platform", "empty platform with a flickering departures board", "cold fluorescent light"),
]
_ACTIONS = [
    "turns toward the door",
    "pours two cups of tea",
    "reads a folded letter",
    "steps closer and lowers their voice",
    "laughs and looks away",
    "picks up the dropped keys",
    "walks slowly to the window",
    "sits down on the edge of the bed",
]
_SIZES = ["Wide shot", "Medium shot", "Medium close-up", "Close-up", "Over-the-shoulder"]
_MOVES = ["Static", "Slow push-in", "Pan left", "Tracking forward", "Handheld drift"]
_NAMES = ["Emma Smith", "Daniel Reyes", "Mara Okafor", "Tom Becker", "Lin Hua", "Sara Novak"]
_COLORS = [("19-4052 TCX", "#0F4C81"), ("18-1664 TCX", "#C8102E"), ("13-0647 TCX", "#F3D54E"),
           ("17-5641 TCX", "#009473"), ("11-0601 TCX", "#F4F5F0")]


def load_fixture(name: str) -> dict:
    text = resources.files(__package__).joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def wardrobe_dna(rng: random.Random) -> dict:
    pantone, hexcode = rng.choice(_COLORS)
    return {
        "color": {"pantone_tcx": pantone, "hex": hexcode},
        "fabric": {
            "material": rng.choice(["cotton", "wool", "linen", "silk"]),
            "weave": rng.choice(["plain", "twill", "satin"]),
            "weight": rng.choice(["light", "medium", "heavy"]),
            "opacity": "opaque",
            "finish": rng.choice(["matte", "sheen"]),
            "stretch": rng.choice(["none", "slight"]),
            "texture": rng.choice(["smooth", "ribbed", "brushed"]),
            "drape": rng.choice(["fluid", "structured"]),
        },
        "cut_fit": {"top": rng.choice(["tailored", "relaxed"]),
                    "bottom": rng.choice(["straight", "tapered", "a-line"])},
        "details": rng.sample(["buttons", "zipper", "patch pockets", "contrast stitching"], 2),
        "pattern": {"type": rng.choice(["solid", "stripe", "check"]), "size": "small",
                    "arrangement": "regular", "direction": "vertical", "density": "sparse"},
        "accessories": {"footwear": rng.choice(["boots", "loafers", "sneakers"]),
                        "jewelry": rng.choice(["none", "silver ring", "pearl studs"]),
                        "bags": rng.choice(["none", "leather satchel"])},
        "styling": {"layering": rng.choice(["single layer", "jacket over shirt"]),
                    "tucking": rng.choice(["tucked", "untucked"]),
                    "sleeve_state": rng.choice(["rolled", "down"]),
                    "overall_style": rng.choice(["smart casual", "workwear", "formal"])},
    }


def synthesize_dict(
    n_shots: int,
    seed: int = 0,
    *,
    n_scenes: int = 3,
    n_characters: int = 4,
    width: int = 320,
    height: int = 180,
    max_cast: int = 3,
) -> dict:
    """Screenplay document with ``n_shots`` shots spread over ``n_scenes`` scenes.

    Shots come in runs that share a cast so grid batching has something to
    group. The first two characters are main, the third supporting, the rest
    background.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    rng = random.Random(seed)
    n_scenes = max(1, min(n_scenes, n_shots))
    roles = ["main", "main", "supporting"] + ["background"] * max(0, n_characters - 3)

    scenes = []
    t = 0.0
    locations = rng.sample(_LOCATIONS, k=min(n_scenes, len(_LOCATIONS)))
    while len(locations) < n_scenes:
        locations.append(rng.choice(_LOCATIONS))
    for i, (loc, setting, light) in enumerate(locations):
        dur = float(rng.randint(20, 90))
        scenes.append({
            "scene_id": f"major_scene_{i + 1:02d}",
            "start_time": t,
            "end_time": t + dur,
            "duration": dur,
            "location_type": loc,
            "setting_description": setting,
            "lighting_style": light,
            "color_palette": rng.choice(["muted teal and amber", "pale green and white",
                                          "deep blue and brass"]),
            "environment_description": f"{loc}: {setting}, lit by {light}.",
        })
        t += dur

    char_ids = [f"@character_{i + 1:02d}" for i in range(n_characters)]
    characters = []
    for i, cid in enumerate(char_ids):
        variations = []
        for s in scenes:
            v = {"scene": s["scene_id"], "description": f"outfit for {s['location_type'].lower()}"}
            if roles[i] == "main":
                v["wardrobe_dna"] = wardrobe_dna(rng)
            variations.append(v)
        name = _NAMES[i % len(_NAMES)]
        characters.append({
            "character_id": cid,
            "names": {"primary_name": name, "primary_source": "dialogue",
                      "aliases": [name.split()[0]], "titles": [], "roles": []},
            "physical_attributes": rng.choice(["young adult", "middle-aged", "elderly"]),
            "hair": rng.choice(["short black", "long red", "grey curls"]),
            "face": rng.choice(["freckled", "clean-shaven", "sharp cheekbones"]),
            "clothing_variations": variations,
            "first_appearance": "0.0s",
            "role_classification": roles[i],
        })

    # distribute shots over scenes (every scene gets at least one)
    counts = [1] * n_scenes
    for _ in range(n_shots - n_scenes):
        counts[rng.randrange(n_scenes)] += 1

    shots = []
    for scene, count in zip(scenes, counts):
        left = count
        while left:
            run = min(left, rng.choice([1, 2, 4, 4, 5, 9]))
            k = rng.randint(1, min(max_cast, n_characters))
            cast = sorted(rng.sample(char_ids, k))
            for _ in range(run):
                action = rng.choice(_ACTIONS)
                size = rng.choice(_SIZES)
                move = rng.choice(_MOVES)
                sid = str(len(shots) + 1)
                who = " and ".join(c.replace("@", "") for c in cast)
                shots.append({
                    "shot_id": sid,
                    "scene_id": scene["scene_id"],
                    "characters": cast,
                    "lighting_setup": scene["lighting_style"],
                    "color_grading": scene["color_palette"],
                    "composition": "rule of thirds",
                    "mood_atmosphere": rng.choice(["tense", "tender", "playful", "somber"]),
                    "shot_size": size,
                    "camera_angle": "eye level",
                    "camera_height": "1.5m from ground",
                    "horizontal_angle": "frontal",
                    "focal_length": rng.choice(["35mm lens", "50mm lens", "85mm lens"]),
                    "depth_of_field": "shallow",
                    "tech_device": "digital cinema camera",
                    "camera_movement": move,
                    "subject_movement": {"action": f"{who} {action}"},
                    "I2V_Prompt": f"{move}: {who} {action}, 6-second duration",
                    "Language_to_One_Shot_Prompt": (
                        f"{size} of {who} who {action} in the {scene['location_type'].lower()}"
                    ),
                })
            left -= run

    return {
        "video_file": f"synthetic_{n_shots}_{seed}.mp4",
        "video_metadata": {"aspect_ratio": {"width": width, "height": height,
                                            "aspect_ratio": _ratio_label(width, height),
                                            "ratio_decimal": round(width / height, 6)}},
        "total_scenes": n_scenes,
        "characters": characters,
        "major_scenes": scenes,
        "shots": shots,
    }


def _ratio_label(width: int, height: int) -> str:
    from math import gcd

    g = gcd(width, height)
    return f"{width // g}:{height // g}"


def synthesize(n_shots: int, seed: int = 0, **kwargs) -> Screenplay:
    return screenplay_from_dict(synthesize_dict(n_shots, seed, **kwargs))


def fixture_document(source: str, seed: int = 0) -> dict:
    """Resolve a mock source descriptor.

    ``demo_2scene`` -> bundled file; ``synthetic:N`` or
    ``synthetic:N:SCENES:CHARS`` -> generated with ``seed``.
    """
    if source in STATIC:
        return load_fixture(source)
    if source.startswith("synthetic:"):
        parts = [int(p) for p in source.split(":")[1:]]
        n = parts[0]
        scenes = parts[1] if len(parts) > 1 else 3
        chars = parts[2] if len(parts) > 2 else 4
        return synthesize_dict(n, seed, n_scenes=scenes, n_characters=chars)
    raise KeyError(source)
