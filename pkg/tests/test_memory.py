from __future__ import annotations

import copy
import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import populated_registry, schema_document, solid_image, synthetic
from reshoot.backends.mock import render_portrait
from reshoot.errors import (
    AspectRatioMismatch,
    InvalidDNA,
    MissingAnchor,
    UnknownCharacter,
    UnknownScene,
    UnknownShot,
    UnreadableImage,
)
from reshoot.fixtures import wardrobe_dna
from reshoot.memory import (
    DNA_DIMENSIONS,
    PORTRAIT_CAP,
    MemoryPackage,
    ReferenceRegistry,
    WardrobeDNA,
    allocate,
    allocate_global,
    order_references,
    validate_package,
    wardrobe_clauses,
    wardrobe_to_prompt,
)
from reshoot.screenplay import characters_in_shot, screenplay_from_dict


def _dna(**color) -> dict:
    d = wardrobe_dna(random.Random(0))
    d["color"].update(color)
    return d


@pytest.fixture
def two_char_sp():
    """Shot 9 of scene 01 with a main and a background character."""
    doc = schema_document()
    second = copy.deepcopy(doc["characters"][0])
    second.update(character_id="@character_02", role_classification="background")
    doc["characters"].append(second)
    doc["shots"][0]["characters"] = ["@character_01", "@character_02"]
    return screenplay_from_dict(doc)


def test_register_environment_ratio(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path)
    reg.register_environment("major_scene_01", solid_image(tmp_path / "a.png", 1920, 1080))
    with pytest.raises(AspectRatioMismatch):
        reg.register_environment("major_scene_01", solid_image(tmp_path / "b.png", 1080, 1920))
    with pytest.raises(UnknownScene):
        reg.register_environment("major_scene_07", tmp_path / "a.png")
    with pytest.raises(UnreadableImage):
        (tmp_path / "junk.png").write_bytes(b"not an image")
        reg.register_environment("major_scene_01", tmp_path / "junk.png")


def test_reregister_environment_replaces(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path)
    img = solid_image(tmp_path / "a.png", 192, 108)
    first = reg.register_environment("major_scene_01", img)
    size = len(reg)
    second = reg.register_environment("major_scene_01", solid_image(tmp_path / "b.png", 384, 216))
    assert first == second and len(reg) == size
    assert reg.environment("major_scene_01").image.width == 384


def test_register_portraits(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path)
    a = render_portrait("@character_01", tmp_path / "p1.png")
    b = render_portrait("@character_01", tmp_path / "p2.png")
    reg.register_portrait("@character_01", a, "Ana")
    assert len(reg.portraits("@character_01")) == 1
    reg.register_portrait("@character_01", b, "Ana")
    paths = [p.image.path for p in reg.portraits("@character_01")]
    assert paths == ["reference_images/character_01_portrait.png",
                     "reference_images/character_01_portrait_2.png"]
    with pytest.raises(UnknownCharacter):
        reg.register_portrait("@ghost_99", a, "Nobody")


def test_register_clothing(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path)
    img = solid_image(tmp_path / "c.png", 20, 40)
    reg.register_clothing("@character_01", "major_scene_01", _dna(hex="#2A4B6C"), img)
    with pytest.raises(InvalidDNA):
        reg.register_clothing("@character_01", "major_scene_01", _dna(hex="blue"), img)
    reg.register_clothing("@character_01", "major_scene_01", _dna(hex="#000000"), img)
    assert len(reg.all_clothing) == 1
    assert reg.clothing("@character_01", "major_scene_01").dna.color.hex == "#000000"
    with pytest.raises(UnknownScene):
        reg.register_clothing("@character_01", "major_scene_05", _dna(), img)


def test_dna_needs_all_seven_dimensions():
    d = _dna()
    del d["pattern"]
    with pytest.raises(InvalidDNA):
        WardrobeDNA.from_dict(d)
    assert len(DNA_DIMENSIONS) == 7


def test_registry_index_round_trip(tmp_path):
    sp = synthetic(6, seed=2)
    reg = populated_registry(sp, tmp_path, portraits_per_character=2, clothing=True)
    reg.save()
    again = ReferenceRegistry.load(sp, tmp_path)
    assert again.to_index() == reg.to_index()


def test_allocate_example_package(tmp_path, two_char_sp):
    sp = two_char_sp
    reg = ReferenceRegistry(sp, tmp_path)
    reg.register_environment("major_scene_01", solid_image(tmp_path / "e.png", 192, 108))
    reg.register_portrait("@character_01", render_portrait("@character_01", tmp_path / "p.png"),
                          "Ana")
    reg.register_clothing("@character_01", "major_scene_01", _dna(),
                          solid_image(tmp_path / "c.png", 20, 40))
    pkg = allocate(sp, "9", reg, "STYLE: REALISTIC CINEMATIC")
    assert pkg.environment_ref == "reference_images/major_scene_01_environment.png"
    assert pkg.clothing_refs == ("reference_images/major_scene_01_character_01_clothing.png",)
    assert pkg.character_refs == ("reference_images/character_01_portrait.png",)
    assert pkg.characters == ("@character_01", "@character_02")
    assert pkg.generation_feedback == ()
    shot = sp.shot("9")
    assert pkg.narrative["language_prompt"] == shot.one_shot_prompt
    assert pkg.narrative["i2v_prompt"] == shot.i2v_prompt
    assert pkg.visual_dna == {"lighting": shot.lighting_setup, "color": shot.color_grading,
                              "mood": shot.mood_atmosphere}
    assert pkg.character_mappings["@character_01"]["target_name"] == "Ana"


def test_cap_drops_lexicographically_last_among_equals(tmp_path):
    doc = schema_document()
    base = doc["characters"][0]
    doc["characters"] = [dict(copy.deepcopy(base), character_id=f"@character_0{i}")
                         for i in range(1, 7)]
    doc["shots"][0]["characters"] = [c["character_id"] for c in reversed(doc["characters"])]
    sp = screenplay_from_dict(doc)
    reg = populated_registry(sp, tmp_path)
    pkg = allocate(sp, "9", reg, "")
    assert len(pkg.character_refs) == PORTRAIT_CAP
    assert "reference_images/character_06_portrait.png" not in pkg.character_refs
    assert validate_package(pkg, sp).ok


def test_role_rank_beats_id(tmp_path):
    doc = schema_document()
    base = doc["characters"][0]
    doc["characters"] = [dict(copy.deepcopy(base), character_id=f"@character_0{i}")
                         for i in range(1, 7)]
    doc["characters"][0]["role_classification"] = "background"
    doc["shots"][0]["characters"] = [c["character_id"] for c in doc["characters"]]
    sp = screenplay_from_dict(doc)
    pkg = allocate(sp, "9", populated_registry(sp, tmp_path), "")
    assert "reference_images/character_01_portrait.png" not in pkg.character_refs
    assert pkg.character_refs[0] == "reference_images/character_02_portrait.png"


def test_missing_environment_anchor(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path)
    reg.register_portrait("@character_01", render_portrait("@character_01", tmp_path / "p.png"),
                          "Ana")
    with pytest.raises(MissingAnchor) as exc:
        allocate(two_char_sp, "9", reg, "")
    assert exc.value.kind == "environment" and exc.value.ident == "major_scene_01"
    with pytest.raises(UnknownShot):
        allocate(two_char_sp, "404", reg, "")


def test_missing_portrait_anchor(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path)
    reg.register_environment("major_scene_01", solid_image(tmp_path / "e.png", 192, 108))
    with pytest.raises(MissingAnchor) as exc:
        allocate(two_char_sp, "9", reg, "")
    assert exc.value.kind == "portrait"


def test_missing_clothing_is_a_warning(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path)
    reg.register_environment("major_scene_01", solid_image(tmp_path / "e.png", 192, 108))
    reg.register_portrait("@character_01", render_portrait("@character_01", tmp_path / "p.png"),
                          "Ana")
    findings: list = []
    pkg = allocate(two_char_sp, "9", reg, "", findings=findings)
    assert pkg.clothing_refs == ()
    assert [f["severity"] for f in findings] == ["warning"]


def test_copy_mode_skips_clothing_warning(tmp_path, two_char_sp):
    reg = ReferenceRegistry(two_char_sp, tmp_path, copy_mode=True)
    reg.register_environment("major_scene_01", solid_image(tmp_path / "e.png", 192, 108))
    reg.register_portrait("@character_01", render_portrait("@character_01", tmp_path / "p.png"),
                          "Ana")
    findings: list = []
    allocate(two_char_sp, "9", reg, "", findings=findings)
    assert findings == []


def _pkg(env=None, clothing=(), portraits=()) -> MemoryPackage:
    return MemoryPackage("1", "major_scene_01", (), env, tuple(clothing), tuple(portraits), {}, {},
                         {}, "")


def test_order_references_examples():
    assert order_references(_pkg("E", ["C1"], ["P1", "P2"])) == ["E", "C1", "P1", "P2"]
    assert order_references(_pkg(None, ["C1"], ["P1"])) == ["C1", "P1"]
    assert order_references(_pkg()) == []


def test_wardrobe_prompt_codes_and_locality():
    d = _dna(pantone_tcx="19-4052 TCX", hex="#0F4C81")
    dna = WardrobeDNA.from_dict(d)
    text = wardrobe_to_prompt(dna)
    assert "19-4052 TCX" in text and "#0F4C81" in text
    assert wardrobe_to_prompt(WardrobeDNA.from_dict(copy.deepcopy(d))) == text
    d2 = copy.deepcopy(d)
    d2["styling"]["tucking"] = "half-tucked" if d["styling"]["tucking"] != "half-tucked" else "x"
    a, b = wardrobe_clauses(dna), wardrobe_clauses(WardrobeDNA.from_dict(d2))
    assert [i for i in range(7) if a[i] != b[i]] == [6]


def test_validate_package_findings(tmp_path):
    sp = synthetic(4, seed=3)
    reg = populated_registry(sp, tmp_path)
    pkg = allocate(sp, "1", reg, "")
    assert validate_package(pkg, sp).ok
    outsider = next(c.character_id for c in sp.characters if c.character_id not in pkg.characters)
    extra = replace(pkg, characters=pkg.characters + (outsider,))
    assert "non-minimal context" in validate_package(extra, sp).codes()
    six = replace(pkg, character_refs=tuple(f"p{i}.png" for i in range(6)))
    assert "portrait cap" in validate_package(six, sp).codes()
    foreign = replace(pkg, environment_ref="reference_images/major_scene_99_environment.png")
    assert "foreign environment" in validate_package(foreign, sp).codes()


def test_global_allocation_is_not_minimal(tmp_path):
    sp = synthetic(10, seed=5)
    reg = populated_registry(sp, tmp_path)
    shot = next(s for s in sp.shots if len(s.characters) < len(sp.characters))
    pkg = allocate_global(sp, shot.shot_id, reg, "")
    assert "non-minimal context" in validate_package(pkg, sp).codes()


@pytest.fixture(scope="module")
def registries(tmp_path_factory):
    root = tmp_path_factory.mktemp("regs")
    out = {}
    for k in (1, 2, 3):
        sp = synthetic(3, 0, n_scenes=3, n_characters=6)
        populated_registry(sp, root / str(k), portraits_per_character=k).save()
        out[k] = root / str(k)
    return out


@given(seed=st.integers(0, 5000), k=st.sampled_from([1, 2, 3]), n=st.integers(1, 30))
def test_allocation_properties(registries, seed, k, n):
    sp = synthetic(n, seed, n_scenes=3, n_characters=6, max_cast=6)
    reg = ReferenceRegistry.load(sp, registries[k])
    envs = {}
    for shot in sp.shots:
        pkg = allocate(sp, shot.shot_id, reg, "s")
        assert set(pkg.characters) == characters_in_shot(sp, shot.shot_id)
        assert envs.setdefault(shot.scene_id, pkg.environment_ref) == pkg.environment_ref
        available = sum(len(reg.portraits(c)) for c in set(shot.characters))
        assert len(pkg.character_refs) == min(PORTRAIT_CAP, available)
        assert allocate(sp, shot.shot_id, reg, "s") == pkg
        assert validate_package(pkg, sp).ok


@given(env=st.one_of(st.none(), st.text(min_size=1, max_size=5)),
       clothing=st.lists(st.text(min_size=1, max_size=5), max_size=4),
       portraits=st.lists(st.text(min_size=1, max_size=5), max_size=5))
def test_reference_blocks_keep_priority_order(env, clothing, portraits):
    refs = order_references(_pkg(env, clothing, portraits))
    head = [env] if env else []
    assert refs == head + clothing + portraits
