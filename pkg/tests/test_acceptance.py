"""Acceptance criteria, one test group per criterion.

The terminal summary prints one PASS/FAIL line per criterion (see conftest).
"""

from __future__ import annotations

import json
import random
import time
from collections import defaultdict
from fractions import Fraction
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from helpers import MUTATIONS, fragment, mutate, populated_registry, schema_document
from reshoot.backends import MockWorld, build_backends
from reshoot.bench import set_metrics
from reshoot.demo import FULL, GLOBAL_CONTEXT, NO_VERIFY, DemoSettings, mock_demo, run_variant
from reshoot.errors import DimensionMismatch, RunInterrupted
from reshoot.fixtures import synthesize_dict
from reshoot.grid import GridSpec, recompose, split_grid
from reshoot.manifest import normalize, read_events
from reshoot.memory import PORTRAIT_CAP, ROLE_CLASSES, ReferenceRegistry, allocate
from reshoot.pipeline import resume
from reshoot.screenplay import (
    character_to_dict,
    parse_character,
    parse_scene,
    parse_shot,
    parse_screenplay,
    scene_to_dict,
    screenplay_from_dict,
    screenplay_to_dict,
    serialize_screenplay,
    shot_to_dict,
    validate_screenplay,
)

DEMO = DemoSettings(shots=20, fault_rate=0.15, max_retries=3, seed=0, global_context=True)


# ---------------------------------------------------------------------------
# 1. schema fidelity


@pytest.mark.criterion(1, "schema fidelity")
def test_schema_fragments_parse_validate_and_round_trip():
    start = time.perf_counter()
    chars = fragment("schema_characters")["characters"]
    scenes = fragment("schema_major_scenes")["major_scenes"]
    shot = fragment("schema_shot")

    assert character_to_dict(parse_character(chars[0])) == chars[0]
    assert scene_to_dict(parse_scene(scenes[0])) == scenes[0]
    assert shot_to_dict(parse_shot(shot)) == shot

    doc = schema_document()
    sp = screenplay_from_dict(doc)
    report = validate_screenplay(sp)
    assert report.errors == []
    assert screenplay_to_dict(sp) == doc
    again = parse_screenplay(serialize_screenplay(sp))
    assert again == sp
    assert serialize_screenplay(again) == serialize_screenplay(sp)
    assert time.perf_counter() - start < 5.0


@pytest.mark.criterion(1, "schema fidelity")
def test_one_thousand_mutations_each_yield_an_error():
    start = time.perf_counter()
    rng = random.Random(1234)
    bases = [schema_document()] + [
        synthesize_dict(rng.randint(3, 14), seed=s, n_scenes=rng.randint(1, 3)) for s in range(8)
    ]
    for base in bases:
        assert validate_screenplay(screenplay_from_dict(base)).ok
    names = sorted(MUTATIONS)
    silent = []
    for i in range(1000):
        name = names[i % len(names)]
        doc = mutate(rng.choice(bases), name, seed=i)
        if not validate_screenplay(screenplay_from_dict(doc)).errors:
            silent.append((i, name))
    assert silent == []
    assert time.perf_counter() - start < 5.0


# ---------------------------------------------------------------------------
# 2. metric oracle equivalence


def _oracle(pred: list, gt: list) -> tuple:
    """Enumerate the universe element by element; exact rationals."""
    universe = sorted(set(pred) | set(gt))
    in_p = {u: any(x == u for x in pred) for u in universe}
    in_g = {u: any(x == u for x in gt) for u in universe}
    inter = sum(1 for u in universe if in_p[u] and in_g[u])
    union = sum(1 for u in universe if in_p[u] or in_g[u])
    n_p = sum(1 for u in universe if in_p[u])
    n_g = sum(1 for u in universe if in_g[u])
    if n_p == 0 and n_g == 0:
        return (1.0, 1.0, 1.0, 1.0)
    p = Fraction(inter, n_p) if n_p else Fraction(0)
    r = Fraction(inter, n_g) if n_g else Fraction(0)
    iou = Fraction(inter, union)
    f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
    return tuple(float(x) for x in (p, r, iou, f1))


@pytest.mark.criterion(2, "metric oracle equivalence")
def test_set_metrics_match_brute_force_oracle():
    start = time.perf_counter()
    rng = random.Random(99)
    alphabet = [f"@character_{i:02d}" for i in range(12)]
    pairs = [([], []), ([], ["a"]), (["a"], []), (["a"], ["a"]), (["a", "a"], ["a"])]
    while len(pairs) < 10_000:
        kp = rng.choice([0, 0, 1, 2, 3, 5, 8, 12])
        kg = rng.choice([0, 0, 1, 2, 3, 5, 8, 12])
        pred = [rng.choice(alphabet) for _ in range(kp)]
        gt = [rng.choice(alphabet) for _ in range(kg)]
        pairs.append((pred, gt))
    assert sum(1 for p, g in pairs if not p or not g) > 1000
    for pred, gt in pairs:
        got = tuple(set_metrics(pred, gt))
        assert got == _oracle(pred, gt), (pred, gt)
        p, r, iou, f1 = got
        assert iou <= min(p, r)
        assert all(0.0 <= v <= 1.0 for v in got)
    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# 3. grid exactness


@pytest.mark.criterion(3, "grid exactness")
def test_split_recompose_pixel_identical():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    for order in (2, 3):
        for _ in range(100):
            tw, th = (int(v) for v in rng.integers(1, 97, size=2))
            spec = GridSpec.for_tile(order, tw, th)
            canvas = rng.integers(0, 256, size=(th * order, tw * order, 3), dtype=np.uint8)
            tiles = split_grid(canvas, spec)
            assert len(tiles) == order * order
            assert all(t.size == (tw, th) for t in tiles)
            assert sum(int(t.image.astype(np.int64).sum()) for t in tiles) == int(
                canvas.astype(np.int64).sum())
            assert np.array_equal(recompose(tiles, spec), canvas)
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion(3, "grid exactness")
def test_full_hd_tile_sizes_and_indivisible_rejection():
    canvas = np.zeros((1080, 1920, 3), dtype=np.uint8)
    for order, size in ((2, (960, 540)), (3, (640, 360))):
        spec = GridSpec.from_canvas(1920, 1080, order)
        tiles = split_grid(canvas, spec)
        assert len(tiles) == order * order
        assert {t.size for t in tiles} == {size}
    with pytest.raises(DimensionMismatch):
        GridSpec.from_canvas(1921, 1080, 2)
    with pytest.raises(DimensionMismatch):
        split_grid(np.zeros((1080, 1921, 3), dtype=np.uint8), GridSpec.for_tile(2, 960, 540))


# ---------------------------------------------------------------------------
# 4. allocation minimality


def _expected_portraits(sp, reg, characters) -> list[str]:
    """Round-robin by depth: all first portraits (ranked main, supporting,
    background, then id), then all second portraits, and so on."""
    keyed = []
    for cid in set(characters):
        rank = ROLE_CLASSES.index(sp.character(cid).role_classification)
        for depth, p in enumerate(reg.portraits(cid)):
            keyed.append(((depth, rank, cid), p.image.path))
    return [path for _, path in sorted(keyed)[:PORTRAIT_CAP]]


def _check_allocation(sp, reg):
    env_by_scene = defaultdict(set)
    for shot in sp.shots:
        pkg = allocate(sp, shot.shot_id, reg, "style")
        assert set(pkg.characters) == set(shot.characters)
        assert len(pkg.characters) == len(set(shot.characters))
        assert pkg.environment_ref == reg.environment(shot.scene_id).image.path
        env_by_scene[shot.scene_id].add(pkg.environment_ref)
        assert len(pkg.character_refs) <= PORTRAIT_CAP
        assert list(pkg.character_refs) == _expected_portraits(sp, reg, shot.characters)
        assert pkg.generation_feedback == ()
    assert all(len(v) == 1 for v in env_by_scene.values())
    assert len({next(iter(v)) for v in env_by_scene.values()}) == len(env_by_scene)


@pytest.mark.criterion(4, "allocation minimality")
def test_allocation_on_three_scene_four_character_fixture(tmp_path):
    sp = screenplay_from_dict(synthesize_dict(24, seed=0, n_scenes=3, n_characters=4))
    assert len(sp.shots) == 24 and len(sp.major_scenes) == 3 and len(sp.characters) == 4
    for k in (1, 2):
        reg = populated_registry(sp, tmp_path / f"k{k}", portraits_per_character=k)
        _check_allocation(sp, reg)


@pytest.mark.criterion(4, "allocation minimality")
def test_allocation_property_over_500_fixtures(tmp_path):
    start = time.perf_counter()
    rng = random.Random(4)
    # registries depend only on ids and aspect ratio, so build one per
    # (roster size, portraits per character) and reload it for each fixture
    roots = {}
    for n_chars, k in product(range(2, 8), (1, 2, 3)):
        sp = screenplay_from_dict(synthesize_dict(3, 0, n_scenes=3, n_characters=n_chars))
        root = tmp_path / f"c{n_chars}_k{k}"
        populated_registry(sp, root, portraits_per_character=k).save()
        roots[n_chars, k] = root
    capped = 0
    for i in range(500):
        n_chars = rng.randint(2, 7)
        doc = synthesize_dict(rng.randint(3, 24), seed=i, n_scenes=3, n_characters=n_chars,
                              max_cast=n_chars)
        for c in doc["characters"]:
            c["role_classification"] = rng.choice(ROLE_CLASSES)
        sp = screenplay_from_dict(doc)
        reg = ReferenceRegistry.load(sp, roots[n_chars, rng.choice((1, 2, 3))])
        _check_allocation(sp, reg)
        capped += any(sum(len(reg.portraits(c)) for c in set(s.characters)) > PORTRAIT_CAP
                      for s in sp.shots)
    assert capped > 50  # the cap and its tie-break are actually exercised
    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# mock-demo runs shared by criteria 5 to 8


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    start = time.perf_counter()
    result = mock_demo(out, DEMO)
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def resumed(tmp_path_factory, demo):
    result, _ = demo
    out = tmp_path_factory.mktemp("resumed")
    source = _source_for(result)
    with pytest.raises(RunInterrupted):
        run_variant(out, DEMO, source, FULL, max_retries=DEMO.max_retries,
                    global_context=False, stop_after="keyframe")
    run_dir = out / "full"
    backends = build_backends({}, MockWorld(seed=DEMO.seed, fault_rate=DEMO.fault_rate))
    run = resume(run_dir, backends)
    return run, backends


def _source_for(result):
    from reshoot.pipeline import SourceSpec

    meta = json.loads((result.run_dirs[FULL] / "run.json").read_text())
    return SourceSpec.from_dict(meta["source"])


def _events(run_dir) -> list[dict]:
    return read_events(Path(run_dir) / "events.jsonl")


@pytest.mark.criterion(5, "closed-loop efficacy")
def test_verification_loop_beats_no_retries(demo):
    result, elapsed = demo
    full, nov = result.rows[FULL], result.rows[NO_VERIFY]
    assert full["total"] == 20
    assert full["verified"] / full["total"] >= 0.95
    assert full["metrics"]["ID-VLM"] > nov["metrics"]["ID-VLM"]
    assert elapsed < 60.0


@pytest.mark.criterion(5, "closed-loop efficacy")
def test_per_shot_context_beats_global_context(demo):
    result, _ = demo
    assert result.rows[GLOBAL_CONTEXT]["consistency"] < result.rows[FULL]["consistency"]


@pytest.mark.criterion(5, "closed-loop efficacy")
def test_demo_is_deterministic_under_seed(demo, tmp_path):
    result, _ = demo
    again = mock_demo(tmp_path, DEMO)
    assert again.rows == result.rows
    first = json.loads((result.out_dir / "report.json").read_text())
    second = json.loads((tmp_path / "report.json").read_text())
    assert first == second


@pytest.mark.criterion(6, "retry bound and routing")
def test_event_log_retry_bound_and_routing(demo):
    result, _ = demo
    budget = DEMO.max_retries + 1
    for label in (FULL, GLOBAL_CONTEXT):
        events = _events(result.run_dirs[label])
        attempts = defaultdict(set)
        failed = defaultdict(int)
        feedback_len = {}
        for ev in events:
            t = ev["type"]
            if t in ("keyframe", "clip"):
                attempts[ev["shot_id"], t].add(ev["attempt"])
            elif t == "audit":
                failed[ev["shot_id"]] += sum(1 for v in ev["verdicts"] if not v["pass"])
            elif t == "feedback":
                dim, route = ev["feedback"]["dimension"], ev["route"]
                assert route == ("understanding" if dim == "plot" else "generation")
                assert ev["feedback"]["route"] == route
            elif t in ("package_allocated", "refine"):
                n = len(ev["package"]["generation_feedback"])
                feedback_len[ev["shot_id"]] = n
                if t == "refine":
                    assert n == failed[ev["shot_id"]]
        assert attempts
        for key, seen in attempts.items():
            assert len(seen) <= budget and max(seen) <= budget, key
        assert sum(failed.values()) > 0  # faults actually fired
        for sid, n in feedback_len.items():
            assert n == failed[sid], sid


@pytest.mark.criterion(7, "resumability")
def test_kill_after_keyframes_then_resume_matches_uninterrupted(demo, resumed):
    result, _ = demo
    run, backends = resumed
    straight = result.run_dirs[FULL]
    assert normalize(_events(run.dir)) == normalize(_events(straight))
    for name in ("edl.json", "report.json", "screenplay.json"):
        assert (run.dir / name).read_text() == (straight / name).read_text(), name
    assert backends.understanding.inner.calls == []


@pytest.mark.criterion(8, "conditioning invariant")
def test_every_generation_request_is_conditioned(demo, resumed):
    result, _ = demo
    run, _ = resumed
    dirs = list(result.run_dirs.values()) + [run.dir]
    checked = 0
    for run_dir in dirs:
        sp = json.loads((Path(run_dir) / "screenplay.json").read_text())
        scene_of = {s["shot_id"]: s["scene_id"] for s in sp["shots"]}
        for ev in _events(run_dir):
            if ev["type"] != "generation_request":
                continue
            checked += 1
            assert ev["references"], ev
            assert ev["shot_ids"]
            for sid in ev["shot_ids"]:
                assert ev["semantic"].get(sid, "").strip(), (sid, ev["stage"])
            scenes = {scene_of[sid] for sid in ev["shot_ids"]}
            assert len(scenes) == 1
            env = f"reference_images/{scenes.pop()}_environment.png"
            assert ev["references"][0] == env
            if ev["stage"] == "clip":
                assert ev["keyframe"]
    assert checked > 0
