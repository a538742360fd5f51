from __future__ import annotations

import base64
import json
from dataclasses import replace

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import synthetic
from reshoot.backends import (
    BackendConfig,
    BackendUnavailable,
    ClipHandle,
    Guarded,
    ImageGenRequest,
    JudgeContext,
    JudgeVerdict,
    Region,
    VideoGenRequest,
    build_backends,
    call_with_retries,
)
from reshoot.backends.http import HttpEmbed, HttpImageGen, HttpJudge, HttpUnderstanding
from reshoot.backends.mock import (
    IMPOSTOR,
    Flaky,
    MockEmbed,
    MockImageGen,
    MockJudge,
    MockUnderstanding,
    MockVideoGen,
    MockWorld,
    render_portrait,
)
from reshoot.errors import (
    BackendRefusal,
    ConfigError,
    NonconformingOutput,
    PreconditionViolation,
    TransportError,
)
from reshoot.images import decode_png, read_sidecar, write_sidecar
from reshoot.memory import MemoryPackage
from reshoot.screenplay import parse_screenplay, serialize_screenplay


def _cell_prompt(scene: str, chars: list[str], plot: str = "she looks up", attempt: int = 1,
                 rows: int = 1) -> str:
    lines = ["STYLE: test"]
    for i in range(rows * rows):
        r, c = divmod(i, rows)
        lines.append(f"CELL ({r},{c}): [shot={i + 1}; scene={scene}; characters={','.join(chars)}; "
                     f"attempt={attempt}] {plot} | look: lighting x; color y; mood z")
    return "\n".join(lines)


def _image(tmp_path, name, scene, chars, plot="she looks up", world=None, size=(192, 108)):
    gen = MockImageGen(world or MockWorld())
    out = tmp_path / name
    gen.generate_image(ImageGenRequest(_cell_prompt(scene, chars, plot), (), *size,
                                       out_path=str(out)))
    return out


def _ctx(scene, chars, plot="she looks up"):
    sp = synthetic(1, 0)
    shot = sp.shots[0]
    return JudgeContext(package=None, shot=replace(shot, scene_id=scene, characters=tuple(chars),
                                                   one_shot_prompt=plot))


# ---------------------------------------------------------------------------
# mock determinism and fidelity


def test_understanding_is_deterministic():
    world = MockWorld(seed=7)
    a = MockUnderstanding(world).understand("demo_2scene")
    b = MockUnderstanding(MockWorld(seed=7)).understand("demo_2scene")
    assert a == b
    assert serialize_screenplay(parse_screenplay(a)) == a


def test_understanding_unknown_source_is_transport_error():
    with pytest.raises(TransportError):
        MockUnderstanding(MockWorld()).understand("no_such_video.mp4")


def test_nonconforming_understanding_is_detected():
    with pytest.raises(NonconformingOutput):
        MockUnderstanding(MockWorld(), nonconforming=True).understand("demo_2scene")


def test_faulty_image_generation_is_reproducible():
    req = ImageGenRequest(_cell_prompt("major_scene_01", ["@character_01"], rows=3), (), 96, 54,
                          seed=3)
    a = MockImageGen(MockWorld(seed=1, fault_rate=0.5)).generate_image(req)
    b = MockImageGen(MockWorld(seed=1, fault_rate=0.5)).generate_image(req)
    assert a == b


def test_clean_sidecar_matches_prompt(tmp_path):
    out = _image(tmp_path, "k.png", "major_scene_01", ["@character_01", "@character_02"])
    (cell,) = read_sidecar(out)["cells"]
    assert cell["scene"] == "major_scene_01"
    assert cell["characters"] == ["@character_01", "@character_02"]
    assert cell["plot"] == "she looks up"
    assert "drift" not in cell


def test_image_honors_requested_dimensions():
    data = MockImageGen(MockWorld()).generate_image(
        ImageGenRequest(_cell_prompt("s", ["@character_01"]), (), 1920, 1080))
    assert decode_png(data).shape == (1080, 1920, 3)


def test_full_fault_rate_always_drifts(tmp_path):
    out = _image(tmp_path, "k.png", "major_scene_01", ["@character_01"],
                 world=MockWorld(fault_rate=1.0))
    assert "drift" in read_sidecar(out)["cells"][0]


def test_fault_schedule_limits_attempts(tmp_path):
    gen = MockImageGen(MockWorld(fault_rate=1.0, fault_schedule={1}))
    for attempt, drifts in ((1, True), (2, False)):
        out = tmp_path / f"a{attempt}.png"
        req = ImageGenRequest(_cell_prompt("s", ["@character_01"], attempt=attempt), (), 32, 18,
                              out_path=str(out))
        gen.generate_image(req)
        assert ("drift" in read_sidecar(out)["cells"][0]) == drifts


def test_world_validation():
    with pytest.raises(ValueError):
        MockWorld(fault_rate=1.5)
    with pytest.raises(ValueError):
        MockWorld(drift_kinds={"melting"})


def test_video_duration_precondition():
    with pytest.raises(PreconditionViolation):
        VideoGenRequest("k.png", (), "walk", duration=9)
    with pytest.raises(PreconditionViolation):
        VideoGenRequest("", (), "walk")
    with pytest.raises(PreconditionViolation):
        ImageGenRequest("p", tuple(str(i) for i in range(17)), 10, 10)


def test_clip_inherits_keyframe_tags(tmp_path):
    kf = _image(tmp_path, "k.png", "major_scene_01", ["@character_01"])
    clip = MockVideoGen(MockWorld()).generate_video(
        VideoGenRequest(str(kf), (), "she turns", out_path=str(tmp_path / "c.json")))
    assert isinstance(clip, ClipHandle) and clip.duration == 6.0
    samples = clip.tags["samples"]
    assert len(samples) == 3
    assert all(s["characters"] == ["@character_01"] for s in samples)
    assert json.loads((tmp_path / "c.json").read_text())["keyframe"] == "k.png"


def test_clip_drift_hits_one_sample(tmp_path):
    kf = _image(tmp_path, "k.png", "major_scene_01", ["@character_01"])
    clip = MockVideoGen(MockWorld(fault_rate=1.0)).generate_video(
        VideoGenRequest(str(kf), (), "she turns"))
    assert sum("drift" in s for s in clip.tags["samples"]) == 1


# ---------------------------------------------------------------------------
# mock judge and embedder


def test_judge_scores_exact_match_ten(tmp_path):
    img = _image(tmp_path, "k.png", "major_scene_01", ["@character_01"])
    ctx = _ctx("major_scene_01", ["@character_01"])
    for dim in ("quality", "identity", "environment", "plot"):
        v = MockJudge().judge(img, ctx, dim)
        assert v.score == 10.0 and v.passed


def test_judge_swap_is_a_four(tmp_path):
    img = _image(tmp_path, "k.png", "major_scene_01", [IMPOSTOR])
    v = MockJudge().judge(img, _ctx("major_scene_01", ["@character_01"]), "identity")
    assert v.score == 4.0 and not v.passed
    assert MockJudge().judge(img, _ctx("major_scene_01", ["@character_01"]), "quality").passed


def test_wrong_scene_only_fails_environment(tmp_path):
    img = _image(tmp_path, "k.png", "major_scene_02", ["@character_01"])
    ctx = _ctx("major_scene_01", ["@character_01"])
    verdicts = {d: MockJudge().judge(img, ctx, d).passed
                for d in ("quality", "identity", "environment", "plot")}
    assert verdicts == {"quality": True, "identity": True, "environment": False, "plot": True}


def test_judge_threshold_and_clamping():
    v = JudgeVerdict.scored("plot", 12.0, 7.0)
    assert v.score == 10.0 and v.passed
    assert not JudgeVerdict.scored("plot", 6.99, 7.0).passed
    assert JudgeVerdict.from_dict(v.to_dict()) == v


def test_identity_comparison(tmp_path):
    portrait = render_portrait("@character_01", tmp_path / "p.png", 16, 16)
    good = _image(tmp_path, "g.png", "s", ["@character_01"])
    bad = _image(tmp_path, "b.png", "s", ["@character_02"])
    judge = MockJudge()
    assert judge.compare_identity(Region(good), portrait) == 10.0
    assert judge.compare_identity(Region(bad), portrait) == 0.0
    with pytest.raises(BackendUnavailable):
        MockJudge(identity_available=False).compare_identity(Region(good), portrait)


def test_identity_crop_hits_one_slot(tmp_path):
    img = _image(tmp_path, "k.png", "s", ["@character_01", "@character_02"], size=(200, 100))
    judge = MockJudge()
    p1 = render_portrait("@character_01", tmp_path / "p1.png", 8, 8)
    left, right = Region(img, (10, 30, 20, 20)), Region(img, (110, 30, 20, 20))
    assert judge.compare_identity(left, p1) == 10.0
    assert judge.compare_identity(right, p1) == 0.0


def test_embed_values(tmp_path):
    def tagged(name, tags):
        p = tmp_path / name
        p.write_bytes(b"")
        write_sidecar(p, {"cells": [{"row": 0, "col": 0, "scene": "", "characters": tags}]})
        return p

    emb = MockEmbed()
    a = tagged("a.png", ["x", "y"])
    assert emb.embed_similarity(Region(a), Region(a)) == 1.0
    assert emb.embed_similarity(Region(a), Region(tagged("c.png", ["u", "v"]))) == 0.0
    assert emb.embed_similarity(Region(a), Region(tagged("b.png", ["x", "z"]))) == pytest.approx(1 / 3)


@given(ta=st.sets(st.sampled_from("abcdef"), max_size=5),
       tb=st.sets(st.sampled_from("abcdef"), max_size=5))
def test_embed_symmetric_and_bounded(tmp_path_factory, ta, tb):
    d = tmp_path_factory.mktemp("emb")
    paths = []
    for name, tags in (("a", ta), ("b", tb)):
        p = d / f"{name}.png"
        p.write_bytes(b"")
        write_sidecar(p, {"cells": [{"row": 0, "col": 0, "scene": "", "characters": sorted(tags)}]})
        paths.append(Region(p))
    emb = MockEmbed()
    s = emb.embed_similarity(*paths)
    assert s == emb.embed_similarity(*reversed(paths))
    assert 0.0 <= s <= 1.0


def test_plot_score_is_token_jaccard():
    judge = MockJudge()
    assert judge.score_plot("a b", "a b") == 10.0
    assert judge.score_plot("a b", "a c") == pytest.approx(10 / 3, abs=1e-4)
    assert judge.score_plot("", "") == 10.0


# ---------------------------------------------------------------------------
# retries and admission


@pytest.mark.parametrize("k", [0, 1, 2])
def test_retries_absorb_up_to_budget(k):
    flaky = Flaky(MockJudge(), failures=k)
    assert call_with_retries(lambda: flaky.score_plot("a", "a"), retries=2) == 10.0
    assert flaky.seen == k + 1


def test_retries_exhausted_raise():
    flaky = Flaky(MockJudge(), failures=3)
    with pytest.raises(TransportError):
        call_with_retries(lambda: flaky.score_plot("a", "a"), retries=2)
    assert flaky.seen == 3


def test_unavailable_is_not_retried():
    calls = []

    def fn():
        calls.append(1)
        raise BackendUnavailable("off")

    with pytest.raises(BackendUnavailable):
        call_with_retries(fn, retries=5)
    assert len(calls) == 1


def test_guarded_applies_retry_budget():
    flaky = Flaky(MockJudge(), failures=1)
    guarded = Guarded(flaky, BackendConfig("judge", retry_on_transport_error=1))
    assert guarded.score_plot("a", "a") == 10.0


def test_backend_config_validation():
    with pytest.raises(ConfigError):
        BackendConfig("oracle")
    with pytest.raises(ConfigError):
        BackendConfig("judge", timeout=0)
    with pytest.raises(ConfigError):
        BackendConfig.from_dict("judge", {"endpoint": "x", "api_key": "secret"})
    cfg = BackendConfig.from_dict("judge", {"endpoint": "https://x", "max_concurrent": 2})
    assert BackendConfig.from_dict("judge", cfg.to_dict()) == cfg


def test_build_backends_uses_mocks_by_default():
    backends = build_backends({})
    assert set(backends.identities().values()) == {"MockUnderstanding", "MockImageGen",
                                                   "MockVideoGen", "MockJudge", "MockEmbed"}


# ---------------------------------------------------------------------------
# HTTP adapters


def _http(cls, handler, kind, env="", **kw):
    cfg = BackendConfig(kind, endpoint="https://models.example/v1", auth_env_var=env,
                        model_name="m1", **kw)
    return cls(cfg, transport=httpx.MockTransport(handler))


def test_http_sends_bearer_token_from_env(monkeypatch):
    monkeypatch.setenv("RESHOOT_TEST_TOKEN", "tok-123")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"similarity": 0.25})

    emb = _http(HttpEmbed, handler, "embed", env="RESHOOT_TEST_TOKEN")
    assert emb.embed_similarity(Region("https://x/a.png"), Region("https://x/b.png")) == 0.25
    assert seen["auth"] == "Bearer tok-123"
    assert seen["body"]["op"] == "embed_similarity" and seen["body"]["model"] == "m1"


def test_http_unset_credential_is_unavailable(monkeypatch):
    monkeypatch.delenv("RESHOOT_MISSING", raising=False)
    emb = _http(HttpEmbed, lambda r: httpx.Response(200, json={}), "embed", env="RESHOOT_MISSING")
    with pytest.raises(BackendUnavailable):
        emb.embed_similarity(Region("https://x/a"), Region("https://x/b"))


@pytest.mark.parametrize("status,error", [(503, TransportError), (429, TransportError),
                                          (400, BackendRefusal), (403, BackendRefusal)])
def test_http_status_mapping(status, error):
    judge = _http(HttpJudge, lambda r: httpx.Response(status, text="no"), "judge")
    with pytest.raises(error):
        judge.score_plot("a", "b")


def test_http_connection_error_is_transport():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(TransportError):
        _http(HttpJudge, handler, "judge").score_plot("a", "b")


def test_http_image_reads_base64_reply(tmp_path):
    png = MockImageGen(MockWorld()).generate_image(ImageGenRequest("x", (), 8, 8))
    ref = tmp_path / "r.png"
    ref.write_bytes(png)

    def handler(request):
        body = json.loads(request.content)
        assert body["references"][0].startswith("data:image/png;base64,")
        return httpx.Response(200, json={"image": base64.b64encode(png).decode()})

    gen = _http(HttpImageGen, handler, "image_gen")
    assert gen.generate_image(ImageGenRequest("x", (str(ref),), 8, 8)) == png


def test_http_understanding_validates_output():
    good = MockUnderstanding(MockWorld()).understand("demo_2scene")
    ok = _http(HttpUnderstanding, lambda r: httpx.Response(200, json={"screenplay": good}),
               "understanding")
    assert ok.understand("video.mp4") == good
    broken = json.loads(good)
    broken["shots"][0]["characters"].append("@character_99")
    bad = _http(HttpUnderstanding, lambda r: httpx.Response(200, json={"screenplay": broken}),
                "understanding")
    with pytest.raises(NonconformingOutput):
        bad.understand("video.mp4")


def _judge_server(request):
    body = json.loads(request.content)
    op = body["op"]
    if op == "judge":
        return httpx.Response(200, json={"score": 8, "rationale": "fine"})
    if op == "compare_identity":
        return httpx.Response(200, json={"score": 10})
    if op == "score_plot":
        return httpx.Response(200, json={"score": 10})
    return httpx.Response(200, json={"score": 9})


@pytest.fixture(params=["mock", "http"])
def any_judge(request):
    if request.param == "mock":
        return MockJudge()
    return _http(HttpJudge, _judge_server, "judge")


def test_judge_contract(tmp_path, any_judge):
    """Both adapters honour the same return types and ranges."""
    img = _image(tmp_path, "k.png", "major_scene_01", ["@character_01"])
    ctx = _ctx("major_scene_01", ["@character_01"])
    ctx = JudgeContext(MemoryPackage("1", "major_scene_01", ("@character_01",), None, (), (), {},
                                     {}, {}, ""), ctx.shot)
    portrait = render_portrait("@character_01", tmp_path / "p.png", 8, 8)
    v = any_judge.judge(img, ctx, "identity")
    assert isinstance(v, JudgeVerdict) and 0 <= v.score <= 10 and v.dimension == "identity"
    assert 0 <= any_judge.compare_identity(Region(img), portrait) <= 10
    assert 0 <= any_judge.score_plot("a b", "a b") <= 10
    assert 0 <= any_judge.judge_group([(img, ctx)], "identity") <= 10
