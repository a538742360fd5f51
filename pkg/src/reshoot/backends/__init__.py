"""Pluggable model backends: contracts, HTTP adapters and offline mocks."""

from __future__ import annotations

from .base import (
    DIMENSIONS,
    KINDS,
    BackendConfig,
    Backends,
    BackendUnavailable,
    ClipHandle,
    Guarded,
    ImageGenRequest,
    JudgeContext,
    JudgeVerdict,
    Region,
    VideoGenRequest,
    call_with_retries,
)
from .mock import (
    MockEmbed,
    MockImageGen,
    MockJudge,
    MockUnderstanding,
    MockVideoGen,
    MockWorld,
)


def build_backends(configs: dict, world: MockWorld | None = None) -> Backends:
    """One guarded adapter per kind; ``mock://`` endpoints get the mock."""
    from .http import ADAPTERS

    world = world or MockWorld()
    mocks = {
        "understanding": lambda: MockUnderstanding(world),
        "image_gen": lambda: MockImageGen(world),
        "video_gen": lambda: MockVideoGen(world),
        "judge": lambda: MockJudge(world),
        "embed": lambda: MockEmbed(world),
    }
    built = {}
    for kind in KINDS:
        cfg = configs.get(kind) or BackendConfig(kind)
        inner = mocks[kind]() if cfg.is_mock else ADAPTERS[kind](cfg)
        built[kind] = Guarded(inner, cfg)
    return Backends(**built)


__all__ = [
    "DIMENSIONS", "KINDS", "BackendConfig", "Backends", "BackendUnavailable", "ClipHandle",
    "Guarded", "ImageGenRequest", "JudgeContext", "JudgeVerdict", "Region", "VideoGenRequest",
    "call_with_retries", "MockEmbed", "MockImageGen", "MockJudge", "MockUnderstanding",
    "MockVideoGen", "MockWorld", "build_backends",
]
