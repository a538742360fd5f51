"""Backend contracts, request/response types and call plumbing.

Five narrow contracts cover every model the engine talks to: understanding,
image generation, video generation, judging and embedding similarity. The
engine never names a vendor; adapters (HTTP or mock) implement these.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, TypeVar, runtime_checkable

from ..errors import ConfigError, PreconditionViolation, TransportError

log = logging.getLogger(__name__)

KINDS = ("understanding", "image_gen", "video_gen", "judge", "embed")
DIMENSIONS = ("quality", "identity", "environment", "plot")
MAX_REFERENCES = 16
MIN_CLIP_SECONDS = 4.0
MAX_CLIP_SECONDS = 8.0


class BackendUnavailable(TransportError):
    """The backend cannot serve this call at all (e.g. disabled path)."""


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    endpoint: str = "mock://"
    auth_env_var: str = ""
    model_name: str = ""
    timeout: float = 120.0
    max_concurrent: int = 4
    retry_on_transport_error: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if not self.timeout > 0:
            raise ConfigError(f"{self.kind}: timeout must be > 0")
        if self.max_concurrent < 1:
            raise ConfigError(f"{self.kind}: max_concurrent must be >= 1")
        if self.retry_on_transport_error < 0:
            raise ConfigError(f"{self.kind}: retry_on_transport_error must be >= 0")

    @property
    def is_mock(self) -> bool:
        return self.endpoint.startswith("mock://")

    @classmethod
    def from_dict(cls, kind: str, d: dict) -> BackendConfig:
        known = {"endpoint", "auth_env_var", "model_name", "timeout", "max_concurrent",
                 "retry_on_transport_error"}
        unknown = set(d) - known - {"kind"}
        if unknown:
            raise ConfigError(f"{kind}: unknown backend keys {sorted(unknown)}")
        return cls(kind=kind, **{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "auth_env_var": self.auth_env_var,
            "model_name": self.model_name,
            "timeout": self.timeout,
            "max_concurrent": self.max_concurrent,
            "retry_on_transport_error": self.retry_on_transport_error,
        }


@dataclass(frozen=True)
class ImageGenRequest:
    prompt: str
    references: tuple[str, ...]
    width: int
    height: int
    seed: int | None = None
    out_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))
        if len(self.references) > MAX_REFERENCES:
            raise PreconditionViolation(f"{len(self.references)} references > {MAX_REFERENCES}")
        if self.width <= 0 or self.height <= 0:
            raise PreconditionViolation("image dimensions must be positive")


@dataclass(frozen=True)
class VideoGenRequest:
    keyframe: str
    references: tuple[str, ...]
    i2v_prompt: str
    duration: float = 6.0
    seed: int | None = None
    attempt: int = 1
    out_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))
        if not MIN_CLIP_SECONDS <= self.duration <= MAX_CLIP_SECONDS:
            raise PreconditionViolation(
                f"clip duration {self.duration} outside [{MIN_CLIP_SECONDS}, {MAX_CLIP_SECONDS}]"
            )
        if not self.keyframe:
            raise PreconditionViolation("a keyframe is required")


@dataclass
class ClipHandle:
    path: str
    duration: float
    tags: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"path": self.path, "duration": self.duration, "tags": self.tags, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> ClipHandle:
        return cls(d["path"], d["duration"], d.get("tags"), d.get("meta", {}))


@dataclass(frozen=True)
class JudgeVerdict:
    dimension: str
    score: float
    passed: bool
    rationale: str = ""

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "score": self.score, "pass": self.passed,
                "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d: dict) -> JudgeVerdict:
        return cls(d["dimension"], d["score"], d["pass"], d.get("rationale", ""))

    @classmethod
    def scored(cls, dimension: str, score: float, threshold: float, rationale: str = ""):
        score = min(10.0, max(0.0, float(score)))
        return cls(dimension, score, score >= threshold, rationale)


@dataclass(frozen=True)
class Region:
    """An image (or clip) plus an optional (x, y, w, h) crop box."""

    image: Any
    box: tuple[int, int, int, int] | None = None


@dataclass(frozen=True)
class JudgeContext:
    package: Any  # MemoryPackage
    shot: Any  # Shot


# ---------------------------------------------------------------------------
# contracts


@runtime_checkable
class UnderstandingBackend(Protocol):
    def understand(self, source: str, instructions: str = "") -> str: ...


@runtime_checkable
class ImageBackend(Protocol):
    def generate_image(self, req: ImageGenRequest) -> bytes: ...


@runtime_checkable
class VideoBackend(Protocol):
    def generate_video(self, req: VideoGenRequest) -> ClipHandle: ...


@runtime_checkable
class JudgeBackend(Protocol):
    def judge(self, content, context: JudgeContext, dimension: str,
              threshold: float = 7.0) -> JudgeVerdict: ...

    def compare_identity(self, region: Region, portrait) -> float: ...

    def score_plot(self, candidate: str, reference: str) -> float: ...

    def judge_group(self, items, dimension: str) -> float: ...


@runtime_checkable
class EmbedBackend(Protocol):
    def embed_similarity(self, a: Region, b: Region) -> float: ...


# ---------------------------------------------------------------------------
# plumbing

T = TypeVar("T")


def call_with_retries(fn: Callable[[], T], retries: int) -> T:
    """Run ``fn``; on TransportError try again up to ``retries`` more times."""
    for attempt in range(retries + 1):
        try:
            return fn()
        except TransportError as exc:
            if isinstance(exc, BackendUnavailable) or attempt == retries:
                raise
            log.info("transport error (%s), retry %d/%d", exc, attempt + 1, retries)
    raise AssertionError("unreachable")


class Guarded:
    """Wraps an adapter with a bounded admission gate and transport retries."""

    def __init__(self, inner, config: BackendConfig):
        self.inner = inner
        self.config = config
        self._gate = threading.BoundedSemaphore(config.max_concurrent)

    def __getattr__(self, name):
        attr = getattr(self.inner, name)
        if not callable(attr) or name.startswith("_"):
            return attr

        def call(*args, **kwargs):
            with self._gate:
                return call_with_retries(
                    lambda: attr(*args, **kwargs), self.config.retry_on_transport_error
                )

        return call


@dataclass
class Backends:
    understanding: Any
    image_gen: Any
    video_gen: Any
    judge: Any
    embed: Any

    def identities(self) -> dict[str, str]:
        out = {}
        for kind in KINDS:
            b = getattr(self, kind)
            inner = getattr(b, "inner", b)
            cfg = getattr(b, "config", None)
            name = type(inner).__name__
            if cfg is not None and cfg.model_name:
                name += f":{cfg.model_name}"
            out[kind] = name
        return out
