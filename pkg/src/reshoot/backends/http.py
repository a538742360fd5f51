"""Generic JSON-over-HTTP adapters.

Every kind POSTs one JSON body to its configured endpoint. Reference images
travel as base64 data URLs (or as-is when already a URL). The credential is
read from the environment variable named in the config and sent as a bearer
token; it never appears in config files or logs.
"""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path

import httpx

from ..errors import BackendRefusal, TransportError
from .base import (
    BackendConfig,
    BackendUnavailable,
    ClipHandle,
    ImageGenRequest,
    JudgeContext,
    JudgeVerdict,
    Region,
    VideoGenRequest,
)

# status codes worth retrying; everything else 4xx is a refusal
_RETRYABLE = {408, 429, 500, 502, 503, 504}


def encode_reference(ref) -> str:
    ref = str(ref)
    if ref.startswith(("http://", "https://", "data:")):
        return ref
    data = Path(ref).read_bytes()
    return "data:image/png;base64," + base64.b64encode(data).decode()


def _region_payload(region) -> dict:
    if not isinstance(region, Region):
        region = Region(region)
    src = region.image
    if isinstance(src, ClipHandle):
        return {"clip": src.to_dict(), "box": region.box}
    return {"image": encode_reference(src), "box": list(region.box) if region.box else None}


class HttpAdapter:
    """Shared transport; subclasses only shape bodies and parse replies."""

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._client = httpx.Client(timeout=config.timeout, transport=transport)

    def _headers(self) -> dict:
        headers = {"content-type": "application/json"}
        if self.config.auth_env_var:
            token = os.environ.get(self.config.auth_env_var)
            if not token:
                raise BackendUnavailable(
                    f"{self.config.kind}: environment variable {self.config.auth_env_var} is unset"
                )
            headers["authorization"] = f"Bearer {token}"
        return headers

    def post(self, op: str, body: dict) -> httpx.Response:
        payload = {"op": op, "model": self.config.model_name, **body}
        try:
            resp = self._client.post(self.config.endpoint, json=payload, headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.config.kind}: {exc}") from exc
        if resp.status_code in _RETRYABLE:
            raise TransportError(f"{self.config.kind}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendRefusal(f"{self.config.kind}: HTTP {resp.status_code}: {resp.text[:200]}")
        return resp

    def post_json(self, op: str, body: dict) -> dict:
        resp = self.post(op, body)
        try:
            return resp.json()
        except json.JSONDecodeError as exc:
            raise TransportError(f"{self.config.kind}: reply is not JSON") from exc

    def close(self) -> None:
        self._client.close()


class HttpUnderstanding(HttpAdapter):
    def understand(self, source: str, instructions: str = "") -> str:
        from .mock import check_screenplay_output

        reply = self.post_json("understand", {"source": source, "instructions": instructions})
        text = reply.get("screenplay")
        if isinstance(text, dict):
            text = json.dumps(text)
        if not isinstance(text, str):
            raise TransportError("understanding reply lacks a screenplay")
        return check_screenplay_output(text)


class HttpImageGen(HttpAdapter):
    def generate_image(self, req: ImageGenRequest) -> bytes:
        resp = self.post("generate_image", {
            "prompt": req.prompt,
            "references": [encode_reference(r) for r in req.references],
            "width": req.width,
            "height": req.height,
            "seed": req.seed,
        })
        if resp.headers.get("content-type", "").startswith("image/"):
            return resp.content
        try:
            data = resp.json()["image"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise TransportError("image reply carries no image") from exc
        return base64.b64decode(data.split(",", 1)[-1])


class HttpVideoGen(HttpAdapter):
    def generate_video(self, req: VideoGenRequest) -> ClipHandle:
        reply = self.post_json("generate_video", {
            "keyframe": encode_reference(req.keyframe),
            "references": [encode_reference(r) for r in req.references],
            "i2v_prompt": req.i2v_prompt,
            "duration": req.duration,
            "seed": req.seed,
        })
        path = ""
        if "video" in reply and req.out_path:
            out = Path(req.out_path).with_suffix(".mp4")
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_bytes(base64.b64decode(reply["video"].split(",", 1)[-1]))
            path = str(out)
        else:
            path = reply.get("url", "")
        return ClipHandle(path=path, duration=float(reply.get("duration", req.duration)),
                          meta={"backend": self.config.model_name})


class HttpJudge(HttpAdapter):
    def judge(self, content, context: JudgeContext, dimension: str,
              threshold: float = 7.0) -> JudgeVerdict:
        shot = context.shot
        reply = self.post_json("judge", {
            "content": _region_payload(content),
            "dimension": dimension,
            "package": context.package.to_dict(),
            "shot": {"shot_id": shot.shot_id, "scene_id": shot.scene_id,
                     "characters": list(shot.characters), "plot": shot.one_shot_prompt},
        })
        return JudgeVerdict.scored(dimension, float(reply["score"]), threshold,
                                   str(reply.get("rationale", "")))

    def compare_identity(self, region, portrait) -> float:
        reply = self.post_json("compare_identity", {
            "region": _region_payload(region), "portrait": encode_reference(portrait)})
        if reply.get("unavailable"):
            raise BackendUnavailable("judge declined identity comparison")
        return float(reply["score"])

    def score_plot(self, candidate: str, reference: str) -> float:
        return float(self.post_json("score_plot", {"candidate": candidate,
                                                   "reference": reference})["score"])

    def judge_group(self, items, dimension: str) -> float:
        reply = self.post_json("judge_group", {
            "dimension": dimension,
            "items": [{"content": _region_payload(c), "shot_id": ctx.shot.shot_id}
                      for c, ctx in items],
        })
        return float(reply["score"])


class HttpEmbed(HttpAdapter):
    def embed_similarity(self, a, b) -> float:
        reply = self.post_json("embed_similarity", {"a": _region_payload(a),
                                                    "b": _region_payload(b)})
        return float(reply["similarity"])


ADAPTERS = {
    "understanding": HttpUnderstanding,
    "image_gen": HttpImageGen,
    "video_gen": HttpVideoGen,
    "judge": HttpJudge,
    "embed": HttpEmbed,
}
