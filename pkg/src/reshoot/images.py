"""Image handles, PNG I/O and the ``<image>.tags.json`` sidecar convention."""

from __future__ import annotations

import io
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UnreadableImage

SIDECAR_SUFFIX = ".tags.json"


@dataclass(frozen=True)
class ImageRef:
    path: str
    width: int
    height: int

    @property
    def ratio(self) -> float:
        return self.width / self.height


def image_size(path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def read_image(path) -> np.ndarray:
    """Load as an (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")).copy()
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB")).copy()
    except (OSError, ValueError) as exc:
        raise UnreadableImage(str(exc)) from exc


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_image(path, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(pixels))
    return path


def sidecar_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.name + SIDECAR_SUFFIX)


def read_sidecar(image_path) -> dict | None:
    p = sidecar_path(image_path)
    if not p.exists():
        return None
    return json.loads(p.read_text())


def write_sidecar(image_path, tags: dict) -> Path:
    p = sidecar_path(image_path)
    p.write_text(json.dumps(tags, sort_keys=True) + "\n")
    return p


def copy_with_sidecar(src, dst) -> Path:
    """Copy an image and, when present, its sidecar."""
    src, dst = Path(src), Path(dst)
    dst.parent.mkdir(parents=True, exist_ok=True)
    if src.resolve() != dst.resolve():
        shutil.copyfile(src, dst)
        side = sidecar_path(src)
        if side.exists():
            shutil.copyfile(side, sidecar_path(dst))
    return dst
