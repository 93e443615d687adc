"""Writer for the SALF feature-file format (independent of the consumer).

Layout, all little-endian:

    magic  "SALF" (4 bytes)
    u16    format version (1)
    u32    n   patch token count
    u32    d   token dimension
    u16    id byte length, then UTF-8 id
    u8     geotag variant: 0 none, 1 planar, 2 frame
           variant 1: two f64 (x, y meters); variant 2: one i64 frame
    f32[n*d]  patch tokens, row-major
    f32[d]    global token
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SALF"
VERSION = 1


@dataclass(frozen=True)
class PlanarTag:
    x: float
    y: float


@dataclass(frozen=True)
class FrameTag:
    frame: int


def _pack_geotag(tag) -> bytes:
    if tag is None:
        return struct.pack("<B", 0)
    if isinstance(tag, PlanarTag):
        return struct.pack("<Bdd", 1, tag.x, tag.y)
    if isinstance(tag, FrameTag):
        return struct.pack("<Bq", 2, tag.frame)
    raise TypeError(f"unsupported geotag {tag!r}")


def write_salf(path, image_id: str, tokens: np.ndarray, global_token: np.ndarray, geotag=None):
    tokens = np.asarray(tokens, dtype="<f4", order="C")
    global_token = np.asarray(global_token, dtype="<f4", order="C")
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"tokens must be (n >= 1, d), got {tokens.shape}")
    if global_token.shape != (tokens.shape[1],):
        raise ValueError(
            f"global token shape {global_token.shape} does not match d={tokens.shape[1]}"
        )
    if not (np.isfinite(tokens).all() and np.isfinite(global_token).all()):
        raise ValueError(f"non-finite token values for {image_id!r}")
    raw_id = image_id.encode("utf-8")
    if len(raw_id) > 0xFFFF:
        raise ValueError("image id too long")
    n, d = tokens.shape
    blob = b"".join(
        (
            MAGIC,
            struct.pack("<H", VERSION),
            struct.pack("<II", n, d),
            struct.pack("<H", len(raw_id)),
            raw_id,
            _pack_geotag(geotag),
            tokens.tobytes(),
            global_token.tobytes(),
        )
    )
    Path(path).write_bytes(blob)


def read_geotag_csv(path) -> dict[str, PlanarTag | FrameTag]:
    """``id,x,y`` or ``id,frame`` lines; '#' comments; duplicate ids rejected."""
    tags: dict[str, PlanarTag | FrameTag] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.strip()
            if not body or body.startswith("#"):
                continue
            fields = [f.strip() for f in body.split(",")]
            if fields[0] in tags:
                raise ValueError(f"{path}: duplicate geotag id {fields[0]!r} (line {lineno})")
            try:
                if len(fields) == 3:
                    tags[fields[0]] = PlanarTag(float(fields[1]), float(fields[2]))
                elif len(fields) == 2:
                    tags[fields[0]] = FrameTag(int(fields[1]))
                else:
                    raise ValueError("expected 2 or 3 comma-separated fields")
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return tags
