"""Bit-exact little-endian file formats.

Three binary containers share the same conventions (magic, u16 version,
length-prefixed UTF-8 ids, f32 tensor payloads, f64 planar coordinates):

* ``SALF`` - one feature set per file: header (n, d), id, geotag record,
  n*d patch tokens row-major, then the global token.
* ``SALW`` - aggregator weights: config block, then named tensors. The
  descriptor layout this package produces ([global block | cluster matrix
  flattened row-major]) is part of this format's contract.
* ``SALD`` - descriptor database: (count, dim) header, then per record
  id, geotag record and the unit-norm values.

Geotag records are one tag byte (0 none, 1 planar, 2 frame) followed by
two f64 coordinates or one i64 frame index. The text sidecar format is
``id,x,y`` or ``id,frame`` lines with ``#`` comments.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .aggregate import Descriptor
from .errors import FormatError, ValidationError
from .model import AggregatorConfig, AggregatorWeights, FeatureSet, GeoTag, expected_shapes

FEATURE_MAGIC = b"SALF"
WEIGHT_MAGIC = b"SALW"
DB_MAGIC = b"SALD"
FORMAT_VERSION = 1

_GEOTAG_NONE = 0
_GEOTAG_PLANAR = 1
_GEOTAG_FRAME = 2


class _Reader:
    """Byte cursor that reports the offset of whatever failed to parse."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise FormatError(
                f"{self.path}: truncated while reading {what}", offset=self.pos
            )
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def expect_magic(self, magic: bytes):
        got = self.take(4, "magic")
        if got != magic:
            raise FormatError(
                f"{self.path}: bad magic {got!r}, expected {magic!r}", offset=0
            )
        (version,) = self.unpack("<H", "format version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{self.path}: unsupported format version {version}", offset=4
            )

    def string(self, what: str) -> str:
        (length,) = self.unpack("<H", f"{what} length")
        raw = self.take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(
                f"{self.path}: {what} is not valid UTF-8", offset=self.pos - length
            ) from exc

    def f32_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4", count=count).copy()

    def geotag(self) -> GeoTag | None:
        (tag,) = self.unpack("<B", "geotag variant")
        if tag == _GEOTAG_NONE:
            return None
        if tag == _GEOTAG_PLANAR:
            x, y = self.unpack("<dd", "planar coordinates")
            return GeoTag.planar(x, y)
        if tag == _GEOTAG_FRAME:
            (frame,) = self.unpack("<q", "frame index")
            return GeoTag.at_frame(frame)
        raise FormatError(
            f"{self.path}: unknown geotag variant {tag}", offset=self.pos - 1
        )

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes", offset=self.pos
            )


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"id too long to serialize ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


def _pack_geotag(tag: GeoTag | None) -> bytes:
    if tag is None:
        return struct.pack("<B", _GEOTAG_NONE)
    if tag.kind == "planar":
        return struct.pack("<Bdd", _GEOTAG_PLANAR, tag.x, tag.y)
    return struct.pack("<Bq", _GEOTAG_FRAME, tag.frame)


def write_features(features: FeatureSet, path):
    tokens = np.ascontiguousarray(features.tokens, dtype="<f4")
    global_token = np.ascontiguousarray(features.global_token, dtype="<f4")
    parts = [
        FEATURE_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<II", features.n, features.d),
        _pack_string(features.id),
        _pack_geotag(features.geotag),
        tokens.tobytes(),
        global_token.tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> FeatureSet:
    r = _Reader(Path(path).read_bytes(), path)
    r.expect_magic(FEATURE_MAGIC)
    n, d = r.unpack("<II", "token counts")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: header requires n >= 1 and d >= 1", offset=6)
    image_id = r.string("image id")
    geotag = r.geotag()
    tokens = r.f32_array(n * d, "patch tokens").reshape(n, d)
    global_token = r.f32_array(d, "global token")
    r.done()
    return FeatureSet(id=image_id, tokens=tokens, global_token=global_token, geotag=geotag)


def write_weights(weights: AggregatorWeights, path):
    c = weights.config
    tensors = weights.tensors()
    parts = [
        WEIGHT_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<IIIII", c.m, c.l, c.g_dim, c.d, c.hidden),
        struct.pack("<f", c.dropout_rate),
        struct.pack("<I", c.sinkhorn_iters),
        struct.pack("<I", len(tensors)),
    ]
    for name, arr in tensors.items():
        # note: ascontiguousarray would promote the 0-d dustbin scalar to 1-d
        arr = np.asarray(arr, dtype="<f4", order="C")
        parts.append(_pack_string(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path) -> AggregatorWeights:
    r = _Reader(Path(path).read_bytes(), path)
    r.expect_magic(WEIGHT_MAGIC)
    m, l, g_dim, d, hidden = r.unpack("<IIIII", "config block")
    (dropout_rate,) = r.unpack("<f", "dropout rate")
    (sinkhorn_iters,) = r.unpack("<I", "sinkhorn iterations")
    config = AggregatorConfig(
        m=m, l=l, g_dim=g_dim, d=d, hidden=hidden,
        dropout_rate=float(dropout_rate), sinkhorn_iters=sinkhorn_iters,
    )
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string("tensor name")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name!r}", offset=r.pos)
        (ndim,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{ndim}I", "tensor dims") if ndim else ()
        size = int(np.prod(dims)) if ndim else 1
        tensors[name] = r.f32_array(size, f"tensor {name!r} data").reshape(dims)
    r.done()
    try:
        weights = AggregatorWeights.from_tensors(config, tensors)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    weights.validate()
    return weights


def write_db(descriptors: list[Descriptor], geotags, path):
    if geotags is None:
        geotags = [None] * len(descriptors)
    if len(geotags) != len(descriptors):
        raise ValidationError("descriptor and geotag lists differ in length")
    dim = descriptors[0].dim if descriptors else 0
    parts = [
        DB_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<II", len(descriptors), dim),
    ]
    for desc, tag in zip(descriptors, geotags):
        if desc.dim != dim:
            raise ValidationError(f"descriptor {desc.id!r} has dim {desc.dim}, expected {dim}")
        parts.append(_pack_string(desc.id))
        parts.append(_pack_geotag(tag))
        parts.append(np.ascontiguousarray(desc.values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_db(path) -> tuple[list[Descriptor], list[GeoTag | None]]:
    r = _Reader(Path(path).read_bytes(), path)
    r.expect_magic(DB_MAGIC)
    count, dim = r.unpack("<II", "record counts")
    descriptors: list[Descriptor] = []
    geotags: list[GeoTag | None] = []
    for k in range(count):
        rec_id = r.string("record id")
        tag = r.geotag()
        values = r.f32_array(dim, f"record {rec_id!r} values")
        norm = float(np.linalg.norm(values))
        if abs(norm - 1.0) > 1e-4:
            raise ValidationError(
                f"{path}: record {rec_id!r} is not unit-norm (|v| = {norm:.6f})"
            )
        descriptors.append(Descriptor(values=values, id=rec_id))
        geotags.append(tag)
    r.done()
    return descriptors, geotags


def read_geotags(path) -> dict[str, GeoTag]:
    """Parse ``id,x,y`` / ``id,frame`` lines into a geotag map."""
    tags: dict[str, GeoTag] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.strip()
            if not body or body.startswith("#"):
                continue
            fields = [f.strip() for f in body.split(",")]
            if fields[0] in tags:
                raise FormatError(
                    f"{path}: duplicate geotag id {fields[0]!r}", line=lineno
                )
            try:
                if len(fields) == 3:
                    tags[fields[0]] = GeoTag.planar(float(fields[1]), float(fields[2]))
                elif len(fields) == 2:
                    tags[fields[0]] = GeoTag.at_frame(int(fields[1]))
                else:
                    raise ValueError("expected 2 or 3 comma-separated fields")
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from exc
    return tags


def read_labels(path) -> dict[str, int]:
    """Parse explicit ``id,label`` place-label lines ('#' comments allowed)."""
    labels: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.strip()
            if not body or body.startswith("#"):
                continue
            fields = [f.strip() for f in body.split(",")]
            if len(fields) != 2:
                raise FormatError(
                    f"{path}: expected 'id,label'", line=lineno
                )
            if fields[0] in labels:
                raise FormatError(
                    f"{path}: duplicate label id {fields[0]!r}", line=lineno
                )
            try:
                labels[fields[0]] = int(fields[1])
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from exc
    return labels
