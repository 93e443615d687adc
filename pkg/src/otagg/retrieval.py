"""Descriptor store, top-k cosine queries and Recall@k.

Descriptors are unit-norm, so the inner product is the cosine similarity.
Rankings are deterministic: descending similarity, ties broken by
ascending id. A reference is a positive for a query when the geotags lie
within 25 meters (planar) or two frame indices (frame mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import Descriptor
from .errors import DimensionError, PreconditionError, UsageError, ValidationError
from .model import GeoTag

POSITIVE_RADIUS_M = 25.0
POSITIVE_FRAMES = 2


@dataclass(frozen=True)
class RetrievalIndex:
    """Immutable store of reference descriptors with ids and geotags."""

    matrix: np.ndarray  # (N, dim) unit rows
    ids: tuple[str, ...]
    geotags: tuple[GeoTag | None, ...]

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(descriptors, ids, geotags=None) -> RetrievalIndex:
    """Validate and freeze a reference set.

    Accepts a list of :class:`Descriptor` (ids/geotags optional overrides)
    or a raw (N, dim) matrix plus parallel id/geotag lists.
    """
    if isinstance(descriptors, np.ndarray):
        matrix = np.array(descriptors, copy=True)
    else:
        matrix = np.stack([d.values for d in descriptors]) if descriptors else np.empty((0, 0))
    ids = list(ids)
    if geotags is None:
        geotags = [None] * len(ids)
    geotags = list(geotags)
    if matrix.shape[0] == 0:
        raise PreconditionError("cannot build an index from zero descriptors")
    if not (matrix.shape[0] == len(ids) == len(geotags)):
        raise PreconditionError(
            f"descriptors ({matrix.shape[0]}), ids ({len(ids)}) and geotags ({len(geotags)}) differ in length"
        )
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate descriptor ids: {dupes[:5]}")
    norms = np.linalg.norm(matrix, axis=1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > 1e-4:
        raise ValidationError(f"descriptors must be unit-norm (max deviation {worst:.2e})")
    matrix.flags.writeable = False
    return RetrievalIndex(matrix=matrix, ids=tuple(ids), geotags=tuple(geotags))


def query_topk(index: RetrievalIndex, query: Descriptor | np.ndarray, k: int):
    """Top-k references by inner product, as (id, similarity) pairs."""
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    q = query.values if isinstance(query, Descriptor) else np.asarray(query)
    if q.shape != (index.dim,):
        raise DimensionError(f"query dim {q.shape} != index dim ({index.dim},)")
    sims = index.matrix @ q
    order = _ranked_order(sims, index.ids)
    return [(index.ids[i], float(sims[i])) for i in order[: min(k, index.size)]]


def _ranked_order(sims: np.ndarray, ids) -> np.ndarray:
    # lexsort: last key is primary. Descending similarity, then ascending id.
    return np.lexsort((np.asarray(ids), -sims))


def is_positive(q: GeoTag, r: GeoTag, mode: str | None = None) -> bool:
    """Whether two geotags depict the same place under the benchmark rule.

    Planar tags: Euclidean distance strictly below 25 m. Frame tags: at
    most two frames apart. ``mode`` ("planar"/"frame") is checked against
    the tags when given.
    """
    if q.kind != r.kind:
        raise UsageError(f"cannot compare a {q.kind} tag with a {r.kind} tag")
    if mode is not None and mode != q.kind:
        raise UsageError(f"geotags are {q.kind!r} but mode {mode!r} was requested")
    if q.kind == "planar":
        return float(np.hypot(q.x - r.x, q.y - r.y)) < POSITIVE_RADIUS_M
    return abs(q.frame - r.frame) <= POSITIVE_FRAMES


@dataclass(frozen=True)
class EvalReport:
    """Recall@k values plus how many queries were evaluated or skipped."""

    recalls: dict[int, float]
    evaluated: int
    excluded: int

    def lines(self) -> list[str]:
        return [f"R@{k}: {self.recalls[k]:.4f}" for k in sorted(self.recalls)]

    def __str__(self):
        return "\n".join(self.lines())


def recall_at_k(index: RetrievalIndex, queries, ks) -> EvalReport:
    """Fraction of queries with a positive among the top-k references.

    ``queries`` is a list of (Descriptor, GeoTag). Queries without any
    positive in the index are excluded from the denominator; a reference
    sharing the query's id is ignored entirely.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise PreconditionError("ks must be non-empty with every k >= 1")
    if not queries:
        raise PreconditionError("empty query list")
    mode = queries[0][1].kind
    hits = {k: 0 for k in ks}
    evaluated = 0
    excluded = 0
    kmax = min(max(ks), index.size)
    for desc, tag in queries:
        keep = np.fromiter(
            (index.ids[j] != desc.id for j in range(index.size)), dtype=bool, count=index.size
        )
        positive = np.fromiter(
            (
                keep[j]
                and index.geotags[j] is not None
                and is_positive(tag, index.geotags[j], mode)
                for j in range(index.size)
            ),
            dtype=bool,
            count=index.size,
        )
        if not positive.any():
            excluded += 1
            continue
        evaluated += 1
        sims = index.matrix @ desc.values
        order = _ranked_order(sims, index.ids)
        order = order[keep[order]]
        first_hit = None
        for rank, j in enumerate(order[:kmax]):
            if positive[j]:
                first_hit = rank
                break
        for k in ks:
            if first_hit is not None and first_hit < k:
                hits[k] += 1
    if evaluated == 0:
        raise PreconditionError("no query has a geotagged positive in the index")
    recalls = {k: hits[k] / evaluated for k in ks}
    return EvalReport(recalls=recalls, evaluated=evaluated, excluded=excluded)
