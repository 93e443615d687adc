"""Deterministic synthetic place datasets and naive reference oracles.

The generator draws one prototype token set per place and perturbs it per
image, so images of the same place are close in feature space and places
far apart. Geotags follow the same story: images scatter within 5 m of
their place center, centers sit at least 100 m apart.

The oracles are deliberately naive (direct-space arithmetic, no log
tricks) so they share no failure modes with the production paths they
check.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ValidationError
from .model import FeatureSet, GeoTag

PLACE_SPACING_M = 100.0
IMAGE_SCATTER_M = 3.5  # box half-width; keeps every image within 5 m of center


@dataclass(frozen=True)
class SynthSpec:
    """Shape and statistics of a generated dataset."""

    seed: int = 0
    num_places: int = 10
    images_per_place: int = 4
    n: int = 32
    d: int = 64
    cluster_spread: float = 0.1  # within-place token noise
    place_separation: float = 1.0  # between-place prototype scale
    geotag_mode: str = "planar"

    def __post_init__(self):
        if self.num_places < 2:
            raise ValidationError(f"num_places must be >= 2, got {self.num_places}")
        if self.images_per_place < 2:
            raise ValidationError(
                f"images_per_place must be >= 2, got {self.images_per_place}"
            )
        if not self.cluster_spread < self.place_separation:
            raise ValidationError("cluster_spread must be below place_separation")
        if self.geotag_mode not in ("planar", "frame"):
            raise ValidationError(f"unknown geotag_mode {self.geotag_mode!r}")


def gen_places(spec: SynthSpec) -> list[tuple[FeatureSet, int, GeoTag]]:
    """Generate (features, place label, geotag) triples, deterministically."""
    rng = np.random.default_rng(spec.seed)
    out: list[tuple[FeatureSet, int, GeoTag]] = []
    for place in range(spec.num_places):
        proto_tokens = rng.normal(0.0, spec.place_separation, size=(spec.n, spec.d))
        proto_global = rng.normal(0.0, spec.place_separation, size=spec.d)
        if spec.geotag_mode == "planar":
            center = np.array([PLACE_SPACING_M * place, 0.0])
        for img in range(spec.images_per_place):
            tokens = proto_tokens + rng.normal(0.0, spec.cluster_spread, size=(spec.n, spec.d))
            global_token = proto_global + rng.normal(0.0, spec.cluster_spread, size=spec.d)
            if spec.geotag_mode == "planar":
                offset = rng.uniform(-IMAGE_SCATTER_M, IMAGE_SCATTER_M, size=2)
                tag = GeoTag.planar(center[0] + offset[0], center[1] + offset[1])
            else:
                # Same-place images are consecutive frames; note only
                # neighbors within two frames count as positives.
                tag = GeoTag.at_frame(place * 1000 + img)
            fs = FeatureSet(
                id=f"p{place:04d}_i{img:02d}",
                tokens=tokens.astype(np.float32),
                global_token=global_token.astype(np.float32),
                geotag=tag,
            )
            out.append((fs, place, tag))
    return out


def split_holdout(dataset, queries_per_place: int):
    """Split the last images of each place off as queries."""
    train: list[tuple[FeatureSet, int, GeoTag]] = []
    held: list[tuple[FeatureSet, int, GeoTag]] = []
    by_place: dict[int, list] = {}
    for item in dataset:
        by_place.setdefault(item[1], []).append(item)
    for place in sorted(by_place):
        items = by_place[place]
        if queries_per_place >= len(items):
            raise ValidationError(
                f"cannot hold out {queries_per_place} of {len(items)} images for place {place}"
            )
        cut = len(items) - queries_per_place
        train.extend(items[:cut])
        held.extend(items[cut:])
    return train, held


def write_dataset(dataset, out_dir, holdout: int = 0):
    """Write a generated dataset in the on-disk layout the CLI consumes:
    ``features/*.salf`` (+ ``queries/*.salf``), ``geotags.csv``, ``labels.csv``."""
    from .formats import write_features  # local import to avoid a cycle

    out_dir = Path(out_dir)
    train, held = split_holdout(dataset, holdout) if holdout else (list(dataset), [])
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for fs, _, _ in train:
        write_features(fs, feat_dir / f"{fs.id}.salf")
    if held:
        query_dir = out_dir / "queries"
        query_dir.mkdir(parents=True, exist_ok=True)
        for fs, _, _ in held:
            write_features(fs, query_dir / f"{fs.id}.salf")
    with open(out_dir / "geotags.csv", "w", encoding="utf-8") as fh:
        fh.write("# id,x,y (planar meters) or id,frame\n")
        for fs, _, tag in list(train) + list(held):
            if tag.kind == "planar":
                fh.write(f"{fs.id},{tag.x},{tag.y}\n")
            else:
                fh.write(f"{fs.id},{tag.frame}\n")
    with open(out_dir / "labels.csv", "w", encoding="utf-8") as fh:
        fh.write("# id,place\n")
        for fs, label, _ in list(train) + list(held):
            fh.write(f"{fs.id},{label}\n")


def oracle_sinkhorn(s_bar: np.ndarray, iters: int = 10000) -> np.ndarray:
    """Direct-space Sinkhorn reference at float64.

    Rescales columns to (1, ..., 1, n - m) then rows to 1, exactly like
    the production path but on plain ``exp(s_bar)``. Raises when the
    exponentials overflow, in which case the oracle simply does not apply.
    Stops early once the column marginals already hold to 1e-13 (far
    below any tolerance it is used at).
    """
    s = np.asarray(s_bar, dtype=np.float64)
    n, cols = s.shape
    m = cols - 1
    if n <= m:
        raise ValidationError(f"need n > m, got n={n}, m={m}")
    kappa = np.ones(cols)
    kappa[m] = n - m
    p = np.exp(s)
    if not np.isfinite(p).all():
        raise NumericError("exp(scores) overflows float64; oracle not applicable")
    for _ in range(iters):
        colsum = p.sum(axis=0)
        if np.abs(colsum - kappa).max() < 1e-13:
            break
        p = p * (kappa / colsum)[None, :]
        p = p / p.sum(axis=1)[:, None]
        if not np.isfinite(p).all():
            raise NumericError("oracle iteration produced non-finite values")
    return p


def oracle_mlp2(x, w1, b1, w2, b2, mask=None):
    """Triple-loop dense MLP reference at float64."""
    x = np.asarray(x, dtype=np.float64)
    hidden = np.zeros(w1.shape[0])
    for i in range(w1.shape[0]):
        acc = 0.0
        for j in range(w1.shape[1]):
            acc += float(w1[i, j]) * float(x[j])
        acc += float(b1[i])
        hidden[i] = acc if acc > 0 else 0.0
        if mask is not None:
            hidden[i] *= float(mask[i])
    out = np.zeros(w2.shape[0])
    for i in range(w2.shape[0]):
        acc = 0.0
        for j in range(w2.shape[1]):
            acc += float(w2[i, j]) * hidden[j]
        out[i] = acc + float(b2[i])
    return out


def oracle_vlad(p, f):
    """Triple-loop aggregation reference: V[j, k] = sum_i P[i, j] F[i, k]."""
    p = np.asarray(p, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    n, m = p.shape
    _, l = f.shape
    v = np.zeros((m, l))
    for j in range(m):
        for k in range(l):
            acc = 0.0
            for i in range(n):
                acc += p[i, j] * f[i, k]
            v[j, k] = acc
    return v


def oracle_ms_loss(sims: np.ndarray, labels, alpha, beta, lam, epsilon) -> float:
    """Direct scalar evaluation of the mined multi-similarity loss."""
    import math

    labels = np.asarray(labels)
    b = sims.shape[0]
    terms = []
    for i in range(b):
        pos = [j for j in range(b) if j != i and labels[j] == labels[i]]
        neg = [j for j in range(b) if labels[j] != labels[i]]
        if not pos or not neg:
            continue
        hardest_neg = max(sims[i, j] for j in neg)
        easiest_pos = min(sims[i, j] for j in pos)
        mined_pos = [j for j in pos if sims[i, j] < hardest_neg + epsilon]
        mined_neg = [j for j in neg if sims[i, j] > easiest_pos - epsilon]
        if not mined_pos and not mined_neg:
            continue
        term = 0.0
        if mined_pos:
            term += math.log(1.0 + sum(math.exp(-alpha * (sims[i, j] - lam)) for j in mined_pos)) / alpha
        if mined_neg:
            term += math.log(1.0 + sum(math.exp(beta * (sims[i, j] - lam)) for j in mined_neg)) / beta
        terms.append(term)
    return sum(terms) / len(terms) if terms else 0.0


def oracle_topk(matrix: np.ndarray, ids, q: np.ndarray, k: int):
    """Full-sort retrieval reference with the same tie rule (id ascending)."""
    sims = [float(np.dot(row, q)) for row in matrix]
    ranked = sorted(zip(ids, sims), key=lambda t: (-t[1], t[0]))
    return ranked[: min(k, len(ranked))]
