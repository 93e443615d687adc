"""Descriptor assembly: reduce tokens, pool them by assignment, append the
global projection, normalize.

The cluster matrix is a plain weighted sum ``V = P^T F`` (no centroid
residuals). The flattened V and the global projection are L2-normalized
as two separate blocks and the concatenation ``[g | flat(V)]`` is
normalized once more, which keeps every descriptor on the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .assign import build_scores_graph, sinkhorn_plan_graph, _score_mask
from .errors import DegenerateDescriptorError, DimensionError
from .model import AggregatorConfig, AggregatorWeights, FeatureSet, mlp2_graph


@dataclass(frozen=True)
class ClusterMatrix:
    """Aggregated per-cluster features, one row per cluster."""

    v: np.ndarray  # (m, l)


@dataclass
class Descriptor:
    """Unit-norm global image descriptor of length m*l + g_dim."""

    values: np.ndarray
    id: str = ""

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def reduce_dims(
    features: FeatureSet,
    weights: AggregatorWeights,
    config: AggregatorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Map every token through the reduction MLP; (n, d) -> (n, l)."""
    wvars = {k: ad.Var(v) for k, v in weights.tensors().items()}
    mask = _score_mask(features.n, config, training, rng, features.tokens.dtype)
    return _reduce_graph(ad.Var(features.tokens), wvars, config, mask).value


def _reduce_graph(tokens: ad.Var, wvars, config, mask=None) -> ad.Var:
    if tokens.value.shape[1] != config.d:
        raise DimensionError(
            f"token dimension {tokens.value.shape[1]} != configured d={config.d}"
        )
    return mlp2_graph(
        tokens, wvars["reduce.w1"], wvars["reduce.b1"], wvars["reduce.w2"], wvars["reduce.b2"], mask
    )


def project_global(
    global_token: np.ndarray, weights: AggregatorWeights, config: AggregatorConfig
) -> np.ndarray:
    """Project the whole-image token to the g_dim global block."""
    wvars = {k: ad.Var(v) for k, v in weights.tensors().items()}
    return _global_graph(ad.Var(np.asarray(global_token).reshape(1, -1)), wvars, config).value[0]


def _global_graph(global_row: ad.Var, wvars, config) -> ad.Var:
    if global_row.value.shape[1] != config.d:
        raise DimensionError(
            f"global token dimension {global_row.value.shape[1]} != configured d={config.d}"
        )
    return mlp2_graph(
        global_row, wvars["global.w1"], wvars["global.b1"], wvars["global.w2"], wvars["global.b2"]
    )


def aggregate_vlad(p: np.ndarray, f: np.ndarray) -> ClusterMatrix:
    """Pool reduced features into clusters: ``V[j, k] = sum_i P[i, j] F[i, k]``."""
    p = np.asarray(p)
    f = np.asarray(f)
    if p.ndim != 2 or f.ndim != 2 or p.shape[0] != f.shape[0]:
        raise DimensionError(
            f"assignment {p.shape} and features {f.shape} must share the token axis"
        )
    return ClusterMatrix(ad.matmul(ad.Var(p.T), ad.Var(f)).value)


def finalize_descriptor(v: ClusterMatrix | np.ndarray, g: np.ndarray, id: str = "") -> Descriptor:
    """Block-normalize flat(V) and g, concatenate [g | flat(V)], renormalize.

    An all-zero block is kept as zeros; if both blocks are zero there is
    nothing to normalize and the descriptor is refused.
    """
    v_arr = v.v if isinstance(v, ClusterMatrix) else np.asarray(v)
    g_arr = np.asarray(g)
    out = _finalize_graph(ad.Var(v_arr.reshape(-1)), ad.Var(g_arr.reshape(-1))).value
    return Descriptor(values=out, id=id)


def _finalize_graph(v_flat: ad.Var, g_flat: ad.Var) -> ad.Var:
    if float(np.linalg.norm(v_flat.value)) == 0.0 and float(np.linalg.norm(g_flat.value)) == 0.0:
        raise DegenerateDescriptorError("both descriptor blocks are zero")
    whole = ad.concat([ad.l2_normalize(g_flat), ad.l2_normalize(v_flat)], axis=0)
    return ad.l2_normalize(whole)


def descriptor_graph(
    tokens: ad.Var,
    global_row: ad.Var,
    wvars: dict[str, ad.Var],
    config: AggregatorConfig,
    score_mask=None,
    reduce_mask=None,
    sinkhorn_iters: int | None = None,
) -> ad.Var:
    """Recorded end-to-end forward; shared by inference and training."""
    iters = config.sinkhorn_iters if sinkhorn_iters is None else sinkhorn_iters
    s_bar = build_scores_graph(tokens, wvars, config, mask=score_mask)
    p_bar = sinkhorn_plan_graph(s_bar, iters)
    p = ad.narrow(p_bar, 1, 0, config.m)
    f = _reduce_graph(tokens, wvars, config, mask=reduce_mask)
    v = ad.matmul(ad.transpose(p), f)
    g = _global_graph(global_row, wvars, config)
    return _finalize_graph(ad.reshape(v, (config.m * config.l,)), ad.reshape(g, (config.g_dim,)))


def forward_full(
    features: FeatureSet,
    weights: AggregatorWeights,
    config: AggregatorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Descriptor:
    """Full pipeline for one image: scores, transport plan, pooling,
    global projection, normalization. Deterministic in inference mode."""
    wvars = {k: ad.Var(v) for k, v in weights.tensors().items()}
    dtype = features.tokens.dtype
    score_mask = _score_mask(features.n, config, training, rng, dtype)
    reduce_mask = _score_mask(features.n, config, training, rng, dtype)
    out = descriptor_graph(
        ad.Var(features.tokens),
        ad.Var(features.global_token.reshape(1, -1)),
        wvars,
        config,
        score_mask=score_mask,
        reduce_mask=reduce_mask,
    )
    return Descriptor(values=out.value, id=features.id)
