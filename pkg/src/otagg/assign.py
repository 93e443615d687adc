"""Dustbin-augmented score matrix and entropic optimal-transport assignment.

Each of the n tokens carries one unit of mass. The m clusters can hold one
unit each and the dustbin column absorbs the remaining ``n - m`` units, so
uninformative tokens have somewhere to go. The assignment is the Sinkhorn
fixed point of column/row rescaling of ``exp(scores)`` toward those
marginals, run for a fixed number of full passes and computed in the log
domain so large scores cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericError, PreconditionError
from .model import AggregatorConfig, AggregatorWeights, FeatureSet, dropout_mask, mlp2_graph


@dataclass(frozen=True)
class ScoreMatrix:
    """Token-to-cluster affinities with the dustbin as the last column."""

    s_bar: np.ndarray  # (n, m + 1)

    def __post_init__(self):
        if self.s_bar.ndim != 2 or self.s_bar.shape[1] < 2:
            raise DimensionError(f"score matrix must be (n, m+1), got {self.s_bar.shape}")

    @property
    def n(self) -> int:
        return self.s_bar.shape[0]

    @property
    def m(self) -> int:
        return self.s_bar.shape[1] - 1


@dataclass(frozen=True)
class Assignment:
    """Transport plan between token mass and cluster/dustbin capacity."""

    p_bar: np.ndarray  # (n, m + 1), nonnegative
    mu: np.ndarray  # (n,) row marginals, all ones
    kappa: np.ndarray  # (m + 1,) column marginals [1, ..., 1, n - m]

    @property
    def p(self) -> np.ndarray:
        """The plan with the dustbin column dropped (read-only view)."""
        view = self.p_bar[:, :-1]
        view.flags.writeable = False
        return view


def transport_marginals(n: int, m: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """(mu, kappa): one unit per token; one per cluster, n - m for the bin."""
    if n <= m:
        raise PreconditionError(
            f"need more tokens than clusters (dustbin capacity n - m > 0), got n={n}, m={m}"
        )
    mu = np.ones(n, dtype=dtype)
    kappa = np.ones(m + 1, dtype=dtype)
    kappa[m] = n - m
    return mu, kappa


def build_scores(
    features: FeatureSet,
    weights: AggregatorWeights,
    config: AggregatorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ScoreMatrix:
    """Score MLP on every token plus the constant dustbin column."""
    graph = build_scores_graph(
        ad.Var(features.tokens),
        {k: ad.Var(v) for k, v in weights.tensors().items()},
        config,
        mask=_score_mask(features.n, config, training, rng, features.tokens.dtype),
    )
    return ScoreMatrix(graph.value)


def _score_mask(n, config, training, rng, dtype):
    if not training or config.dropout_rate == 0.0:
        return None
    if rng is None:
        raise PreconditionError("training-mode forward needs an rng for dropout masks")
    return dropout_mask(config.dropout_rate, (n, config.hidden), rng, dtype=dtype)


def build_scores_graph(tokens: ad.Var, wvars: dict[str, ad.Var], config: AggregatorConfig, mask=None) -> ad.Var:
    """Recorded (n, m+1) score matrix: per-token MLP rows, dustbin column z."""
    if tokens.value.shape[1] != config.d:
        raise DimensionError(
            f"token dimension {tokens.value.shape[1]} != configured d={config.d}"
        )
    s = mlp2_graph(
        tokens, wvars["score.w1"], wvars["score.b1"], wvars["score.w2"], wvars["score.b2"], mask
    )
    n = tokens.value.shape[0]
    ones = np.ones((n, 1), dtype=tokens.value.dtype)
    bin_col = ad.mul(ad.reshape(wvars["dustbin.z"], (1, 1)), ones)
    return ad.concat([s, bin_col], axis=1)


def sinkhorn_plan_graph(s_bar: ad.Var, iters: int) -> ad.Var:
    """Unrolled log-domain Sinkhorn passes over the augmented scores.

    Every full pass rescales columns to (1, ..., 1, n - m) and then rows
    to 1, so the returned plan always satisfies the row constraint up to
    rounding. Differentiable end to end through the unrolled loop.
    """
    n, cols = s_bar.value.shape
    m = cols - 1
    _, kappa = transport_marginals(n, m, dtype=s_bar.value.dtype)
    log_kappa = np.log(kappa).reshape(1, cols)
    x = s_bar
    for _ in range(iters):
        x = ad.add(ad.sub(x, ad.logsumexp(x, axis=0, keepdims=True)), log_kappa)
        x = ad.sub(x, ad.logsumexp(x, axis=1, keepdims=True))
    return ad.exp(x)


def sinkhorn_assign(scores: ScoreMatrix, iters: int) -> Assignment:
    """Run ``iters`` full column+row Sinkhorn passes on ``exp(s_bar)``."""
    if iters < 1:
        raise PreconditionError(f"iters must be >= 1, got {iters}")
    if not np.isfinite(scores.s_bar).all():
        raise NumericError("score matrix contains non-finite entries")
    mu, kappa = transport_marginals(scores.n, scores.m, dtype=scores.s_bar.dtype)
    plan = sinkhorn_plan_graph(ad.Var(scores.s_bar), iters).value
    return Assignment(p_bar=plan, mu=mu, kappa=kappa)


def drop_dustbin(assignment: Assignment) -> np.ndarray:
    """First m columns of the plan; the stored plan stays intact."""
    return assignment.p_bar[:, :-1].copy()


def marginal_violation(assignment: Assignment) -> float:
    """Max-norm deviation of the plan's row and column sums from (mu, kappa)."""
    row = np.abs(assignment.p_bar.sum(axis=1) - assignment.mu).max()
    col = np.abs(assignment.p_bar.sum(axis=0) - assignment.kappa).max()
    return float(max(row, col))
