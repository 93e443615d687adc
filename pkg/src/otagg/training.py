"""Metric-learning training loop: mined multi-similarity loss, decoupled
weight-decay Adam and a linear learning-rate ramp down to 20%.

A batch is organized as P places with K images each. For every anchor,
positives harder than the easiest negative and negatives harder than the
easiest positive are mined from the cosine similarity matrix; anchors
that mine nothing contribute nothing and are dropped from the average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregate import Descriptor, descriptor_graph
from .errors import NumericError, PreconditionError, UsageError, ValidationError
from .model import AggregatorConfig, AggregatorWeights, FeatureSet, dropout_mask, init_weights


@dataclass(frozen=True)
class LossParams:
    """Multi-similarity loss parameters.

    alpha/beta scale the positive/negative log-sum-exp terms, lam is the
    similarity threshold, epsilon the pair-mining margin. The defaults are
    the conventional values for this loss on retrieval batches.
    """

    alpha: float = 1.0
    beta: float = 50.0
    lam: float = 0.0
    epsilon: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("alpha and beta must be positive")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")


@dataclass
class OptimizerState:
    """AdamW accumulators and hyperparameters for one parameter set."""

    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step: int
    lr0: float
    betas: tuple[float, float]
    eps: float
    weight_decay: float

    @classmethod
    def for_params(
        cls,
        params: dict[str, np.ndarray],
        lr0: float = 6e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> "OptimizerState":
        return cls(
            exp_avg={k: np.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
            lr0=lr0,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
        )


@dataclass(frozen=True)
class TrainingParams:
    """Loop hyperparameters; defaults mirror the descriptor training recipe."""

    lr0: float = 6e-5
    batch_places: int = 60
    imgs_per_place: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss: LossParams = field(default_factory=LossParams)
    seed: int = 0


def _mine_pairs(sims: np.ndarray, labels: np.ndarray, epsilon: float):
    """Per-anchor mined positive/negative column indices."""
    mined = []
    b = sims.shape[0]
    for i in range(b):
        same = labels == labels[i]
        pos_idx = np.flatnonzero(same & (np.arange(b) != i))
        neg_idx = np.flatnonzero(~same)
        if pos_idx.size == 0 or neg_idx.size == 0:
            mined.append((np.empty(0, np.intp), np.empty(0, np.intp)))
            continue
        hardest_neg = sims[i, neg_idx].max()
        easiest_pos = sims[i, pos_idx].min()
        keep_pos = pos_idx[sims[i, pos_idx] < hardest_neg + epsilon]
        keep_neg = neg_idx[sims[i, neg_idx] > easiest_pos - epsilon]
        mined.append((keep_pos, keep_neg))
    return mined


def ms_loss_graph(descriptors: ad.Var, labels: np.ndarray, params: LossParams) -> ad.Var:
    """Recorded multi-similarity loss over row-stacked unit descriptors.

    Mining is done on the similarity values and treated as constant; the
    gradient flows through the selected pairs only.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise UsageError("multi-similarity loss needs at least two distinct place labels")
    sims = ad.matmul(descriptors, ad.transpose(descriptors))
    mined = _mine_pairs(sims.value, labels, params.epsilon)
    dtype = descriptors.value.dtype
    terms = []
    for i, (pos, neg) in enumerate(mined):
        if pos.size == 0 and neg.size == 0:
            continue
        term = None
        if pos.size:
            sp = ad.gather(sims, np.full(pos.size, i), pos)
            hit = ad.log1p(ad.asum(ad.exp(ad.mul(ad.sub(sp, dtype.type(params.lam)), dtype.type(-params.alpha)))))
            term = ad.mul(hit, dtype.type(1.0 / params.alpha))
        if neg.size:
            sn = ad.gather(sims, np.full(neg.size, i), neg)
            miss = ad.log1p(ad.asum(ad.exp(ad.mul(ad.sub(sn, dtype.type(params.lam)), dtype.type(params.beta)))))
            miss = ad.mul(miss, dtype.type(1.0 / params.beta))
            term = miss if term is None else ad.add(term, miss)
        terms.append(term)
    if not terms:
        return ad.Var(np.zeros((), dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, dtype.type(1.0 / len(terms)))


def ms_loss(descriptors, labels, params: LossParams = LossParams()) -> float:
    """Multi-similarity loss of a labeled batch of unit-norm descriptors."""
    d = _as_matrix(descriptors)
    norms = np.linalg.norm(d, axis=1)
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ValidationError("descriptors must be unit-norm")
    return float(ms_loss_graph(ad.Var(d), np.asarray(labels), params).value)


def _as_matrix(descriptors) -> np.ndarray:
    if isinstance(descriptors, np.ndarray):
        return descriptors
    return np.stack([dd.values if isinstance(dd, Descriptor) else np.asarray(dd) for dd in descriptors])


def lr_at(iteration: int, total_iters: int, lr0: float) -> float:
    """Linear ramp from lr0 at iteration 0 to 0.2 * lr0 at total_iters."""
    if total_iters < 1:
        raise PreconditionError(f"total_iters must be >= 1, got {total_iters}")
    if not 0 <= iteration <= total_iters:
        raise PreconditionError(
            f"iteration {iteration} outside [0, {total_iters}]"
        )
    return lr0 * (1.0 - 0.8 * iteration / total_iters)


def adamw_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; mutates ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise PreconditionError(f"gradient shape mismatch for {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out: dict[str, np.ndarray] = {}
    for name, w in params.items():
        g = grads[name]
        m = state.exp_avg[name] = b1 * state.exp_avg[name] + (1.0 - b1) * g
        v = state.exp_avg_sq[name] = b2 * state.exp_avg_sq[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (w * (1.0 - lr * state.weight_decay) - lr * update).astype(w.dtype)
    return out


@dataclass
class TrainingBatch:
    """P x K block of feature sets with their place labels."""

    items: list[tuple[FeatureSet, int]]

    def __post_init__(self):
        labels = [lab for _, lab in self.items]
        counts = {lab: labels.count(lab) for lab in set(labels)}
        if len(set(counts.values())) > 1:
            raise ValidationError("every place in a batch must contribute the same image count")


def _group_by_place(dataset, imgs_per_place: int):
    groups: dict[int, list[FeatureSet]] = {}
    for fs, label in dataset:
        groups.setdefault(int(label), []).append(fs)
    usable = {lab: fss for lab, fss in groups.items() if len(fss) >= imgs_per_place}
    if len(usable) < 2:
        raise PreconditionError(
            f"training needs >= 2 places with >= {imgs_per_place} images each, got {len(usable)}"
        )
    return usable


def _batch_plan(place_ids, batch_places: int, rng: np.random.Generator):
    order = list(place_ids)
    rng.shuffle(order)
    batches = []
    for lo in range(0, len(order), batch_places):
        chunk = order[lo : lo + batch_places]
        if len(chunk) >= 2:
            batches.append(chunk)
    return batches


def _batch_grads(
    batch: TrainingBatch,
    wvars: dict[str, ad.Var],
    config: AggregatorConfig,
    loss_params: LossParams,
    rng: np.random.Generator,
):
    """Forward the batch in training mode, return (loss value, grads)."""
    rows = []
    labels = []
    for fs, label in batch.items:
        dtype = fs.tokens.dtype
        score_mask = reduce_mask = None
        if config.dropout_rate > 0.0:
            score_mask = dropout_mask(config.dropout_rate, (fs.n, config.hidden), rng, dtype)
            reduce_mask = dropout_mask(config.dropout_rate, (fs.n, config.hidden), rng, dtype)
        rows.append(
            descriptor_graph(
                ad.Var(fs.tokens),
                ad.Var(fs.global_token.reshape(1, -1)),
                wvars,
                config,
                score_mask=score_mask,
                reduce_mask=reduce_mask,
            )
        )
        labels.append(label)
    loss = ms_loss_graph(ad.stack_rows(rows), np.asarray(labels), loss_params)
    loss.backward()
    grads = {name: var.grad_or_zeros() for name, var in wvars.items()}
    return float(loss.value), grads


def train_run(
    dataset: list[tuple[FeatureSet, int]],
    config: AggregatorConfig,
    params: TrainingParams = TrainingParams(),
    epochs: int = 4,
    initial: AggregatorWeights | None = None,
    log_hook=None,
) -> tuple[AggregatorWeights, list[tuple[int, float, float]]]:
    """Train aggregator weights on a place-labeled dataset.

    Returns the trained weights and the loss log as (iteration, lr, loss)
    tuples. Deterministic given config.seed and params.seed.
    """
    if not dataset:
        raise PreconditionError("empty dataset")
    weights = initial if initial is not None else init_weights(config)
    if epochs == 0:
        return weights, []
    groups = _group_by_place(dataset, params.imgs_per_place)
    rng = np.random.default_rng(params.seed)

    plans = [_batch_plan(sorted(groups), params.batch_places, rng) for _ in range(epochs)]
    total_iters = sum(len(p) for p in plans)
    tensors = {k: v.copy() for k, v in weights.tensors().items()}
    state = OptimizerState.for_params(
        tensors, lr0=params.lr0, betas=params.betas, eps=params.eps,
        weight_decay=params.weight_decay,
    )
    log: list[tuple[int, float, float]] = []
    iteration = 0
    for plan in plans:
        for chunk in plan:
            items = []
            for place in chunk:
                fss = groups[place]
                take = rng.choice(len(fss), size=params.imgs_per_place, replace=False)
                items.extend((fss[j], place) for j in take)
            wvars = {k: ad.Var(v) for k, v in tensors.items()}
            loss_value, grads = _batch_grads(
                TrainingBatch(items), wvars, config, params.loss, rng
            )
            lr = lr_at(iteration, total_iters, params.lr0)
            tensors = adamw_step(state, tensors, grads, lr)
            log.append((iteration, lr, loss_value))
            if log_hook is not None:
                log_hook(iteration, lr, loss_value)
            iteration += 1
    return AggregatorWeights.from_tensors(config, tensors), log


def format_loss_log(log: list[tuple[int, float, float]]) -> str:
    """Render the loss log as ``iter,lr,loss`` text lines."""
    return "".join(f"{it},{lr},{loss}\n" for it, lr, loss in log)
