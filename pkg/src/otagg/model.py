"""Configuration, parameter containers and the shared 2-layer MLP.

Three MLPs hang off one token stream: ``score`` maps a token to one
affinity per cluster, ``reduce`` compresses tokens before aggregation,
and ``global`` projects the whole-image token. All share the same
hidden width and ReLU activation; the dustbin affinity is a single
scalar ``z`` appended as an extra score column downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, ValidationError

MLP_NAMES = ("score", "reduce", "global")


@dataclass(frozen=True)
class AggregatorConfig:
    """Hyperparameters of the aggregation head.

    m: number of clusters, l: reduced token dimension, g_dim: global
    projection dimension, d: input token dimension, hidden: MLP hidden
    width. The final descriptor has ``m * l + g_dim`` entries.
    """

    m: int = 64
    l: int = 128
    g_dim: int = 256
    d: int = 768
    hidden: int = 512
    dropout_rate: float = 0.3
    sinkhorn_iters: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.l < 1:
            raise ConfigError(f"l must be >= 1, got {self.l}")
        if self.g_dim < 0:
            raise ConfigError(f"g_dim must be >= 0, got {self.g_dim}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.sinkhorn_iters < 1:
            raise ConfigError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")

    @property
    def descriptor_dim(self) -> int:
        return self.m * self.l + self.g_dim

    def with_seed(self, seed: int) -> "AggregatorConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GeoTag:
    """Either planar coordinates in meters (e.g. UTM) or a frame index."""

    x: float | None = None
    y: float | None = None
    frame: int | None = None

    def __post_init__(self):
        planar = self.x is not None and self.y is not None
        framed = self.frame is not None
        if planar == framed or (self.x is None) != (self.y is None):
            raise ValidationError(
                "GeoTag needs exactly one variant: (x, y) or frame"
            )

    @classmethod
    def planar(cls, x: float, y: float) -> "GeoTag":
        return cls(x=float(x), y=float(y))

    @classmethod
    def at_frame(cls, frame: int) -> "GeoTag":
        return cls(frame=int(frame))

    @property
    def kind(self) -> str:
        return "planar" if self.frame is None else "frame"


@dataclass
class FeatureSet:
    """Per-image input: n patch tokens, one global token, identity, geotag."""

    id: str
    tokens: np.ndarray  # (n, d)
    global_token: np.ndarray  # (d,)
    geotag: GeoTag | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.global_token = np.asarray(self.global_token)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(f"tokens must be (n>=1, d), got {self.tokens.shape}")
        if self.global_token.shape != (self.tokens.shape[1],):
            raise DimensionError(
                f"global token shape {self.global_token.shape} does not match d={self.tokens.shape[1]}"
            )
        if not (np.isfinite(self.tokens).all() and np.isfinite(self.global_token).all()):
            raise ValidationError(f"feature set {self.id!r} contains non-finite values")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


@dataclass
class AggregatorWeights:
    """All learnable parameters: three 2-layer MLPs plus the dustbin scalar."""

    config: AggregatorConfig
    score_w1: np.ndarray
    score_b1: np.ndarray
    score_w2: np.ndarray
    score_b2: np.ndarray
    reduce_w1: np.ndarray
    reduce_b1: np.ndarray
    reduce_w2: np.ndarray
    reduce_b2: np.ndarray
    global_w1: np.ndarray
    global_b1: np.ndarray
    global_w2: np.ndarray
    global_b2: np.ndarray
    z: np.ndarray  # scalar, () shape

    def tensors(self) -> dict[str, np.ndarray]:
        """Named parameters in the frozen serialization order."""
        return {
            "score.w1": self.score_w1,
            "score.b1": self.score_b1,
            "score.w2": self.score_w2,
            "score.b2": self.score_b2,
            "reduce.w1": self.reduce_w1,
            "reduce.b1": self.reduce_b1,
            "reduce.w2": self.reduce_w2,
            "reduce.b2": self.reduce_b2,
            "global.w1": self.global_w1,
            "global.b1": self.global_b1,
            "global.w2": self.global_w2,
            "global.b2": self.global_b2,
            "dustbin.z": self.z,
        }

    @classmethod
    def from_tensors(cls, config: AggregatorConfig, tensors: dict[str, np.ndarray]):
        expected = expected_shapes(config)
        missing = set(expected) - set(tensors)
        if missing:
            raise ValidationError(f"missing weight tensors: {sorted(missing)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValidationError(
                    f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
                )
        return cls(
            config=config,
            score_w1=tensors["score.w1"],
            score_b1=tensors["score.b1"],
            score_w2=tensors["score.w2"],
            score_b2=tensors["score.b2"],
            reduce_w1=tensors["reduce.w1"],
            reduce_b1=tensors["reduce.b1"],
            reduce_w2=tensors["reduce.w2"],
            reduce_b2=tensors["reduce.b2"],
            global_w1=tensors["global.w1"],
            global_b1=tensors["global.b1"],
            global_w2=tensors["global.w2"],
            global_b2=tensors["global.b2"],
            z=tensors["dustbin.z"],
        )

    def mlp(self, name: str):
        """(w1, b1, w2, b2) of one of the three MLPs."""
        if name not in MLP_NAMES:
            raise ConfigError(f"unknown MLP {name!r}, expected one of {MLP_NAMES}")
        t = self.tensors()
        return t[f"{name}.w1"], t[f"{name}.b1"], t[f"{name}.w2"], t[f"{name}.b2"]

    def astype(self, dtype) -> "AggregatorWeights":
        t = {k: v.astype(dtype) for k, v in self.tensors().items()}
        return AggregatorWeights.from_tensors(self.config, t)

    def validate(self):
        for name, arr in self.tensors().items():
            if not np.isfinite(arr).all():
                raise ValidationError(f"tensor {name!r} contains non-finite entries")
        AggregatorWeights.from_tensors(self.config, self.tensors())  # shape check


def expected_shapes(config: AggregatorConfig) -> dict[str, tuple[int, ...]]:
    c = config
    return {
        "score.w1": (c.hidden, c.d),
        "score.b1": (c.hidden,),
        "score.w2": (c.m, c.hidden),
        "score.b2": (c.m,),
        "reduce.w1": (c.hidden, c.d),
        "reduce.b1": (c.hidden,),
        "reduce.w2": (c.l, c.hidden),
        "reduce.b2": (c.l,),
        "global.w1": (c.hidden, c.d),
        "global.b1": (c.hidden,),
        "global.w2": (c.g_dim, c.hidden),
        "global.b2": (c.g_dim,),
        "dustbin.z": (),
    }


def _uniform_bound(fan_in: int) -> float:
    return math.sqrt(1.0 / fan_in)


def init_weights(config: AggregatorConfig, dtype=np.float32) -> AggregatorWeights:
    """Fresh parameters: weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)),
    biases zero, dustbin scalar zero. Deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    shapes = expected_shapes(config)

    def draw(name):
        shape = shapes[name]
        fan_in = shape[1]
        b = _uniform_bound(fan_in)
        return rng.uniform(-b, b, size=shape).astype(dtype)

    tensors: dict[str, np.ndarray] = {}
    for mlp in MLP_NAMES:
        tensors[f"{mlp}.w1"] = draw(f"{mlp}.w1")
        tensors[f"{mlp}.b1"] = np.zeros(shapes[f"{mlp}.b1"], dtype=dtype)
        tensors[f"{mlp}.w2"] = draw(f"{mlp}.w2")
        tensors[f"{mlp}.b2"] = np.zeros(shapes[f"{mlp}.b2"], dtype=dtype)
    tensors["dustbin.z"] = np.zeros((), dtype=dtype)
    return AggregatorWeights.from_tensors(config, tensors)


def mlp2_graph(x: ad.Var, w1, b1, w2, b2, mask=None) -> ad.Var:
    """Recorded forward of ``W2 @ relu(W1 @ x + b1) + b2`` for row-stacked
    inputs ``x`` of shape (n, d). ``mask`` multiplies the hidden activations
    (inverted-dropout convention)."""
    h = ad.relu(ad.add(ad.matmul(x, ad.transpose(w1)), b1))
    if mask is not None:
        h = ad.mul(h, mask)
    return ad.add(ad.matmul(h, ad.transpose(w2)), b2)


def mlp2_forward(x: np.ndarray, mlp: str, weights: AggregatorWeights, dropout_mask=None) -> np.ndarray:
    """Apply one of the three MLPs to a single d-vector or an (n, d) batch.

    Pure function of its inputs; the optional ``dropout_mask`` is applied
    to the hidden layer exactly as during training.
    """
    x = np.asarray(x)
    w1, b1, w2, b2 = weights.mlp(mlp)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != w1.shape[1]:
        raise DimensionError(
            f"input shape {x.shape} incompatible with {mlp} MLP (d={w1.shape[1]})"
        )
    mask = None
    if dropout_mask is not None:
        mask = np.asarray(dropout_mask)
        if mask.shape != (x2.shape[0], w1.shape[0]) and mask.shape != (w1.shape[0],):
            raise DimensionError(
                f"dropout mask shape {mask.shape} incompatible with hidden width {w1.shape[0]}"
            )
    out = mlp2_graph(ad.Var(x2), ad.Var(w1), ad.Var(b1), ad.Var(w2), ad.Var(b2), mask).value
    return out[0] if single else out


def dropout_mask(rate: float, shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 with probability ``rate``,
    else ``1 / (1 - rate)``. Training-only; inference passes no mask."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(size=shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)
