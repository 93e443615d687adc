"""Optimal-transport local-feature aggregation.

Turns a bag of image tokens into one unit-norm global descriptor by
solving an entropic transport problem between token mass and cluster
capacity (plus a dustbin for uninformative tokens), and ships the
machinery around it: metric-learning training, binary formats, a
retrieval index and a Recall@k evaluation harness.
"""

from .aggregate import (
    ClusterMatrix,
    Descriptor,
    aggregate_vlad,
    finalize_descriptor,
    forward_full,
    project_global,
    reduce_dims,
)
from .assign import (
    Assignment,
    ScoreMatrix,
    build_scores,
    drop_dustbin,
    marginal_violation,
    sinkhorn_assign,
    transport_marginals,
)
from .errors import (
    ConfigError,
    DegenerateDescriptorError,
    DimensionError,
    FormatError,
    NumericError,
    OtaggError,
    PreconditionError,
    UsageError,
    ValidationError,
)
from .model import (
    AggregatorConfig,
    AggregatorWeights,
    FeatureSet,
    GeoTag,
    dropout_mask,
    init_weights,
    mlp2_forward,
)
from .retrieval import (
    EvalReport,
    RetrievalIndex,
    build_index,
    is_positive,
    query_topk,
    recall_at_k,
)
from .training import (
    LossParams,
    OptimizerState,
    TrainingBatch,
    TrainingParams,
    adamw_step,
    lr_at,
    ms_loss,
    train_run,
)

__version__ = "0.1.0"

__all__ = [
    "AggregatorConfig",
    "AggregatorWeights",
    "Assignment",
    "ClusterMatrix",
    "ConfigError",
    "DegenerateDescriptorError",
    "Descriptor",
    "DimensionError",
    "EvalReport",
    "FeatureSet",
    "FormatError",
    "GeoTag",
    "LossParams",
    "NumericError",
    "OptimizerState",
    "OtaggError",
    "PreconditionError",
    "RetrievalIndex",
    "ScoreMatrix",
    "TrainingBatch",
    "TrainingParams",
    "UsageError",
    "ValidationError",
    "adamw_step",
    "aggregate_vlad",
    "build_index",
    "build_scores",
    "drop_dustbin",
    "dropout_mask",
    "finalize_descriptor",
    "forward_full",
    "init_weights",
    "is_positive",
    "lr_at",
    "marginal_violation",
    "mlp2_forward",
    "ms_loss",
    "project_global",
    "query_topk",
    "recall_at_k",
    "reduce_dims",
    "sinkhorn_assign",
    "train_run",
    "transport_marginals",
]
