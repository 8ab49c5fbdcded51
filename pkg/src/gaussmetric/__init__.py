"""Distribution-regularized pair metric learning.

A siamese encoder maps each input to a feature vector; a metric head maps
the concatenated pair to a low-dimensional value that training pulls onto
one of two Gaussian targets (matching vs non-matching) via a closed-form
KL loss over batch statistics. Verification thresholds the four-flip
average of the metric output.
"""

from .autodiff import Node, Tape
from .config import RunConfig, TrainConfig, load_run_config, save_run_config
from .dataio import (
    CheckpointData,
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    subset_identities,
    write_dataset,
)
from .errors import (
    ConfigError,
    DatasetError,
    FormatError,
    InsufficientBatchError,
    NumericError,
    ShapeError,
)
from .evaluation import (
    AggregatedStatistic,
    EvalPair,
    EvalReport,
    MomentSummary,
    RocPoint,
    aggregate,
    diagnose_sweep,
    evaluate_pairs,
    roc_curve,
    sample_eval_pairs,
    verify,
    write_report,
)
from .kl_loss import batch_moments, kl_diag, kl_full, total_loss
from .mining import (
    MiningStats,
    PairBatch,
    SamplePair,
    bootstrap_batches,
    fill_batch,
    is_difficult,
    sample_epoch,
)
from .model import ModelConfig, ModelParams, init_params, pair_forward_np
from .targets import DecisionRule, TargetSpec
from .trainer import TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AggregatedStatistic",
    "CheckpointData",
    "ConfigError",
    "DatasetError",
    "Dataset",
    "DecisionRule",
    "EvalPair",
    "EvalReport",
    "FormatError",
    "InsufficientBatchError",
    "MiningStats",
    "ModelConfig",
    "ModelParams",
    "MomentSummary",
    "Node",
    "NumericError",
    "PairBatch",
    "RocPoint",
    "RunConfig",
    "SamplePair",
    "ShapeError",
    "SyntheticSpec",
    "Tape",
    "TargetSpec",
    "TrainConfig",
    "TrainResult",
    "aggregate",
    "batch_moments",
    "bootstrap_batches",
    "diagnose_sweep",
    "evaluate_pairs",
    "fill_batch",
    "generate_synthetic",
    "init_params",
    "is_difficult",
    "kl_diag",
    "kl_full",
    "load_checkpoint",
    "load_run_config",
    "pair_forward_np",
    "read_dataset",
    "roc_curve",
    "sample_epoch",
    "sample_eval_pairs",
    "save_checkpoint",
    "save_run_config",
    "subset_identities",
    "total_loss",
    "train",
    "verify",
    "write_dataset",
    "write_report",
]
