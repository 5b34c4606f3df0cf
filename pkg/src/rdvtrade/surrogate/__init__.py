"""Sequence-model surrogate: tokenization, model, training, and rollouts."""

from rdvtrade.surrogate.tokens import (
    ELEMENT_DIMS,
    NormStats,
    TokenSequence,
    denormalize,
    fit_stats,
    normalize,
    sequences_from_records,
    target_observation,
    tokenize,
)
from rdvtrade.surrogate.model import (
    DESK_CONFIG,
    PAPER_CONFIG,
    ModelConfig,
    TrajectoryModel,
)
from rdvtrade.surrogate.training import (
    ModelState,
    export_loss_curve,
    load_checkpoint,
    save_checkpoint,
    train,
)
from rdvtrade.surrogate.inference import infer, infer_batch

__all__ = [
    "ELEMENT_DIMS",
    "NormStats",
    "TokenSequence",
    "denormalize",
    "fit_stats",
    "normalize",
    "sequences_from_records",
    "target_observation",
    "tokenize",
    "DESK_CONFIG",
    "PAPER_CONFIG",
    "ModelConfig",
    "TrajectoryModel",
    "ModelState",
    "export_loss_curve",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "infer",
    "infer_batch",
]
