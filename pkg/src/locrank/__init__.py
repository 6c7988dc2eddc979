"""Weakly supervised attribute localization and ranking.

A Siamese pair of spatial-transformer rankers learns, from pairwise
"stronger than" / "about the same" labels alone, where in an image an
attribute lives and how strong it is there.
"""

from .autodiff import Graph, Tensor, check_gradient, grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import (
    ComparisonPair,
    PairDataset,
    SyntheticSample,
    gen_synthetic,
    load_manifest,
    make_pairs,
    write_synthetic_dataset,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    LocrankError,
    NonFiniteError,
    UsageError,
)
from .estimator import LocalizeRanker
from .evaluation import EvalReport, eval_pairs, localization_error
from .loss import LossResult, combined_loss, rank_loss, st_loss
from .model import Architecture, BranchOutput, ModelParams, init_params, localize, score_branch, siamese_forward
from .netpbm import read_image, write_image
from .optim import OptimState, sgd_step
from .spatial import Theta, bilinear_sample, generate_grid, patch_center_px
from .train import TrainLog, score_image_tta, train
from .viz import emit_heatmap, emit_ranked_strip

__version__ = "0.1.0"

__all__ = [
    "Architecture", "BranchOutput", "CheckpointError", "ComparisonPair", "ConfigurationError",
    "DataError", "EvalReport", "Graph", "LocalizeRanker", "LocrankError", "LossResult",
    "ModelParams", "NonFiniteError", "OptimState", "PairDataset", "RunConfig", "SyntheticSample",
    "Tensor", "Theta", "TrainLog", "UsageError", "bilinear_sample", "check_gradient",
    "combined_loss", "emit_heatmap", "emit_ranked_strip", "eval_pairs", "gen_synthetic",
    "generate_grid", "grad_check", "init_params", "load_checkpoint", "load_config",
    "load_manifest", "localization_error", "localize", "make_pairs", "patch_center_px",
    "rank_loss", "read_image", "save_checkpoint", "score_branch", "score_image_tta", "sgd_step",
    "siamese_forward", "st_loss", "train", "write_image", "write_synthetic_dataset",
]
