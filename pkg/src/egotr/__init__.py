"""Cross-view geo-localization with a two-branch transformer, built on a small numpy autodiff engine."""

from .attention import encoder_layer, encoder_stack, multihead
from .config import RunConfig, load_config
from .data import CrossViewDataset, SceneSpec, load_dataset, make_dataset, polar_transform, render_pair
from .estimator import EgoTR
from .evaluation import RecallReport, build_index, evaluate_retrieval, recall_at_k
from .exceptions import (CheckpointError, ConfigError, DataError, DimensionError, EgoTRError,
                         NonFiniteError, UsageError)
from .model import EgoTrModel, ModelConfig, forward_pair, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad
from .training import AdamW, TrainConfig, batch_loss, cosine_lr, fit, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CheckpointError", "ConfigError", "CrossViewDataset", "DataError", "DimensionError",
    "EgoTR", "EgoTRError", "EgoTrModel", "ModelConfig", "NonFiniteError", "RecallReport",
    "RunConfig", "SceneSpec", "Tensor", "TrainConfig", "UsageError", "backward", "batch_loss",
    "build_index", "cosine_lr", "encoder_layer", "encoder_stack", "evaluate_retrieval", "fit",
    "forward_pair", "load_checkpoint", "load_config", "load_dataset", "make_dataset", "multihead",
    "no_grad", "polar_transform", "recall_at_k", "render_pair", "save_checkpoint", "triplet_loss",
]
