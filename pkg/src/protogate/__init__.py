"""Two-head prototype classifier with an entropy gate for generalized zero-shot and open-set recognition."""

from .dataset import (ClassAttributeTable, Dataset, DatasetError, SplitSpec, SyntheticConfig,
                      ValidationSplit, center_attributes, generate_synthetic, load_dataset,
                      make_gzsl_val_split, normalize_attributes, write_dataset)
from .evaluation import (GridResult, GridSpec, GosrMetrics, GzslMetrics, eval_gosr, eval_gzsl,
                         grid_search, harmonic_mean, semantic_recognition)
from .inference import (GatedPrediction, Thresholds, describe_unknown, entropy_of, predict_gosr,
                        predict_gzsl)
from .model import (Hyperparams, ModelError, ModelParams, class_probabilities, dce_loss, head_loss,
                    init_params, joint_loss, joint_loss_gradients, load_params, pl_loss,
                    save_params, sq_dist)
from .trainer import TrainConfig, TrainingError, evaluate_loss, train

__version__ = "0.1.0"

__all__ = [
    "ClassAttributeTable",
    "Dataset",
    "DatasetError",
    "SplitSpec",
    "SyntheticConfig",
    "ValidationSplit",
    "center_attributes",
    "generate_synthetic",
    "load_dataset",
    "make_gzsl_val_split",
    "normalize_attributes",
    "write_dataset",
    "GridResult",
    "GridSpec",
    "GosrMetrics",
    "GzslMetrics",
    "eval_gosr",
    "eval_gzsl",
    "grid_search",
    "harmonic_mean",
    "semantic_recognition",
    "GatedPrediction",
    "Thresholds",
    "describe_unknown",
    "entropy_of",
    "predict_gosr",
    "predict_gzsl",
    "Hyperparams",
    "ModelError",
    "ModelParams",
    "class_probabilities",
    "dce_loss",
    "head_loss",
    "init_params",
    "joint_loss",
    "joint_loss_gradients",
    "load_params",
    "pl_loss",
    "save_params",
    "sq_dist",
    "TrainConfig",
    "TrainingError",
    "evaluate_loss",
    "train",
]
