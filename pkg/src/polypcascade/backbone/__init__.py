"""Pluggable image classifiers: training protocol, augmentation, mock oracles."""

from .jitter import color_jitter
from .model import (TASK_CLASSES, TASK_POLICY, NetModel, OracleModel, TrainedModel,
                    load_model, mock_oracle_backbone, predict_proba, save_model)
from .train import EmptyClassError, train
from .types import (FIXED_SIDE, NO_JITTER, ClassifierSpec, ColorJitterParams,
                    TrainConfig)

__all__ = [
    "FIXED_SIDE", "NO_JITTER", "TASK_CLASSES", "TASK_POLICY",
    "ClassifierSpec", "ColorJitterParams", "EmptyClassError", "NetModel",
    "OracleModel", "TrainConfig", "TrainedModel", "color_jitter", "load_model",
    "mock_oracle_backbone", "predict_proba", "save_model", "train",
]
