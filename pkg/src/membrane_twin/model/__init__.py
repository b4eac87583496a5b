from .chamfer import EmptyCloudError, chamfer_eval_mm, chamfer_loss, chamfer_sq, nn_error_map
from .metrics import BIN_EDGES, describe, evaluate, summarize
from .networks import AutoEncoder, FCDecoder, GridDecoder, PointNetEncoder, Regressor
from .pipeline import Pipeline, fit_pipeline, fit_regressor_stage, load_autoencoder
from .training import (TrainConfig, TrainingDivergence, TrainReport, autoencoder_config,
                       regressor_config, split_indices, train_autoencoder, train_regressor)

__all__ = [
    "EmptyCloudError", "chamfer_eval_mm", "chamfer_loss", "chamfer_sq", "nn_error_map",
    "BIN_EDGES", "describe", "evaluate", "summarize",
    "AutoEncoder", "FCDecoder", "GridDecoder", "PointNetEncoder", "Regressor",
    "Pipeline", "fit_pipeline", "fit_regressor_stage", "load_autoencoder",
    "TrainConfig", "TrainingDivergence", "TrainReport", "autoencoder_config", "regressor_config",
    "split_indices", "train_autoencoder", "train_regressor",
]
