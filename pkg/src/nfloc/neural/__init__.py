from .layers import BatchNormParams, ConvLayerParams, FcLayerParams, mse_loss
from .model import Architecture, ModelParams, init_model, model_backward, model_forward, parameter_count
from .optim import AdamWState, adamw_step
from .serialize import load_model, save_model
from .train import TrainingConfig, TrainResult, predict, predict_batch, train

__all__ = [
    "AdamWState", "Architecture", "BatchNormParams", "ConvLayerParams", "FcLayerParams", "ModelParams",
    "TrainResult", "TrainingConfig", "adamw_step", "init_model", "load_model", "model_backward",
    "model_forward", "mse_loss", "parameter_count", "predict", "predict_batch", "save_model", "train",
]
