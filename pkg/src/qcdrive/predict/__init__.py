"""Trajectory predictors: constant velocity and a small multi-encoder attention network."""

from .attention import multi_encoder_attention, multi_head, scaled_dot_attention
from .baseline import cv_params, predict_cv, rmse_ade_fde
from .checkpoint import load, save
from .model import (
    AttentionWeights,
    Batch,
    PredictorConfig,
    forward,
    init_weights,
    loss,
    loss_and_grad,
    make_batch,
    param_shapes,
    predict,
    zero_weights,
)
from .train import TrainingDiverged, TrainingSample, grad_check, lr_factor, mean_loss, samples_to_batch, train
