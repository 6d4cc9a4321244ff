"""Dense math, reverse-mode differentiation and optimisers."""
from .autodiff import Tape, Var
from .maml import FIRST_ORDER, SECOND_ORDER, adapt, meta_grad, task_meta_grad
from .mlp import (
    Layer,
    MlpParams,
    cross_entropy,
    forward,
    glorot_layer,
    grad,
    hidden_features,
    init_mlp,
    loss,
    mlp_loss,
    predict_proba,
)
from .optim import AdamState, adam_step, sgd_step

__all__ = [
    "Tape",
    "Var",
    "Layer",
    "MlpParams",
    "AdamState",
    "FIRST_ORDER",
    "SECOND_ORDER",
    "adapt",
    "adam_step",
    "cross_entropy",
    "forward",
    "glorot_layer",
    "grad",
    "hidden_features",
    "init_mlp",
    "loss",
    "meta_grad",
    "mlp_loss",
    "predict_proba",
    "sgd_step",
    "task_meta_grad",
]
