"""Minimal neural-network core: fixed layer vocabulary, hand-derived
backward passes, plain SGD, and a finite-difference gradient checker."""

from .gradcheck import grad_check, mse_loss_fn, sum_loss_fn
from .layers import (
    LAYER_KINDS,
    BatchNorm,
    Conv2D,
    DensePerFrame,
    FreqPool,
    Layer,
    ReLU,
    Sigmoid,
    SoftmaxPerFrame,
)
from .network import (
    DivergenceError,
    Network,
    ParameterSet,
    Tape,
    backward,
    forward,
    sgd_step,
)
from .weights_io import WeightFormatError, load_weights, read_manifest, save_weights

__all__ = [
    "LAYER_KINDS",
    "BatchNorm",
    "Conv2D",
    "DensePerFrame",
    "DivergenceError",
    "FreqPool",
    "Layer",
    "Network",
    "ParameterSet",
    "ReLU",
    "Sigmoid",
    "SoftmaxPerFrame",
    "Tape",
    "WeightFormatError",
    "backward",
    "forward",
    "grad_check",
    "load_weights",
    "mse_loss_fn",
    "read_manifest",
    "save_weights",
    "sgd_step",
    "sum_loss_fn",
]
