"""Minimal deterministic tensor and differentiation engine."""

from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (avg_pool2d, conv2d, cross_entropy, gaussian_noise, global_avg_pool, layer_norm, linear,
                  log_softmax, max_pool2d, relu, sigmoid, softmax)
from .optim import Adam, AdamState, adam_step
from .rng import STREAMS, RngStream
from .tensor import DEFAULT_DTYPE, Parameter, ShapeError, Tensor, concat, no_grad, tmax

__all__ = [
    "Adam", "AdamState", "DEFAULT_DTYPE", "GradCheckReport", "Parameter", "RngStream", "STREAMS", "ShapeError",
    "Tensor", "adam_step", "avg_pool2d", "concat", "conv2d", "cross_entropy", "gaussian_noise",
    "global_avg_pool", "grad_check", "layer_norm", "linear", "log_softmax", "max_pool2d", "no_grad",
    "relative_error", "relu", "sigmoid", "softmax", "tmax",
]
