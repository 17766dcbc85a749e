"""Reverse-mode automatic differentiation over numpy arrays."""

from .fft import fft2_centered, fft2c, ifft2c
from .nn import (BatchNormState, avg_pool2d, batch_norm, conv2d, grid_sample_bilinear,
                 identity_grid, upsample2x)
from .optim import Adam, AdamState, adam_step
from .tensor import (EPS, NonFiniteError, ShapeError, Tensor, add, as_tensor, concat, div,
                     elementwise, exp, log, matmul, mean, mul, neg, power, reduce, relu,
                     reshape, sigmoid, sqrt, square, stack, strict_mode, sub, tabs, tanh,
                     transpose, tsum, where)

__all__ = [
    "EPS", "Adam", "AdamState", "BatchNormState", "NonFiniteError", "ShapeError", "Tensor",
    "adam_step", "add", "as_tensor", "avg_pool2d", "batch_norm", "concat", "conv2d", "div",
    "elementwise", "exp", "fft2_centered", "fft2c", "grid_sample_bilinear", "identity_grid",
    "ifft2c", "log", "matmul", "mean", "mul", "neg", "power", "reduce", "relu", "reshape",
    "sigmoid", "sqrt", "square", "stack", "strict_mode", "sub", "tabs", "tanh", "transpose",
    "tsum", "upsample2x", "where",
]
