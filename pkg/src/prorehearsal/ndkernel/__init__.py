"""Minimal float64 tensor substrate: eager ops, reverse-mode tape, momentum SGD."""

from .graph import Graph, backward, forward
from .optim import SgdState, kaiming_uniform, sgd_step
from .tensor import (
    KernelError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    UsageError,
    active_tape,
    add,
    concat,
    div,
    exp,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    square,
    sub,
    tanh,
    temporal_conv1d,
    tsum,
)

__all__ = [
    "Graph", "backward", "forward", "SgdState", "kaiming_uniform", "sgd_step",
    "KernelError", "NonFiniteError", "ShapeError", "Tape", "Tensor", "UsageError",
    "active_tape", "add", "concat", "div", "exp", "getitem", "log", "log_softmax",
    "matmul", "mean", "mul", "neg", "power", "relu", "reshape", "square", "sub",
    "tanh", "temporal_conv1d", "tsum",
]
