"""Tensor autodiff, neural blocks, optimizer and checkpoints."""

from .checkpoint import load_checkpoint, read_records, save_checkpoint, write_records
from .nn import add_gru, add_linear, glorot, gru_cell, gru_weights, linear
from .optim import ParamStore, adam_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    is_recording,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    put_rows,
    relu,
    repeat2d,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    take_rows,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "ParamStore",
    "Tensor",
    "adam_step",
    "add",
    "add_gru",
    "add_linear",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "div",
    "exp",
    "getitem",
    "glorot",
    "gru_cell",
    "gru_weights",
    "is_recording",
    "leaky_relu",
    "linear",
    "load_checkpoint",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "put_rows",
    "read_records",
    "relu",
    "repeat2d",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "sqrt",
    "stack",
    "sub",
    "take_rows",
    "tanh",
    "transpose",
    "tsum",
    "write_records",
]
