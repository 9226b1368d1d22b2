"""Tensor engine, optimizer and RNG used by every model module."""
from .gradcheck import finite_difference_check
from .optim import AdamState, adam_step
from .rng import make_rng
from .tensor import (
    ContractError,
    NumericOverflowError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    clip,
    concat,
    cosine_rows,
    div,
    exp,
    gather_matrix,
    l2_normalize_rows,
    log,
    log_sigmoid,
    log_softmax_rows,
    logsumexp_rows,
    matmul,
    mean,
    mean_rows,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    scale,
    scatter_matrix,
    sigmoid,
    softmax_rows,
    stack_rows,
    sub,
    sum,
    take_rows,
    transpose,
)

__all__ = [
    "AdamState", "ContractError", "NumericOverflowError", "ShapeError", "Tape", "Tensor",
    "adam_step", "add", "as_tensor", "backward", "bce_with_logits", "clip", "concat", "cosine_rows", "div", "exp",
    "finite_difference_check", "gather_matrix", "l2_normalize_rows", "log", "log_sigmoid", "log_softmax_rows",
    "logsumexp_rows", "make_rng",
    "matmul", "mean", "mean_rows", "mul", "no_grad", "power", "relu", "reshape", "scale",
    "scatter_matrix", "sigmoid", "softmax_rows", "stack_rows", "sub", "sum", "take_rows",
    "transpose",
]
