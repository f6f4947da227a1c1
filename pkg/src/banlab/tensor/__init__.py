from banlab.tensor.core import DimensionError, Tape, TapeError, Tensor, as_tensor, backward
from banlab.tensor.gradcheck import GradCheckReport, grad_check
from banlab.tensor.ops import (
    EmptyGroupError,
    add,
    broadcast_to,
    clip,
    concat,
    hadamard,
    log,
    masked_fill,
    masked_softmax,
    matmul,
    mean,
    outer_broadcast,
    record_op,
    reduce_max,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
    take,
    take_along,
    tanh,
    transpose,
)

__all__ = [
    "DimensionError", "EmptyGroupError", "GradCheckReport", "Tape", "TapeError", "Tensor",
    "add", "as_tensor", "backward", "broadcast_to", "clip", "concat", "grad_check", "hadamard",
    "log", "masked_fill", "masked_softmax", "matmul", "mean", "outer_broadcast", "record_op", "reduce_max",
    "reduce_sum", "relu", "reshape", "scale", "sigmoid", "sub", "take", "take_along", "tanh",
    "transpose",
]
