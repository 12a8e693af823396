"""Reverse-mode tensor engine over a closed op vocabulary.

tensor.py   Tensor, tape nodes, and the backward pass
ops.py      forward/adjoint rules for every op
kernels.py  compiled-vs-NumPy backend selection for the hot kernels
gradcheck.py finite-difference oracle and the canonical check suite
"""

from .tensor import (
    MAX_RANK,
    NonFiniteError,
    NumericError,
    Tensor,
    as_tensor,
    backward,
    grad_enabled,
    no_grad,
)
from .ops import (
    abs_,
    add,
    apply,
    clamp_min,
    concat,
    conv1x1,
    div,
    dwconv3x3,
    gelu,
    layernorm,
    matmul,
    mean,
    mul,
    registered_ops,
    reshape,
    scale,
    softmax,
    space_to_channel,
    channel_to_space,
    sub,
    sum_sq,
)
from .gradcheck import CHECK_SUITE, grad_check, run_suite, suite_ops
from .kernels import active_backend

__all__ = [
    "MAX_RANK", "NonFiniteError", "NumericError", "Tensor", "as_tensor",
    "backward", "grad_enabled", "no_grad",
    "abs_", "add", "apply", "clamp_min", "concat", "conv1x1", "div",
    "dwconv3x3", "gelu", "layernorm", "matmul", "mean", "mul",
    "registered_ops", "reshape", "scale", "softmax", "space_to_channel",
    "channel_to_space", "sub", "sum_sq",
    "CHECK_SUITE", "grad_check", "run_suite", "suite_ops", "active_backend",
]
