"""Minimal dense-tensor library with reverse-mode differentiation."""

from semaim.numerics.gradcheck import finite_diff_check, finite_diff_errors
from semaim.numerics.io import decode_tensor, encode_tensor, read_tensor, write_tensor
from semaim.numerics.runtime import is_deterministic, limit_threads, set_deterministic
from semaim.numerics.tensor import (
    MASK_FILL,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    default_dtype,
    div,
    gelu,
    get_default_dtype,
    getitem,
    layer_norm,
    linear,
    mask_scores,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    set_default_dtype,
    softmax_lastdim,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "MASK_FILL",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "decode_tensor",
    "default_dtype",
    "div",
    "encode_tensor",
    "finite_diff_check",
    "finite_diff_errors",
    "gelu",
    "get_default_dtype",
    "getitem",
    "is_deterministic",
    "layer_norm",
    "limit_threads",
    "linear",
    "mask_scores",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "read_tensor",
    "reshape",
    "set_default_dtype",
    "set_deterministic",
    "softmax_lastdim",
    "sub",
    "transpose",
    "tsum",
    "write_tensor",
]
