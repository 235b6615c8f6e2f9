"""Tensor arithmetic with reverse-mode differentiation."""

from .gradcheck import check_gradients, finite_diff_grad, max_relative_error
from .kernels import BACKEND
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    add,
    affine_norm,
    as_tensor,
    concat,
    cross_entropy,
    embedding,
    exp,
    gelu,
    get_dtype,
    getitem,
    linear,
    log,
    log_softmax,
    matmul,
    meanpool,
    mul,
    multihead_attention,
    parameter,
    precision,
    reshape,
    set_precision,
    sigmoid,
    softmax,
    stack,
    sub,
    transpose,
    tmean,
    tsum,
    where_mask,
)

__all__ = [name for name in dir() if not name.startswith("_")]
