"""Minimal float64 tensor math with reverse-mode differentiation."""

from .instrument import Tracker, count_ops, track
from .nn import Linear, init_linear, init_mlp, mlp_forward
from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import (
    CovarianceError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    div,
    exp,
    getitem,
    grad,
    grad_enabled,
    layer_norm,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    mvn_lowrank_nll,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    row_exact,
    softmax,
    softmax_rows,
    softplus,
    sqrt,
    sub,
    sum_,
    swapaxes,
    topological_order,
    transpose,
    where_const,
)
from .params import fingerprint, named_tensors
