"""Minimal reverse-mode autodiff over float32 NCHW tensors."""
from .gradcheck import GradCheckResult, check_gradients, numeric_grad
from .init import conv_params, linear_params, norm_params, params_bytes, uniform_fan_in
from .optim import OptimizerState, adam_step
from .tensor import (
    DTYPE,
    ContractError,
    EmptyInputError,
    GradientRecord,
    MissingGradientError,
    NonFiniteError,
    NumcoreError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    avg_pool2,
    backward,
    clamp,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    is_grad_enabled,
    layer_norm,
    leaky_relu,
    log,
    matmul,
    maximum,
    mean,
    mul,
    no_grad,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    sub,
    transpose,
    tsum,
    upsample2,
)
