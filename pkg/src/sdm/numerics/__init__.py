from .gradcheck import GradCheckReport, finite_diff_check
from .nn import avg_pool2d, conv2d, linear, upsample_nearest
from .rng import derive_seed, make_rng
from .tensor import (
    NumericError,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    div,
    exp,
    grad_enabled,
    leaky_relu,
    log,
    make_op,
    matmul,
    maximum,
    mean,
    mul,
    no_grad,
    norm_cdf,
    power,
    reshape,
    sigmoid,
    softmax,
    softplus,
    stop_gradient,
    sub,
    sum_,
    swapaxes,
    tanh,
    transpose,
    where,
)

__all__ = [
    "GradCheckReport",
    "NumericError",
    "Tensor",
    "add",
    "as_tensor",
    "avg_pool2d",
    "clamp",
    "concat",
    "conv2d",
    "derive_seed",
    "div",
    "exp",
    "finite_diff_check",
    "grad_enabled",
    "leaky_relu",
    "linear",
    "log",
    "make_op",
    "make_rng",
    "matmul",
    "maximum",
    "mean",
    "mul",
    "no_grad",
    "norm_cdf",
    "power",
    "reshape",
    "sigmoid",
    "softmax",
    "softplus",
    "stop_gradient",
    "sub",
    "sum_",
    "swapaxes",
    "tanh",
    "transpose",
    "upsample_nearest",
    "where",
]
