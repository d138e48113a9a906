from .tensor import (
    ShapeError,
    Tensor,
    concat,
    default_dtype,
    gelu,
    get_default_dtype,
    layer_norm,
    nll_rows,
    no_grad,
    set_default_dtype,
    sigmoid,
    softmax,
    softplus,
    tensor,
)
from .optim import Adam, AdamConfig, schedule_lr
from .gradcheck import finite_difference, relative_error

__all__ = [
    "Adam",
    "AdamConfig",
    "ShapeError",
    "Tensor",
    "concat",
    "default_dtype",
    "finite_difference",
    "gelu",
    "get_default_dtype",
    "layer_norm",
    "nll_rows",
    "no_grad",
    "relative_error",
    "schedule_lr",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "softplus",
    "tensor",
]
