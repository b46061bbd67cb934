from .autodiff import (
    PRIMITIVES,
    ShapeError,
    Tape,
    Tensor,
    abs_,
    add,
    backward,
    clip,
    concat,
    constant,
    div,
    exp,
    forward_primitive,
    getitem,
    grad_of,
    jacobian,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    reshape,
    sigmoid,
    softmax,
    softplus,
    square,
    sub,
    sum_,
    take,
    tensor,
)
from .optim import AdamWState, NonFiniteGradient, adamw_step
from .rng import derive_seed, seeded_rng

__all__ = [
    "PRIMITIVES",
    "ShapeError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "clip",
    "concat",
    "constant",
    "div",
    "exp",
    "forward_primitive",
    "getitem",
    "grad_of",
    "jacobian",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "reshape",
    "sigmoid",
    "softmax",
    "softplus",
    "square",
    "sub",
    "sum_",
    "take",
    "tensor",
    "AdamWState",
    "NonFiniteGradient",
    "adamw_step",
    "derive_seed",
    "seeded_rng",
]
