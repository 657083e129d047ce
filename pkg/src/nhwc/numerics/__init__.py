from .gradcheck import grad_check
from .optim import Adam, OptimizerState, accumulate_and_step
from .tensor import (
    Tape,
    Tensor,
    add,
    causal_attention,
    concat,
    cross_entropy_logits,
    dropout,
    embedding,
    gelu,
    get_default_dtype,
    getitem,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    neg,
    precision,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    straight_through,
    tanh,
    total,
    transpose,
    unfold1d,
)

__all__ = [
    "Adam", "OptimizerState", "Tape", "Tensor", "accumulate_and_step", "add",
    "causal_attention", "concat", "cross_entropy_logits", "dropout", "embedding",
    "gelu", "get_default_dtype", "getitem", "grad_check", "layer_norm", "matmul",
    "mean", "mse", "mul", "neg", "precision", "relu", "reshape", "set_default_dtype",
    "softmax", "straight_through", "tanh", "total", "transpose", "unfold1d",
]
