from .gradcheck import numeric_grad, pick_coords, relative_error
from .optim import AdamState, ParamStore, adam_step, lr_schedule, warmup_steps
from .tensor import (
    Tensor,
    adaptive_avg_pool2d,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    concat,
    conv2d,
    cross_entropy,
    default_dtype,
    dropout,
    embedding,
    gelu,
    index,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    pad_edge,
    precision,
    reshape,
    scale,
    softmax,
    softmax_rows,
    sub,
    transpose,
)
from .tensor import sum as tsum

__all__ = [
    "AdamState", "ParamStore", "Tensor", "adam_step", "adaptive_avg_pool2d", "add",
    "as_tensor", "backward", "bce_with_logits", "concat", "conv2d", "cross_entropy",
    "default_dtype", "dropout", "embedding", "gelu", "index", "layer_norm", "linear",
    "log_softmax", "lr_schedule", "matmul", "mean", "mul", "numeric_grad", "pad_edge", "pick_coords",
    "precision", "relative_error", "reshape", "scale", "softmax", "softmax_rows", "sub",
    "transpose", "tsum", "warmup_steps",
]
