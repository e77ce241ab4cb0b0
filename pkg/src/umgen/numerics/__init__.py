from .tensor import (
    MASK_NEG, Tensor, add, concat, cross_entropy, dropout, embedding_gather,
    gelu, layer_norm, matmul, mean, mul, no_grad, reshape, scale, slice_,
    softmax_masked, sum_, transpose,
)
from .optim import AdamW
from .meter import CacheMeter
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "MASK_NEG", "Tensor", "add", "concat", "cross_entropy", "dropout",
    "embedding_gather", "gelu", "layer_norm", "matmul", "mean", "mul",
    "no_grad", "reshape", "scale", "slice_", "softmax_masked", "sum_",
    "transpose", "AdamW", "CacheMeter", "load_checkpoint", "save_checkpoint",
    "GradCheckReport", "grad_check",
]
