"""Tensor core: dense arrays, reverse-mode autodiff, fused kernels, checkpoints."""
from .core import (
    DTYPES,
    TAPE,
    ComputationTape,
    DimensionError,
    Tensor,
    UsageError,
    add,
    backward,
    concat,
    matmul,
    mul,
    no_grad,
    reshape,
    scale,
    softmax,
    transpose,
)
from .nn import (
    ConfigError,
    causal_softmax,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    transformer_layer_forward,
)

__all__ = [
    "DTYPES", "TAPE", "ComputationTape", "ConfigError", "DimensionError", "Tensor",
    "UsageError", "add", "backward", "causal_softmax", "concat", "cross_entropy",
    "embedding", "gelu", "layer_norm", "linear", "matmul", "mul", "no_grad", "reshape",
    "scale", "softmax", "transformer_layer_forward", "transpose",
]
