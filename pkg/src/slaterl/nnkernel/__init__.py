"""Minimal differentiable computation substrate.

Dense tensors, reverse-mode gradients, the forward operations the package's
architectures need, an Adam optimizer, exact parameter persistence, and a
finite-difference gradient checker.
"""

from .tensor import (
    Tensor,
    as_tensor,
    no_grad,
    frozen,
    zero_grads,
    add,
    sub,
    neg,
    mul,
    matmul,
    relu,
    minimum,
    sigmoid,
    exp,
    log,
    clip,
    tsum,
    tmean,
    softmax,
    log_softmax,
    layer_norm,
    dropout,
    embedding,
    take_rows,
    concat,
    narrow,
    reshape,
    swapaxes,
)
from .modules import (
    ModuleSpec,
    Module,
    Linear,
    Embedding,
    MLP,
    LayerNorm,
    MultiHeadAttention,
    TransformerEncoder,
    TransformerEncoderLayer,
    AttentionPool,
    build_module,
    forward,
)
from .optim import Adam
from .io import save_parameters, load_parameters, SpecMismatchError
from .gradcheck import gradient_check, check_loss_gradients, GradCheckReport

__all__ = [
    "Tensor", "as_tensor", "no_grad", "frozen", "zero_grads",
    "add", "sub", "neg", "mul", "matmul", "relu", "minimum", "sigmoid", "exp", "log",
    "clip", "tsum", "tmean", "softmax", "log_softmax", "layer_norm", "dropout",
    "embedding", "take_rows", "concat", "narrow", "reshape", "swapaxes",
    "ModuleSpec", "Module", "Linear", "Embedding", "MLP", "LayerNorm",
    "MultiHeadAttention", "TransformerEncoder", "TransformerEncoderLayer",
    "AttentionPool", "build_module", "forward",
    "Adam", "save_parameters", "load_parameters", "SpecMismatchError",
    "gradient_check", "check_loss_gradients", "GradCheckReport",
]
