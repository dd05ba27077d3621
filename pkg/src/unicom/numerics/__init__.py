from .gradcheck import check_gradients
from .nn import (Block, Embedding, LayerNorm, Linear, MLP, Module, Parameter, SelfAttention,
                 TimestepEmbedding, sinusoidal)
from .optim import AdamW, OptimizerState, adamw_step, clip_grad_norm, warmup_lr
from .tensor import (NonFiniteError, ShapeError, Tensor, add, as_tensor, backward, concat,
                     cross_entropy, div, embedding, exp, gelu, get_default_dtype, getitem,
                     is_grad_enabled, layernorm, matmul, mean, mse, mul, no_grad, precision,
                     reshape, set_default_dtype, softmax, stack, sub, sum_, tanh, transpose)

__all__ = [
    "AdamW", "Block", "Embedding", "LayerNorm", "Linear", "MLP", "Module", "NonFiniteError",
    "OptimizerState", "Parameter", "SelfAttention", "ShapeError", "Tensor", "TimestepEmbedding",
    "adamw_step", "add", "as_tensor", "backward", "check_gradients", "clip_grad_norm", "concat",
    "cross_entropy", "div", "embedding", "exp", "gelu", "get_default_dtype", "getitem",
    "is_grad_enabled", "layernorm", "matmul", "mean", "mse", "mul", "no_grad", "precision",
    "reshape", "set_default_dtype", "sinusoidal", "softmax", "stack", "sub", "sum_", "tanh",
    "transpose", "warmup_lr",
]
