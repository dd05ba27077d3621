"""Layers built on the autodiff tensor: linear maps, norms, attention blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=requires_grad)


class Module:
    """Minimal container: parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            unexpected = set(state) - set(own)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise T.ShapeError(f"load_state_dict: {name} expects {p.shape}, got {arr.shape}")
            p.data = np.asarray(arr, dtype=p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(T.get_default_dtype())


class Linear(Module):
    """y = x W + b with W ~ N(0, 1/fan_in)."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        self.weight = Parameter(normal(rng, (fan_in, fan_out), std if std is not None else 1.0 / math.sqrt(fan_in)))
        self.bias = Parameter(np.zeros(fan_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter(normal(rng, (count, dim), std))

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SelfAttention(Module):
    """Multi-head self-attention over the second-to-last axis.

    ``mask`` is a boolean (S, S) or (B, S, S) array; entry (i, j) True lets
    position i attend to position j.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        *lead, s, dim = x.shape
        h = self.heads
        dh = dim // h
        qkv = self.qkv(x).reshape(*lead, s, 3, h, dh)
        perm = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 2, 0, 3))
        qkv = qkv.transpose(*perm)  # (..., 3, h, s, dh)
        q = qkv[(Ellipsis, 0, slice(None), slice(None), slice(None))]
        k = qkv[(Ellipsis, 1, slice(None), slice(None), slice(None))]
        v = qkv[(Ellipsis, 2, slice(None), slice(None), slice(None))]
        # scaling q costs s*dh multiplies instead of s*s on the scores
        scores = T.matmul(q * (1.0 / math.sqrt(dh)), k.swapaxes(-1, -2))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 3:
                mask = mask[:, None]
        attn = T.softmax(scores, mask)
        out = T.matmul(attn, v)  # (..., h, s, dh)
        back = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2))
        out = out.transpose(*back).reshape(*lead, s, dim)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def sinusoidal(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos features, shape positions.shape + (dim,)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = positions[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb.astype(T.get_default_dtype())


class TimestepEmbedding(Module):
    """Sinusoidal features of t in [0, 1] followed by a 2-layer MLP."""

    def __init__(self, dim: int, rng: np.random.Generator, freq_dim: int = 32):
        self.freq_dim = freq_dim
        self.mlp = MLP(freq_dim, dim, rng, out=dim)

    def forward(self, t) -> Tensor:
        t = np.asarray(t, dtype=np.float64)
        return self.mlp(Tensor(sinusoidal(t * 1000.0, self.freq_dim)))
