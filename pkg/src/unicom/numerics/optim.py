"""AdamW with global gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip: float | None = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if not np.isfinite(total):
        raise NonFiniteError("non-finite gradient norm")
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}, total


def adamw_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray],
               lr: float | None = None) -> float:
    """One bias-corrected AdamW update in place. Returns the pre-clip gradient norm.

    Raises before touching any parameter if a gradient is NaN/Inf.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for '{name}'")
    grads, norm = clip_grad_norm(grads, state.clip)
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return norm


class AdamW:
    """Convenience wrapper binding named parameters to an OptimizerState."""

    def __init__(self, named_params, **kwargs):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = OptimizerState(**kwargs)

    def step(self, lr: float | None = None) -> float:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        return adamw_step(self.state, self.params, grads, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def warmup_lr(step: int, base: float, warmup: int) -> float:
    """Linear warm-up to ``base`` then constant."""
    if warmup <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup)
