"""Training state, frozen-parameter registry and the shared optimisation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .checkpoint import params_hash
from .numerics import Module, OptimizerState, Parameter

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e3


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, last_checkpoint=None):
        super().__init__(f"training diverged at step {step} (loss={loss}); last checkpoint: {last_checkpoint}")
        self.step = step
        self.loss = loss
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainState:
    params: dict[str, Parameter]
    optimizer: OptimizerState
    seed: int
    frozen: dict[str, str] = field(default_factory=dict)
    frozen_modules: dict[str, Module] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.optimizer.step

    def register_frozen(self, name: str, module: Module) -> None:
        module.freeze()
        self.frozen_modules[name] = module
        self.frozen[name] = params_hash(module.named_parameters())

    def frozen_hashes(self) -> dict[str, str]:
        """Current parameter hashes of every frozen module."""
        return {n: params_hash(m.named_parameters()) for n, m in self.frozen_modules.items()}

    def verify_frozen(self) -> dict[str, bool]:
        now = self.frozen_hashes()
        return {n: now[n] == self.frozen[n] for n in self.frozen}


def make_state(named_params, seed: int, lr: float, weight_decay: float, clip: float = 1.0) -> TrainState:
    params = dict(named_params)
    return TrainState(params, OptimizerState(lr=lr, weight_decay=weight_decay, clip=clip), seed)


def train_step(state: TrainState, loss: nx.Tensor, lr: float) -> float:
    """Backprop ``loss`` into the trainable parameters and apply one AdamW update."""
    value = float(loss.data)
    if not math.isfinite(value) or value > DIVERGENCE_LOSS:
        raise TrainingDiverged(state.step, value)
    for p in state.params.values():
        p.grad = None
    nx.backward(loss, state.params.values())
    for name, module in state.frozen_modules.items():
        for pname, p in module.named_parameters():
            if p.grad is not None and np.any(p.grad):
                raise RuntimeError(f"frozen parameter {name}.{pname} received a gradient")
    grads = {n: p.grad for n, p in state.params.items()}
    return nx.adamw_step(state.optimizer, state.params, grads, lr)


def run_loop(state: TrainState, steps: int, loss_fn: Callable[[int], tuple[nx.Tensor, dict]],
             base_lr: float, warmup: int, on_eval: Callable[[int], None] | None = None,
             eval_every: int = 0, checkpoint_fn: Callable[[int], object] | None = None) -> list[dict]:
    """Generic loop. ``loss_fn(step)`` returns (loss, scalar metrics)."""
    history = []
    last_ckpt = None
    if on_eval is not None and eval_every:
        on_eval(0)
    for step in range(steps):
        try:
            loss, metrics = loss_fn(step)
            gnorm = train_step(state, loss, nx.warmup_lr(step, base_lr, warmup))
        except TrainingDiverged as exc:
            raise TrainingDiverged(step, exc.loss, last_ckpt) from None
        except nx.NonFiniteError:
            raise TrainingDiverged(step, float("nan"), last_ckpt) from None
        history.append({"step": step + 1, "loss": float(loss.data), "grad_norm": gnorm, **metrics})
        done = step + 1
        if eval_every and (done % eval_every == 0 or done == steps):
            if on_eval is not None:
                on_eval(done)
            if checkpoint_fn is not None:
                last_ckpt = checkpoint_fn(done)
        if done % 200 == 0:
            log.info("step %d loss %.4f", done, float(loss.data))
    return history
