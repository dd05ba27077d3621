"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[], Tensor], p: Tensor, index: tuple, h: float) -> float:
    old = p.data[index]
    p.data[index] = old + h
    fp = float(f().data)
    p.data[index] = old - h
    fm = float(f().data)
    p.data[index] = old
    return (fp - fm) / (2.0 * h)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    samples: int = 20, seed: int = 0, atol: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values. Up to
    ``samples`` coordinates per parameter are checked (all of them when the
    parameter is smaller). Error per coordinate is
    |a - n| / (|a| + |n| + 1e-12). Coordinates where both values are below
    ``atol`` count as agreeing: a gradient that is exactly zero (a key bias
    under softmax shift invariance) leaves only finite-difference roundoff.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    analytic = [np.array(p.grad, dtype=np.float64, copy=True) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = np.arange(p.data.size)
        chosen = flat if flat.size <= samples else rng.choice(flat, size=samples, replace=False)
        for k in chosen:
            index = np.unravel_index(int(k), p.shape)
            num = numeric_grad(f, p, index, h)
            a = float(g[index])
            if max(abs(a), abs(num)) < atol:
                continue
            err = abs(a - num) / (abs(a) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
