"""Straight-path flow matching: interpolation, target velocity, Euler integration."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .numerics import NonFiniteError


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    return t


def interpolate(z1, eps, t):
    """z_t = t * z1 + (1 - t) * eps. ``t`` broadcasts over leading axes."""
    t = _check_t(t)
    z1, eps = np.asarray(z1), np.asarray(eps)
    if z1.shape != eps.shape:
        raise ValueError(f"interpolate: shapes {z1.shape} and {eps.shape} differ")
    t = t.reshape(t.shape + (1,) * (z1.ndim - t.ndim)).astype(z1.dtype)
    return t * z1 + (1.0 - t) * eps


def target_velocity(z1, eps):
    z1, eps = np.asarray(z1), np.asarray(eps)
    if z1.shape != eps.shape:
        raise ValueError(f"target_velocity: shapes {z1.shape} and {eps.shape} differ")
    return z1 - eps


def euler_integrate(v_fn: Callable[[np.ndarray, float], np.ndarray], z0, steps: int) -> np.ndarray:
    """Integrate dz/dt = v_fn(z, t) from t=0 to t=1 with ``steps`` Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        v = np.asarray(v_fn(z, k * dt))
        if v.shape != z.shape:
            raise ValueError(f"velocity shape {v.shape} does not match state {z.shape}")
        z = z + dt * v
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite state at Euler step {k}")
    return z
