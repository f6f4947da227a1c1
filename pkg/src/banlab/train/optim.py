"""Adamax, the warmup/step-decay learning-rate schedule, and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class AdamaxState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)


def adamax_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                state: AdamaxState, lr: float) -> dict[str, np.ndarray]:
    """One Adamax update; returns new parameter arrays and advances ``state``.

    m <- b1*m + (1-b1)*g,  u <- max(b2*u, |g|),
    theta <- theta - lr/(1-b1^t) * m / max(u, eps).

    ``eps`` only guards the all-zero-gradient coordinate, so it never
    perturbs a step whose infinity norm is already positive.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = lr / (1.0 - b1 ** state.t)
    new = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name)
        u = state.u.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        u = np.abs(g) if u is None else np.maximum(b2 * u, np.abs(g))
        state.m[name], state.u[name] = m, u
        new[name] = theta - step * m / np.maximum(u, state.eps)
    return new


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to a plateau, then step decay for a fixed number of epochs."""

    warmup_step: float = 1e-3
    peak: float = 4e-3
    decay_start: int = 11
    decay_every: int = 2
    decay_factor: float = 0.25
    decay_stop: int = 13

    def __post_init__(self):
        if self.warmup_step <= 0 or self.peak <= 0 or self.decay_factor <= 0:
            raise ValueError("schedule rates must be positive")


def lr_at(epoch: int, schedule: Schedule = Schedule()) -> float:
    """Learning rate for a 1-based epoch index."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    s = schedule
    if epoch < s.decay_start:
        return min(epoch * s.warmup_step, s.peak)
    last = (s.decay_stop - s.decay_start) // s.decay_every
    n = min((epoch - s.decay_start) // s.decay_every, last) + 1
    return s.peak * s.decay_factor ** n


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float = 0.25) -> dict[str, np.ndarray]:
    """Rescale all gradients together when their joint 2-norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    return {k: (g * max_norm) / norm for k, g in grads.items()}
