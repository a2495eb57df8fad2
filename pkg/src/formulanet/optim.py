"""Non-centered RMSProp with weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeMismatch


@dataclass
class OptimizerState:
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    acc: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def rmsprop_step(params: dict, grads: dict, state: OptimizerState):
    """Update ``params`` in place from ``grads``; returns ``(params, state)``.

    Per entry::

        g   <- g + wd * theta
        acc <- rho * acc + (1 - rho) * g**2
        theta <- theta - lr * g / (sqrt(acc) + eps)
    """
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        g = g + state.weight_decay * theta
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(theta)
        acc *= state.rho
        acc += (1 - state.rho) * g * g
        theta -= (state.lr * g / (np.sqrt(acc) + state.eps)).astype(theta.dtype)
    state.step += 1
    return params, state
