"""MADGRAD and momentum SGD over a dict of numpy parameter arrays.

Both update the arrays in place and return them, so a checkpoint's params
dict can be passed directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass
class MadgradState:
    x0: dict[str, np.ndarray]
    s: dict[str, np.ndarray]
    nu: dict[str, np.ndarray]
    k: int = 0


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    k: int = 0


def _check(params, grads):
    for name, g in grads.items():
        if params[name].shape != np.shape(g):
            raise DimensionError(f"gradient for {name} has shape {np.shape(g)}, parameter {params[name].shape}")


def madgrad_init(params: dict[str, np.ndarray]) -> MadgradState:
    return MadgradState(
        x0={k: v.copy() for k, v in params.items()},
        s={k: np.zeros_like(v) for k, v in params.items()},
        nu={k: np.zeros_like(v) for k, v in params.items()},
    )


def madgrad_step(params, grads, state: MadgradState, lr: float, momentum: float = 0.9, eps: float = 1e-6):
    """One dual-averaging step.

    lam = lr * sqrt(k + 1); s += lam * g; nu += lam * g^2;
    z = x0 - s / (cbrt(nu) + eps); x = momentum * x + (1 - momentum) * z.
    Parameters without a gradient entry still move toward their current z.
    """
    _check(params, grads)
    lam = lr * np.sqrt(state.k + 1)
    for name, x in params.items():
        g = grads.get(name)
        if g is not None:
            state.s[name] += lam * g
            state.nu[name] += lam * g * g
        z = state.x0[name] - state.s[name] / (np.cbrt(state.nu[name]) + eps)
        # written as a correction so that z == x leaves x bit-identical
        x += (1.0 - momentum) * (z - x)
    state.k += 1
    return params, state


def sgd_init(params) -> SGDState:
    return SGDState({k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(params, grads, state: SGDState, lr: float, momentum: float = 0.0):
    _check(params, grads)
    for name, g in grads.items():
        v = state.velocity[name]
        v *= momentum
        v += g
        params[name] -= lr * v
    state.k += 1
    return params, state


class Optimizer:
    """Bundles a step function, its state and hyperparameters."""

    def __init__(self, params, kind: str = "madgrad", lr: float = 1e-3, momentum: float = 0.9, eps: float = 1e-6):
        if lr < 0:
            raise ValidationError("learning rate must be nonnegative")
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.eps = eps
        if kind == "madgrad":
            self.state = madgrad_init(params)
        elif kind == "sgd":
            self.state = sgd_init(params)
        else:
            raise ValidationError(f"unknown optimizer {kind!r}")

    def step(self, params, grads):
        if self.kind == "madgrad":
            return madgrad_step(params, grads, self.state, self.lr, self.momentum, self.eps)[0]
        return sgd_step(params, grads, self.state, self.lr, self.momentum)[0]
