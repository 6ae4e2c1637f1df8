"""Rectified Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def rho_inf(beta2: float) -> float:
    return 2.0 / (1.0 - beta2) - 1.0


def rho(t: int, beta2: float) -> float:
    """Length of the approximated simple moving average at step t."""
    b2t = beta2**t
    return rho_inf(beta2) - 2.0 * t * b2t / (1.0 - b2t)


def rectification(t: int, beta2: float) -> float | None:
    """Variance rectification factor, or None when the momentum branch applies."""
    r_t, r_inf = rho(t, beta2), rho_inf(beta2)
    if r_t <= 4.0:
        return None
    return math.sqrt(((r_t - 4) * (r_t - 2) * r_inf) / ((r_inf - 4) * (r_inf - 2) * r_t))


@dataclass
class RAdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class RAdam:
    """RAdam over a name -> Tensor parameter map, updated in place."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = RAdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, grads: dict) -> None:
        """Apply one update given name -> gradient array.

        A non-finite gradient aborts the step before any state changes.
        """
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {self.params[name].shape}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        radam_step(self.state, self.params, grads)


def radam_step(state: RAdamState, params: dict, grads: dict) -> None:
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    r = rectification(t, b2)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype.type
        m = state.m[name] = dt(b1) * state.m[name] + dt(1.0 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1.0 - b2) * (g * g)
        m_hat = m / dt(bias1)
        if r is None:
            p.data = p.data - dt(state.lr) * m_hat
        else:
            v_hat = np.sqrt(v / dt(bias2))
            p.data = p.data - dt(state.lr * r) * m_hat / (v_hat + dt(state.eps))
