"""AdaMax optimizer over named parameter collections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation, Parameter


@dataclass
class AdaMaxState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)   # name -> first moment
    u: dict = field(default_factory=dict)   # name -> infinity norm


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def adamax_step(params, state: AdaMaxState, lr: float | None = None) -> None:
    """One AdaMax update: m <- b1*m + (1-b1)*g; u <- max(b2*u, |g|);
    theta <- theta - (lr/(1-b1^t)) * m/(u+eps)."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractViolation(f"adamax_step: parameter {p.name!r} has no gradient")
    state.step += 1
    if lr is None:
        lr = state.learning_rate
    b1, b2 = state.beta1, state.beta2
    bias = 1.0 - b1 ** state.step
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        u = state.u.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            u = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        u = np.maximum(b2 * u, np.abs(g))
        state.m[p.name] = m
        state.u[p.name] = u
        p.data -= (lr / bias) * m / (u + state.epsilon)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """Fan-in scaled uniform init, deterministic under the supplied rng."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def make_parameter(rng, name, shape, fan_in, dtype=np.float32) -> Parameter:
    return Parameter(name, he_uniform(rng, shape, fan_in, dtype))
