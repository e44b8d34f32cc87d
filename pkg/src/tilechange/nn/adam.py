"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError, DomainError, ShapeError

BETA1 = 0.9
BETA2 = 0.999
EPS_OPT = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates per named parameter."""

    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS_OPT
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 0.001) -> None:
    """One bias-corrected Adam update, in place on `params` arrays.

    `params` and `grads` map name -> ndarray of matching shape. Parameter
    iteration order is the dict order, which is fixed per model, so the
    update is bitwise reproducible.
    """
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise DomainError(f"missing gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name!r} at step {t}")
        dt = p.dtype.type
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        p -= dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
