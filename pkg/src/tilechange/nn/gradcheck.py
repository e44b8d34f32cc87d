"""Finite-difference validation of analytic gradients.

Used in 64-bit mode only: central differences with the default step lose
roughly half the mantissa, which float32 cannot afford.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError
from .tensor import Tensor


def grad_check(fn, inputs, step: float = 1e-4, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn(*inputs)` must return a Tensor; it is reduced to a scalar with a
    fixed random cotangent so every output coordinate participates.
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise DomainError("grad_check requires float64 inputs (check mode)")
    if rng is None:
        rng = np.random.default_rng(0)

    out0 = fn(*inputs)
    cot = rng.standard_normal(out0.shape)

    def scalar(*args) -> float:
        with_np = fn(*args)
        return float((with_np.data * cot).sum())

    # analytic: backward of sum(cot * out)
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    proxy = Tensor((out.data * cot).sum().reshape(()))
    proxy.requires_grad = out.requires_grad
    proxy._parents = (out,)

    def vjp(g):
        out.accumulate(g * cot)

    proxy._vjp = vjp
    proxy.backward()

    worst = 0.0
    for ti, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = scalar(*inputs)
            flat[i] = orig - step
            f_minus = scalar(*inputs)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic.ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
