"""Central finite-difference verification of tape gradients.

All checks run in float64; finite differences are too noisy at f32 to
separate truncation error from roundoff.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


class GradCheckError(RuntimeError):
    """The function under test produced a non-finite value."""


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` must be a deterministic map from ``x`` to a scalar tensor. The
    relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_difference_check requires a float64 tensor")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise ValueError(f"f must return a scalar, got shape {y.shape}")
        tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = analytic.reshape(-1)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite function value at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(numeric - analytic[i]) / max(abs(numeric), abs(analytic[i]), 1e-8)
        worst = max(worst, err)
    return worst


def check_parameters(f: Callable[[], Tensor], params: dict[str, Tensor],
                     h: float = 1e-5) -> dict[str, float]:
    """Finite-difference every tensor in ``params`` against one analytic pass.

    ``f`` closes over the parameter tensors and returns a scalar. Returns
    the max relative error per parameter name.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise ValueError("check_parameters requires float64 parameters")
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        y = f()
        if y.size != 1:
            raise ValueError(f"f must return a scalar, got shape {y.shape}")
        tape.backward(y)

    errors: dict[str, float] = {}
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite value while perturbing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(numeric - analytic[i]) / max(abs(numeric), abs(analytic[i]), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return errors
