"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import NumericError, Tensor


def grad_check(f, params: list[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar loss against central differences.

    `f` must be a deterministic zero-argument callable returning a scalar
    Tensor computed from the current values of `params`. Returns the worst
    relative error max|analytic - numeric| / max(1, |analytic|, |numeric|)
    over every coordinate of every parameter.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise NumericError("non-finite loss in grad_check")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = float(f().data)
            flat[i] = original - h
            f_minus = float(f().data)
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("non-finite loss during perturbation")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ga_flat[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
