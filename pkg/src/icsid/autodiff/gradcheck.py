"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math

import numpy as np

from ..errors import GradCheckError
from .params import ParamSet
from .tensor import no_grad


def grad_check(loss_fn, params: ParamSet, step: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar loss against central differences.

    loss_fn takes the ParamSet and returns a scalar Tensor; it must be a pure
    function of the parameter values. Every coordinate of every parameter is
    perturbed by +-step. Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Parameters should
    be float64; float32 arithmetic drowns the difference quotient in rounding
    noise.
    """
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise GradCheckError(f"grad_check requires float64 parameters, {name!r} is {t.data.dtype}")

    params.zero_grad()
    loss = loss_fn(params)
    if loss.data.size != 1:
        raise GradCheckError(f"loss must be scalar, got shape {loss.shape}")
    if not math.isfinite(float(loss.data.reshape(()))):
        raise GradCheckError("loss is non-finite at the unperturbed point")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                lo_hi = float(loss_fn(params).data.reshape(()))
                flat[i] = orig - step
                lo_lo = float(loss_fn(params).data.reshape(()))
                flat[i] = orig
            if not (math.isfinite(lo_hi) and math.isfinite(lo_lo)):
                raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (lo_hi - lo_lo) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            rel = abs(gflat[i] - numeric) / denom
            if rel > worst:
                worst = rel
    return worst
