"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import OPS, Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        # both sides vanish: nothing meaningful to compare
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    floor: float = 1e-10,
) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``f`` must close over ``params`` (mutated in place while probing). The
    relative error is computed per parameter tensor as
    ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``; the worst
    one is returned as ``max_rel_error``.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {p.dtype}")

    base = f()
    if base.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    again = f()
    if base.item() != again.item():
        raise ValueError("function is not deterministic; grad_check rejected")

    for p in params.values():
        p.grad = None
        p.requires_grad = True
    out = f()
    out.backward()

    result = GradCheckResult(max_rel_error=0.0)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        data = p.data
        for k in np.ndindex(data.shape):
            orig = data[k]
            data[k] = orig + epsilon
            up = f().item()
            data[k] = orig - epsilon
            down = f().item()
            data[k] = orig
            numeric[k] = (up - down) / (2 * epsilon)
        err = _rel_error(analytic, numeric, floor)
        result.per_param[name] = err
        result.max_rel_error = max(result.max_rel_error, err)
    return result


@contextlib.contextmanager
def corrupted_backward(op_name: str, scale: float = 1.5):
    """Negative-control hook: scale every gradient an op returns."""
    op = OPS[op_name]
    original = op.backward

    def broken(ctx, grad):
        return tuple(None if g is None else g * scale for g in original(ctx, grad))

    op.backward = broken
    try:
        yield
    finally:
        del op.backward
