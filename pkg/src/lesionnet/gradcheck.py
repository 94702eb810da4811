"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               n_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and a
    central difference.

    ``f`` is called with ``x`` itself; ``x.data`` is perturbed in place, so a
    closure that ignores its argument can be used to check a model parameter.
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``n_coords`` restricts the numeric side to a random subset of coordinates.
    """
    was = x.requires_grad
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
        backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_coords is not None and n_coords < flat.size:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        a_flat = analytic.reshape(-1)
        worst = 0.0
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(x).data)
                flat[i] = orig - h
                fm = float(f(x).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                worst = max(worst, abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i])))
        return worst
    finally:
        x.requires_grad = was
        x.grad = None
