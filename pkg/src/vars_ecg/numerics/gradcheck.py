from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericOverflowError, Tensor, backward


def finite_difference_check(f: Callable[[Tensor], Tensor], point: Tensor | np.ndarray,
                            step: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    backward(out, [x])
    analytic = x.grad

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(base.copy())).item()
        flat[i] = orig - step
        lo = f(Tensor(base.copy())).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericOverflowError(f"finite_difference_check: f non-finite near coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * step)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
