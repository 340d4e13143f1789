"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, no_grad


class GradCheckError(ArithmeticError):
    """Raised when the checked function is non-finite at some perturbed point."""

    def __init__(self, param_index: int, coord: tuple[int, ...], value: float):
        super().__init__(f"non-finite loss {value!r} perturbing param {param_index} at {coord}")
        self.param_index = param_index
        self.coord = coord


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``f`` is re-evaluated after in-place perturbation of each parameter
    coordinate, so it must read the parameters' current ``data``.
    """
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError("grad_check: parameters must be finite")
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError(-1, (), float(loss.data.reshape(-1)[0]))
    if loss.requires_grad:
        loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for k, p in enumerate(params):
            flat = p.data.reshape(-1)
            ana = analytic[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    coord = tuple(int(c) for c in np.unravel_index(i, p.shape))
                    raise GradCheckError(k, coord, fp if not np.isfinite(fp) else fm)
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(ana[i] - num) / max(1.0, abs(ana[i])))
    return worst
