"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tape, Tensor, high_precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


# (offset in steps, weight) pairs; the derivative is sum(w * f(x + o h)) / h
_STENCILS = {
    3: ((1, 0.5), (-1, -0.5)),
    5: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
               eps: float = 1e-5, tol: float = 1e-6, floor: float = 1e-4,
               points: int = 3) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*xs)`` against central differences.

    ``points`` picks the stencil: 3 is the usual (f(x+h) - f(x-h)) / 2h with
    O(h^2) truncation error, 5 the fourth-order stencil, which tolerates a
    wider step and so less round-off.  Entries whose magnitude is below
    ``floor`` are compared on an absolute scale, since their relative error
    is dominated by finite-difference noise.  All inputs are promoted to
    float64 for the duration of the check.
    """
    if points not in _STENCILS:
        raise ValueError(f"points must be one of {sorted(_STENCILS)}")
    stencil = _STENCILS[points]
    xs = [x] if isinstance(x, Tensor) else list(x)
    with high_precision():
        originals = [t.data for t in xs]
        for t in xs:
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
            t.grad = None
        try:
            with Tape():
                y = f(*xs)
            value = float(y.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"grad_check: non-finite forward value {value}")
            y.backward()
            analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
            numeric = []
            for t in xs:
                num = np.zeros_like(t.data)
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    keep = flat[i]
                    acc = 0.0
                    for offset, weight in stencil:
                        flat[i] = keep + offset * eps
                        acc += weight * float(f(*xs).data)
                    flat[i] = keep
                    num.reshape(-1)[i] = acc / eps
                numeric.append(num)
        finally:
            for t, orig in zip(xs, originals):
                t.grad = None
                t.data = orig
    a = np.concatenate([g.reshape(-1) for g in analytic])
    n = np.concatenate([g.reshape(-1) for g in numeric])
    err = _rel_error(a, n, floor)
    worst = int(np.argmax(err)) if err.size else 0
    return GradCheckReport(float(err.max()) if err.size else 0.0, tol, (worst,), a, n)
