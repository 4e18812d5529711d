"""Finite-difference verification of the reverse-mode engine.

``check_gradients`` compares analytic gradients against central
differences, (f(x+h) - f(x-h)) / 2h, evaluated in float64. Comparison is
elementwise with combined tolerance |a - n| <= atol + rtol * |n|, and the
reported figure of merit is the max relative error |a - n| / max(|a|, |n|)
over checked coordinates, taken as 0 where both magnitudes sit below the
finite-difference noise floor.

For large parameter tensors, checking every coordinate is wasteful;
``sample`` coordinates are drawn without replacement from a seeded stream
so failures reproduce exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import make_rng

DEFAULT_EPS = 1e-5
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-7
# below this magnitude a relative error is FD noise, not signal
_REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    passed: bool
    worst_coord: tuple = ()

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: rel={self.max_rel_error:.3e} "
                f"abs={self.max_abs_error:.3e} ({self.n_checked} coords)")


def central_difference(f, x: np.ndarray, coord: tuple, eps: float) -> float:
    """Derivative of scalar-valued f at one coordinate of x."""
    xp = x.copy()
    xm = x.copy()
    xp[coord] += eps
    xm[coord] -= eps
    return (f(xp) - f(xm)) / (2.0 * eps)


def check_gradients(fn, inputs: list[T.Tensor], name: str = "fn",
                    eps: float = DEFAULT_EPS, rtol: float = DEFAULT_RTOL,
                    atol: float = DEFAULT_ATOL, sample: int | None = None,
                    seed: int = 0) -> GradCheckResult:
    """Compare fn's analytic input gradients to central differences.

    fn maps the tensors in `inputs` to a scalar Tensor. All inputs must
    be float64; the check is meaningless at single precision.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 inputs")
        if not t.requires_grad:
            raise ValueError("all checked inputs must have requires_grad")

    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError("fn must return a scalar")
    out.backward()

    max_rel = 0.0
    max_abs = 0.0
    worst: tuple = ()
    n_checked = 0
    passed = True
    rng = make_rng(seed, 0xFD)

    for ti, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat_coords = np.arange(t.size)
        if sample is not None and t.size > sample:
            flat_coords = rng.choice(t.size, size=sample, replace=False)

        def scalar_fn(x, _ti=ti):
            saved = inputs[_ti].data
            inputs[_ti].data = x
            try:
                with T.no_grad():
                    return float(fn(*inputs).data)
            finally:
                inputs[_ti].data = saved

        for fc in flat_coords:
            coord = np.unravel_index(int(fc), t.shape)
            num = central_difference(scalar_fn, t.data, coord, eps)
            ana = float(analytic[coord])
            abs_err = abs(ana - num)
            denom = max(abs(ana), abs(num))
            rel_err = abs_err / denom if denom > _REL_FLOOR else 0.0
            n_checked += 1
            if abs_err > atol + rtol * abs(num):
                passed = False
            if rel_err > max_rel:
                max_rel = rel_err
                worst = (ti,) + tuple(int(c) for c in coord)
            max_abs = max(max_abs, abs_err)

    return GradCheckResult(name=name, max_rel_error=max_rel,
                           max_abs_error=max_abs, n_checked=n_checked,
                           passed=passed, worst_coord=worst)
