"""Adaptive Simpson quadrature for scalar- or array-valued integrands."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError


def adaptive_simpson(
    f: Callable[[float], np.ndarray | float],
    a: float,
    b: float,
    tol: float = 1e-10,
    max_depth: int = 40,
):
    """Integrate ``f`` over [a, b] with adaptive Simpson bisection.

    The integrand may return arrays; the acceptance test is taken in the
    max norm so every component meets ``tol`` (absolute, distributed over
    subintervals in proportion to their length).  Raises NumericError when
    a subinterval still fails after ``max_depth`` bisections.
    """
    if b == a:
        return np.zeros_like(np.asarray(f(a), dtype=float))
    sign = 1.0
    if b < a:
        a, b, sign = b, a, -1.0
    fa, fb = np.asarray(f(a), float), np.asarray(f(b), float)
    m = 0.5 * (a + b)
    fm = np.asarray(f(m), float)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    total = np.zeros_like(whole)
    stack = [(a, b, fa, fm, fb, whole, 0)]
    length = b - a
    while stack:
        lo, hi, flo, fmid, fhi, est, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = np.asarray(f(lm), float), np.asarray(f(rm), float)
        left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi)
        err = np.max(np.abs(left + right - est))
        local_tol = tol * (hi - lo) / length
        if err <= 15.0 * local_tol or (depth >= 3 and err <= 1e-15 * np.max(np.abs(left + right))):
            total = total + left + right + (left + right - est) / 15.0
        elif depth >= max_depth:
            raise NumericError(f"adaptive Simpson did not converge on [{lo}, {hi}] (error {err:.3e})")
        else:
            stack.append((mid, hi, fmid, frm, fhi, right, depth + 1))
            stack.append((lo, mid, flo, flm, fmid, left, depth + 1))
    return sign * total
