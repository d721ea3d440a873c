"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and ``RSBRIDGE_PURE`` is
not set; otherwise the numpy versions in ``_fallback`` are used.
``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("RSBRIDGE_PURE"):
        raise ImportError("pure backend requested")
    from . import _ext
except ImportError:
    _ext = None

BACKEND = "cython" if _ext is not None else "python"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ext is not None else [])


def sinkhorn_loop(A, B, norm_w, f0, tol, max_iters, backend: str | None = None):
    backend = backend or BACKEND
    if backend == "cython" and _ext is not None:
        return _ext.sinkhorn_loop(
            np.ascontiguousarray(A, dtype=float),
            np.ascontiguousarray(B, dtype=float),
            np.ascontiguousarray(norm_w, dtype=float),
            np.ascontiguousarray(f0, dtype=float),
            float(tol),
            int(max_iters),
        )
    return _fallback.sinkhorn_loop(A, B, norm_w, f0, tol, max_iters)


def interp_rows(table, rows, x, node0, h, shape, order=1, clamp=False, backend: str | None = None):
    """Interpolate ``table[rows[p]]`` at point ``x[p]``; see ``_fallback.interp_rows``."""
    backend = backend or BACKEND
    shape = tuple(int(n) for n in np.atleast_1d(shape))
    if backend == "cython" and _ext is not None and len(shape) == 1:
        return _ext.interp1d_rows(
            np.ascontiguousarray(table, dtype=float),
            np.ascontiguousarray(rows, dtype=np.intp),
            np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1)),
            float(np.atleast_1d(node0)[0]),
            float(np.atleast_1d(h)[0]),
            int(order),
            bool(clamp),
        )
    return _fallback.interp_rows(table, np.asarray(rows, dtype=np.intp), x, np.atleast_1d(node0), np.atleast_1d(h), shape, order, clamp)


def bin_points(x, regime, lower, h, shape, n_regimes, backend: str | None = None):
    backend = backend or BACKEND
    shape = tuple(int(n) for n in np.atleast_1d(shape))
    if backend == "cython" and _ext is not None and len(shape) == 1:
        return _ext.bin_points_1d(
            np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1)),
            np.ascontiguousarray(regime, dtype=np.intp),
            float(np.atleast_1d(lower)[0]),
            float(np.atleast_1d(h)[0]),
            shape[0],
            int(n_regimes),
        )
    return _fallback.bin_points(x, regime, lower, h, shape, n_regimes)
