"""Pure numpy implementations of the hot kernels.

These define the reference behaviour; the compiled module mirrors them.
"""
from __future__ import annotations

import itertools

import numpy as np


def sinkhorn_loop(A, B, norm_w, f0, tol, max_iters):
    """Normalized fixed-point iteration f <- C(f)/||C(f)||.

    ``A`` (n0 x nT) already carries the terminal masses, so ``A @ (1/f)``
    applies the terminal map after the reciprocal; ``B.T @ u`` applies the
    initial map.  Returns (f, iterations, residuals, status) with status
    0 converged, 1 iteration cap, 2 nonpositive intermediate.
    """
    f = np.array(f0, dtype=float, copy=True)
    residuals = np.empty(max_iters)
    for it in range(max_iters):
        a = A @ (1.0 / f)
        if not np.all(a > 0):
            return f, it, residuals[:it], 2
        g = B.T @ (1.0 / a)
        nrm = np.sqrt(np.sum(g * g * norm_w))
        if not (nrm > 0 and np.isfinite(nrm)):
            return f, it, residuals[:it], 2
        g /= nrm
        diff = g - f
        residuals[it] = np.sqrt(np.sum(diff * diff * norm_w))
        f = g
        if residuals[it] <= tol:
            return f, it + 1, residuals[: it + 1], 0
    return f, max_iters, residuals, 1


def _axis_weights(s, n, order):
    """Stencil start index and weights along one axis for fractional positions s."""
    k = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
    u = s - k
    if order == 3:
        cubic = (k >= 1) & (k + 2 <= n - 1)
        w = np.zeros((s.size, 4))
        start = np.where(cubic, k - 1, k)
        w[:, 0] = np.where(cubic, -u * (u - 1) * (u - 2) / 6.0, 1.0 - u)
        w[:, 1] = np.where(cubic, (u + 1) * (u - 1) * (u - 2) / 2.0, u)
        w[:, 2] = np.where(cubic, -(u + 1) * u * (u - 2) / 2.0, 0.0)
        w[:, 3] = np.where(cubic, (u + 1) * u * (u - 1) / 6.0, 0.0)
        return start, w
    w = np.stack([1.0 - u, u], axis=1)
    return k, w


def interp_rows(table, rows, x, node0, h, shape, order=1, clamp=False):
    """Interpolate rows of a table of node values at arbitrary points.

    Parameters
    ----------
    table : (R, prod(shape)) array of values at the grid nodes (C order).
    rows : (N,) row selector per point.
    x : (N, d) points.
    node0, h : first node coordinate and spacing per axis.
    order : 1 for (multi)linear, 3 for cubic Lagrange on the interior with
        linear stencils next to the edges.
    clamp : clamp points to the node range instead of returning NaN.
    """
    x = np.asarray(x, dtype=float).reshape(len(rows), -1)
    d = x.shape[1]
    shape = tuple(int(n) for n in shape)
    s = (x - np.asarray(node0)) / np.asarray(h)
    upper = np.array(shape) - 1
    outside = np.any((s < 0) | (s > upper), axis=1)
    s = np.clip(s, 0, upper)
    starts, weights = [], []
    for a in range(d):
        st, w = _axis_weights(s[:, a], shape[a], order)
        starts.append(st)
        weights.append(w)
    out = np.zeros(len(rows))
    strides = np.array([int(np.prod(shape[a + 1:])) for a in range(d)])
    for offsets in itertools.product(*[range(w.shape[1]) for w in weights]):
        idx = np.zeros(len(rows), dtype=np.int64)
        wt = np.ones(len(rows))
        for a, o in enumerate(offsets):
            wa = weights[a][:, o]
            wt = wt * wa
            idx = idx + np.minimum(starts[a] + o, shape[a] - 1) * strides[a]
        out += wt * table[rows, idx]
    if not clamp:
        out[outside] = np.nan
    return out


def bin_points(x, regime, lower, h, shape, n_regimes):
    """Histogram points into grid cells per regime.

    Returns (counts of shape (n_regimes, prod(shape)), number of points outside the grid).
    """
    x = np.asarray(x, dtype=float).reshape(len(regime), -1)
    idx = np.floor((x - np.asarray(lower)) / np.asarray(h)).astype(np.int64)
    shape_arr = np.array(shape)
    inside = np.all((idx >= 0) & (idx < shape_arr), axis=1)
    flat = np.ravel_multi_index(tuple(idx[inside].T), tuple(shape))
    size = int(np.prod(shape))
    code = np.asarray(regime)[inside].astype(np.int64) * size + flat
    counts = np.bincount(code, minlength=n_regimes * size).reshape(n_regimes, size)
    return counts, int((~inside).sum())
