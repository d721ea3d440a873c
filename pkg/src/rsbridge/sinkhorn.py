"""Multi-regime Fortet-Sinkhorn iteration for the static Schrodinger system.

Fields are arrays of shape (S, n) over (regime, node); only entries on the
relevant support are read, and outputs vanish off it.  Marginals carry
masses, so with K the kernel density and rho_T(y) w_y = b_y,

    E_rhoT(f)(x) = sum_y K(x, y) b_y f(y)
    E_rho0(f)(y) = sum_x K(x, y) a_x f(x)

and the normalized iteration is f <- C(f) / ||C(f)|| with
C = E_rho0 o D o E_rhoT o D, D(f) = 1/f, ||f||^2 = sum_y f(y)^2 w_y.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from . import _core
from .errors import ConfigError, DomainError, NumericError
from .grid import Axis, Grid, Marginal
from .kernel import Kernel
from .model import RegimeSet

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 10_000


@dataclass
class EndpointKernel:
    """Kernel values restricted to supp(rho0) x supp(rhoT).

    ``rows`` and ``cols`` are flat (regime * n + node) indices.
    """

    kernel: Kernel
    rows: NDArray
    cols: NDArray
    values: NDArray

    @property
    def valid(self) -> bool:
        return bool(np.all(self.values > 0) and np.all(np.isfinite(self.values)))

    def nonpositive(self) -> list[tuple[int, int]]:
        r, c = np.nonzero(~(self.values > 0))
        return list(zip(self.rows[r].tolist(), self.cols[c].tolist()))


def endpoint_kernel(K: Kernel, rho0: Marginal, rhoT: Marginal) -> EndpointKernel:
    for m in (rho0, rhoT):
        if m.grid != K.grid or m.regimes.count != K.n_regimes:
            raise ConfigError("marginal and kernel grids or regimes differ")
    rows = np.flatnonzero(rho0.mass.reshape(-1) > 0)
    cols = np.flatnonzero(rhoT.mass.reshape(-1) > 0)
    if rows.size == 0 or cols.size == 0:
        raise ConfigError("marginals must have nonempty support")
    return EndpointKernel(K, rows, cols, K.matrix[np.ix_(rows, cols)])


def _ensure_endpoint(K, rho0, rhoT) -> EndpointKernel:
    return K if isinstance(K, EndpointKernel) else endpoint_kernel(K, rho0, rhoT)


def _scatter(values: NDArray, idx: NDArray, shape) -> NDArray:
    out = np.zeros(int(np.prod(shape)))
    out[idx] = values
    return out.reshape(shape)


def map_D(f: NDArray) -> NDArray:
    """Pointwise reciprocal of a positive field."""
    f = np.asarray(f, dtype=float)
    if np.any(~(f > 0)):
        raise DomainError("reciprocal map needs a strictly positive field")
    return 1.0 / f


def map_E_rhoT(f: NDArray, K, rhoT: Marginal, rho0: Marginal | None = None) -> NDArray:
    """x -> sum_j int p_ij(0, x, T, y) rhoT(y, j) f(y, j) dy on supp(rho0).

    With a plain Kernel and no rho0 the map is evaluated at every start node.
    """
    f = np.asarray(f, dtype=float)
    if isinstance(K, EndpointKernel):
        rows, cols, vals, shape = K.rows, K.cols, K.values, K.kernel.values.shape[:2]
    else:
        shape = K.values.shape[:2]
        if f.shape != shape:
            raise ConfigError(f"field shape {f.shape} does not match {shape}")
        cols = np.flatnonzero(rhoT.mass.reshape(-1) > 0)
        rows = np.flatnonzero(rho0.mass.reshape(-1) > 0) if rho0 is not None else np.arange(np.prod(shape))
        vals = K.matrix[np.ix_(rows, cols)]
    if f.shape != tuple(shape):
        raise ConfigError(f"field shape {f.shape} does not match {tuple(shape)}")
    b = rhoT.mass.reshape(-1)[cols]
    return _scatter(vals @ (b * f.reshape(-1)[cols]), rows, shape)


def map_E_rho0(f: NDArray, K, rho0: Marginal, rhoT: Marginal | None = None) -> NDArray:
    """y -> sum_i int p_ij(0, x, T, y) rho0(x, i) f(x, i) dx on supp(rhoT)."""
    f = np.asarray(f, dtype=float)
    if isinstance(K, EndpointKernel):
        rows, cols, vals, shape = K.rows, K.cols, K.values, K.kernel.values.shape[:2]
    else:
        shape = K.values.shape[:2]
        rows = np.flatnonzero(rho0.mass.reshape(-1) > 0)
        cols = np.flatnonzero(rhoT.mass.reshape(-1) > 0) if rhoT is not None else np.arange(np.prod(shape))
        vals = K.matrix[np.ix_(rows, cols)]
    if f.shape != tuple(shape):
        raise ConfigError(f"field shape {f.shape} does not match {tuple(shape)}")
    a = rho0.mass.reshape(-1)[rows]
    return _scatter(vals.T @ (a * f.reshape(-1)[rows]), cols, shape)


def combined_norm(f: NDArray, grid: Grid, support: NDArray) -> float:
    """sqrt(sum_j ||f(., j)||^2 over the support), Lebesgue (quadrature) weights."""
    w = np.broadcast_to(grid.weights, f.shape)
    return float(np.sqrt(np.sum(np.where(support, f * f * w, 0.0))))


def map_C(f: NDArray, K, rho0: Marginal, rhoT: Marginal) -> NDArray:
    """Composite map E_rho0 o D o E_rhoT o D on supp(rhoT)."""
    ek = _ensure_endpoint(K, rho0, rhoT)
    shape = ek.kernel.values.shape[:2]
    fT = np.ones(shape)
    fT.reshape(-1)[ek.cols] = map_D(np.asarray(f).reshape(-1)[ek.cols])
    a = map_E_rhoT(fT, ek, rhoT)
    a0 = np.ones(shape)
    a0.reshape(-1)[ek.rows] = map_D(a.reshape(-1)[ek.rows])
    return map_E_rho0(a0, ek, rho0)


@dataclass
class ConvergenceReport:
    iterations: int
    residuals: NDArray
    status: str
    marginal_error0: float = float("nan")
    marginal_errorT: float = float("nan")
    fixed_point_residual: float = float("nan")
    backend: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict[str, Any]:
        return {
            "iterations": self.iterations,
            "status": self.status,
            "final_residual": float(self.residuals[-1]) if self.residuals.size else None,
            "marginal_error0": self.marginal_error0,
            "marginal_errorT": self.marginal_errorT,
            "fixed_point_residual": self.fixed_point_residual,
            "backend": self.backend,
        }


class SinkhornError(NumericError):
    def __init__(self, message: str, report: ConvergenceReport):
        super().__init__(message)
        self.report = report


@dataclass
class BoundaryPotentials:
    """Solution of the static system, arrays of shape (S, n).

    ``phi0``/``phiT`` are values of the potential at 0 and T, ``phihatT``
    the forward potential density at T and ``phihat0`` the measure
    f-hat R_0 as masses per node.  ``phihatT`` has unit combined norm.
    """

    grid: Grid
    regimes: RegimeSet
    phi0: NDArray
    phiT: NDArray
    phihat0: NDArray
    phihatT: NDArray
    flagged: bool = False
    meta: dict[str, Any] = field(default_factory=dict)

    def coupling(self, K: Kernel) -> NDArray:
        """Discrete bridge coupling pi[(i,x), (j,y)] as masses."""
        w = np.tile(self.grid.weights, self.regimes.count)
        return self.phihat0.reshape(-1)[:, None] * K.matrix * (self.phiT.reshape(-1) * w)[None, :]


def _marginal_errors(pot: BoundaryPotentials, ek: EndpointKernel, rho0: Marginal, rhoT: Marginal) -> tuple[float, float]:
    w = np.tile(pot.grid.weights, pot.regimes.count)
    pi = pot.phihat0.reshape(-1)[ek.rows, None] * ek.values * (pot.phiT.reshape(-1)[ek.cols] * w[ek.cols])[None, :]
    e0 = np.abs(pi.sum(axis=1) - rho0.mass.reshape(-1)[ek.rows]) / w[ek.rows]
    eT = np.abs(pi.sum(axis=0) - rhoT.mass.reshape(-1)[ek.cols]) / w[ek.cols]
    return float(e0.max()), float(eT.max())


def iterate_C(
    f0: NDArray | None,
    K,
    rho0: Marginal,
    rhoT: Marginal,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    *,
    backend: str | None = None,
    raise_invalid: bool = True,
) -> tuple[BoundaryPotentials | None, ConvergenceReport]:
    """Run the normalized iteration from f0 (default 1) and assemble the potentials.

    Equal total masses of rho0 and rhoT are required.  An endpoint kernel
    with a nonpositive entry on the supports is rejected.
    """
    if not tol > 0 or max_iters < 1:
        raise ConfigError("tol must be positive and max_iters at least 1")
    ek = _ensure_endpoint(K, rho0, rhoT)
    kern = ek.kernel
    grid, regimes = kern.grid, kern.regimes
    shape = kern.values.shape[:2]
    if not np.isclose(rho0.total, rhoT.total, rtol=1e-12, atol=0):
        raise ConfigError(f"marginal masses differ: {rho0.total} vs {rhoT.total}")
    if not ek.valid:
        report = ConvergenceReport(0, np.zeros(0), "invalid-kernel")
        if raise_invalid:
            bad = ek.nonpositive()[:5]
            raise SinkhornError(f"kernel is not positive on the supports, e.g. at {bad}", report)
        return None, report
    w = np.tile(grid.weights, regimes.count)
    a = rho0.mass.reshape(-1)[ek.rows]
    b = rhoT.mass.reshape(-1)[ek.cols]
    f = np.ones(ek.cols.size) if f0 is None else np.asarray(f0, dtype=float).reshape(-1)[ek.cols]
    if not np.all(f > 0) or not np.all(np.isfinite(f)):
        raise ConfigError("f0 must be bounded and strictly positive on supp(rhoT)")
    A = ek.values * b[None, :]
    B = ek.values * a[:, None]
    norm_w = w[ek.cols]
    backend = backend or _core.BACKEND
    f, iters, residuals, status = _core.sinkhorn_loop(A, B, norm_w, f, tol, max_iters, backend=backend)
    residuals = np.asarray(residuals)
    if status == 2:
        raise SinkhornError("iteration produced a nonpositive intermediate", ConvergenceReport(iters, residuals, "invalid-kernel", backend=backend))
    phihatT = f
    phiT = (b / norm_w) / f
    phi0 = A @ (1.0 / f)
    phihat0 = a / phi0
    pot = BoundaryPotentials(
        grid,
        regimes,
        _scatter(phi0, ek.rows, shape),
        _scatter(phiT, ek.cols, shape),
        _scatter(phihat0, ek.rows, shape),
        _scatter(phihatT, ek.cols, shape),
        flagged=status != 0,
        meta={"t": kern.t, "s": kern.s},
    )
    g = B.T @ (1.0 / phi0)
    g /= np.sqrt(np.sum(g * g * norm_w))
    e0, eT = _marginal_errors(pot, ek, rho0, rhoT)
    report = ConvergenceReport(
        iters,
        residuals,
        "converged" if status == 0 else "max-iters",
        e0,
        eT,
        float(np.sqrt(np.sum((g - f) ** 2 * norm_w))),
        backend,
    )
    return pot, report


def solve_static(K: Kernel, rho0: Marginal, rhoT: Marginal, **kw) -> tuple[BoundaryPotentials, ConvergenceReport]:
    """iterate_C from f0 = 1; raises SinkhornError when the iteration does not converge."""
    pot, report = iterate_C(None, K, rho0, rhoT, **kw)
    if not report.converged:
        raise SinkhornError(f"no convergence after {report.iterations} iterations", report)
    return pot, report


# ---------------------------------------------------------------- embedding


@dataclass
class EmbeddedProblem:
    """Single-regime problem on a grid with one extra coordinate.

    Regime i occupies the unit interval [2i, 2i + 1] of the extra axis,
    split into ``cells`` sub-cells; cells between the intervals carry zero
    kernel and zero mass.
    """

    kernel: Kernel
    rho0: Marginal
    rhoT: Marginal
    n_regimes: int
    cells: int

    def regime_cells(self, i: int) -> NDArray:
        return np.arange(2 * i * self.cells, (2 * i + 1) * self.cells)

    def unflatten(self, field_ext: NDArray, *, mass: bool = False) -> NDArray:
        """Map an embedded field (1, n * c) back to (S, n).

        Values are read on the first sub-cell of each regime interval; masses
        are summed over the interval.
        """
        n = self.kernel.grid.size // self.extra_size
        arr = np.asarray(field_ext).reshape(n, self.extra_size)
        out = np.empty((self.n_regimes, n))
        for i in range(self.n_regimes):
            cells = self.regime_cells(i)
            out[i] = arr[:, cells].sum(axis=1) if mass else arr[:, cells[0]]
        return out

    @property
    def extra_size(self) -> int:
        return (2 * self.n_regimes - 1) * self.cells

    def unflatten_potentials(self, pot: BoundaryPotentials, grid: Grid, regimes: RegimeSet) -> BoundaryPotentials:
        return BoundaryPotentials(
            grid,
            regimes,
            self.unflatten(pot.phi0),
            self.unflatten(pot.phiT),
            self.unflatten(pot.phihat0, mass=True),
            self.unflatten(pot.phihatT),
            pot.flagged,
            dict(pot.meta, embedded=True),
        )


def embed_flatten(K: Kernel, rho0: Marginal, rhoT: Marginal, cells: int = 2) -> EmbeddedProblem:
    """Flatten a multi-regime problem into a single-regime one in one more dimension."""
    if cells < 1:
        raise ConfigError("cells must be positive")
    S, n = K.n_regimes, K.grid.size
    m = (2 * S - 1) * cells
    extra = Axis(0.0, float(2 * S - 1), m)
    grid = Grid(tuple(K.grid.axes) + (extra,))
    member = np.full(m, -1)
    for i in range(S):
        member[2 * i * cells : (2 * i + 1) * cells] = i
    # node (k, c) of the embedded grid has flat index k * m + c
    on = member >= 0
    reg = np.where(on, member, 0)
    vals = K.values[reg][:, :, reg]  # (m, n, m, n) indexed (c, k, c', l)
    vals = vals * (on[:, None, None, None] & on[None, None, :, None])
    vals = np.transpose(vals, (1, 0, 3, 2)).reshape(n * m, n * m)
    kern = Kernel(grid, RegimeSet.of_size(1), K.t, K.s, vals, {"kind": "embedded", "cells": cells})

    def embed(marg: Marginal) -> Marginal:
        mass = np.zeros((n, m))
        mass[:, on] = marg.mass[member[on]].T / cells
        return Marginal(grid, RegimeSet.of_size(1), mass.reshape(1, -1))

    return EmbeddedProblem(kern, embed(rho0), embed(rhoT), S, cells)
