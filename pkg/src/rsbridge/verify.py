"""Numerical checks of the generator identities.

Fields are arrays (S, n) of node values.  Derivatives use second-order
central differences (one-sided at the edges); displaced evaluations
f(x + gamma) and f(psi(x)) use cubic interpolation on the interior and
linear next to the edges.  Displaced points that leave the grid give NaN
and the node is excluded from residual maxima (and counted).

With central first differences (antisymmetric), the symmetric second
difference and grid-aligned jumps, the discrete L* below is the exact
adjoint of the discrete L for fields supported away from the edges.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

from .errors import ConfigError, DomainError, UnsupportedModelError
from .grid import Grid
from .model import ModelSpec
from .potentials import PotentialField, displaced_values

# ---------------------------------------------------------------- stencils


def d1(v: NDArray, h: float, axis: int) -> NDArray:
    return np.gradient(v, h, axis=axis, edge_order=2)


def d2(v: NDArray, h: float, axis: int) -> NDArray:
    v = np.moveaxis(v, axis, -1)
    out = np.empty_like(v)
    out[..., 1:-1] = v[..., 2:] - 2.0 * v[..., 1:-1] + v[..., :-2]
    if v.shape[-1] >= 4:
        out[..., 0] = 2 * v[..., 0] - 5 * v[..., 1] + 4 * v[..., 2] - v[..., 3]
        out[..., -1] = 2 * v[..., -1] - 5 * v[..., -2] + 4 * v[..., -3] - v[..., -4]
    else:
        out[..., 0] = out[..., 1]
        out[..., -1] = out[..., -2]
    return np.moveaxis(out / (h * h), -1, axis)


def _grad(f: NDArray, grid: Grid) -> NDArray:
    """f (n,) -> (n, d)."""
    v = f.reshape(grid.shape)
    return np.stack([d1(v, grid.h[a], a).reshape(-1) for a in range(grid.d)], axis=-1)


def _second(f: NDArray, grid: Grid, a: int, b: int) -> NDArray:
    v = f.reshape(grid.shape)
    if a == b:
        return d2(v, grid.h[a], a).reshape(-1)
    return d1(d1(v, grid.h[b], b), grid.h[a], a).reshape(-1)


def _interp(values: NDArray, grid: Grid, points: NDArray, outside: str) -> NDArray:
    out = displaced_values(values, grid, points, order=3)
    if outside == "zero":
        out = np.nan_to_num(out, nan=0.0)
    return out


# ---------------------------------------------------------------- coefficients


def _affine(fn: Callable[[NDArray], NDArray], d: int) -> tuple[NDArray, NDArray] | None:
    """Fit y = M x + c to a map and confirm it on random probes."""
    probes = np.vstack([np.zeros((1, d)), np.eye(d)])
    y = fn(probes)
    c = y[0]
    M = (y[1:] - c).T
    test = np.random.default_rng(12345).uniform(-3, 3, size=(5, d))
    ok = np.allclose(fn(test), test @ M.T + c, rtol=1e-10, atol=1e-10)
    return (M, c) if ok else None


@dataclass
class FrozenCoefficients:
    """Generator coefficients at one time on the grid nodes.

    jump_weight (S, n, A) is the (possibly state dependent) intensity of
    each atom, jump_shift (S, n, A, d) its amplitude, rates (S, n, S) the
    switching rates.  Maps are kept as affine (M, c) pairs where the
    adjoint needs their inverse (None when not affine).
    """

    grid: Grid
    drift: NDArray
    cov: NDArray
    jump_weight: NDArray
    jump_shift: NDArray
    small: NDArray
    rates: NDArray
    hybrid: dict[tuple[int, int], NDArray]
    jump_affine: list[list[tuple[NDArray, NDArray] | None]]
    hybrid_affine: dict[tuple[int, int], tuple[NDArray, NDArray] | None]

    @property
    def n_regimes(self) -> int:
        return self.drift.shape[0]


def frozen_coefficients(model: ModelSpec, grid: Grid, t: float) -> FrozenCoefficients:
    if model.d != grid.d:
        raise ConfigError("model and grid dimensions differ")
    S, n, d, A = model.n_regimes, grid.size, model.d, model.jumps.count
    x = grid.nodes
    drift = np.stack([model.drift_at(t, x, i) for i in range(S)])
    cov = np.stack([model.covariance_at(t, x, i) for i in range(S)])
    shift = np.zeros((S, n, A, d))
    jump_affine: list[list[Any]] = []
    for i in range(S):
        row = []
        for a in range(A):
            shift[i, :, a] = model.jump_at(t, x, i, a)
            row.append(_affine(lambda p, i=i, a=a: p + model.jump_at(t, p, i, a), d))
        jump_affine.append(row)
    weight = np.broadcast_to(model.jumps.weights, (S, n, A)).copy()
    small = model.jumps.small & model.jumps.compensate_small
    rates = np.stack([model.rates_from(t, x, i) for i in range(S)])
    hybrid, hybrid_affine = {}, {}
    for (i, j) in model.hybrid_maps:
        hybrid[(i, j)] = model.hybrid_at(t, x, i, j)
        hybrid_affine[(i, j)] = _affine(lambda p, i=i, j=j: model.hybrid_at(t, p, i, j), d)
    return FrozenCoefficients(grid, drift, cov, weight, shift, np.asarray(small), rates, hybrid, jump_affine, hybrid_affine)


def tilted_coefficients(base: FrozenCoefficients, phi: NDArray) -> FrozenCoefficients:
    """Coefficients of the bridge generator from phi at the same time.

    drift + cov grad log phi (+ compensated small-jump correction), jump
    intensity times phi(x + gamma)/phi(x), switching rate times
    phi(psi_ij(x), j)/phi(x, i).  Nodes with phi = 0 get NaN.
    """
    grid = base.grid
    S, n = phi.shape
    x = grid.nodes
    drift = base.drift.copy()
    weight = base.jump_weight.copy()
    rates = base.rates.copy()
    for i in range(S):
        pos = phi[i] > 0
        safe = np.where(pos, phi[i], 1.0)
        glog = _grad(phi[i], grid) / safe[:, None]
        drift[i] += np.einsum("nab,nb->na", base.cov[i], glog)
        for a in range(weight.shape[2]):
            r = np.nan_to_num(displaced_values(phi[i], grid, x + base.jump_shift[i, :, a])) / safe
            if base.small[a]:
                drift[i] += ((r - 1.0) * base.jump_weight[i, :, a])[:, None] * base.jump_shift[i, :, a]
            weight[i, :, a] *= r
        for j in range(S):
            if j == i:
                continue
            target = base.hybrid.get((i, j))
            pj = phi[j] if target is None else np.nan_to_num(displaced_values(phi[j], grid, target))
            rates[i, :, j] *= pj / safe
        drift[i][~pos] = np.nan
        weight[i][~pos] = np.nan
        rates[i][~pos] = np.nan
    return FrozenCoefficients(grid, drift, base.cov, weight, base.jump_shift, base.small, rates, base.hybrid, base.jump_affine, base.hybrid_affine)


# ---------------------------------------------------------------- operators


def apply_L_frozen(f: NDArray, c: FrozenCoefficients, outside: str = "nan") -> NDArray:
    grid = c.grid
    S, n = c.drift.shape[:2]
    f = np.asarray(f, dtype=float).reshape(S, n)
    x = grid.nodes
    out = np.zeros((S, n))
    for i in range(S):
        g = _grad(f[i], grid)
        acc = np.einsum("na,na->n", c.drift[i], g)
        for a in range(grid.d):
            for b in range(grid.d):
                acc += 0.5 * c.cov[i, :, a, b] * _second(f[i], grid, a, b)
        for k in range(c.jump_weight.shape[2]):
            shifted = _interp(f[i], grid, x + c.jump_shift[i, :, k], outside)
            term = shifted - f[i]
            if c.small[k]:
                term -= np.einsum("na,na->n", c.jump_shift[i, :, k], g)
            acc += c.jump_weight[i, :, k] * term
        for j in range(S):
            if j == i:
                continue
            target = c.hybrid.get((i, j))
            fj = f[j] if target is None else _interp(f[j], grid, target, outside)
            acc += c.rates[i, :, j] * (fj - f[i])
        out[i] = acc
    return out


def apply_Lstar_frozen(g: NDArray, c: FrozenCoefficients, outside: str = "nan") -> NDArray:
    grid = c.grid
    S, n = c.drift.shape[:2]
    d = grid.d
    g = np.asarray(g, dtype=float).reshape(S, n)
    x = grid.nodes
    out = np.zeros((S, n))
    for i in range(S):
        acc = np.zeros(n)
        for a in range(d):
            acc -= _grad(c.drift[i, :, a] * g[i], grid)[:, a]
            for b in range(d):
                acc += 0.5 * _second(c.cov[i, :, a, b] * g[i], grid, a, b)
        for k in range(c.jump_weight.shape[2]):
            aff = c.jump_affine[i][k]
            if aff is None:
                raise UnsupportedModelError("the adjoint needs constant-shift or affine jump maps")
            M, m0 = aff
            det = abs(np.linalg.det(M))
            if det == 0:
                raise UnsupportedModelError("jump map is not invertible")
            pre = (x - m0) @ np.linalg.inv(M).T
            wg = c.jump_weight[i, :, k] * g[i]
            acc += _interp(wg, grid, pre, outside) / det - wg
            if c.small[k]:
                for a in range(d):
                    acc += _grad(c.jump_shift[i, :, k, a] * wg, grid)[:, a]
        for j in range(S):
            if j == i:
                continue
            qg = c.rates[j, :, i] * g[j]
            if (j, i) in c.hybrid:
                aff = c.hybrid_affine[(j, i)]
                if aff is None:
                    raise UnsupportedModelError("the adjoint needs affine hybrid maps")
                M, m0 = aff
                det = abs(np.linalg.det(M))
                if det == 0:
                    raise UnsupportedModelError("hybrid map is not invertible")
                pre = (x - m0) @ np.linalg.inv(M).T
                acc += _interp(qg, grid, pre, outside) / det
            else:
                acc += qg
            acc -= c.rates[i, :, j] * g[i]
        out[i] = acc
    return out


def apply_L(f: NDArray, model: ModelSpec, t: float, grid: Grid, outside: str = "nan") -> NDArray:
    """Reference generator applied to node values f (S, n) at time t."""
    return apply_L_frozen(f, frozen_coefficients(model, grid, t), outside)


def apply_Lstar(f: NDArray, model: ModelSpec, t: float, grid: Grid, outside: str = "nan") -> NDArray:
    """Adjoint generator applied to node values f (S, n) at time t."""
    return apply_Lstar_frozen(f, frozen_coefficients(model, grid, t), outside)


def pairing(f: NDArray, g: NDArray, grid: Grid) -> float:
    """<f, g> = sum_i int f g dx by the node quadrature."""
    return float(np.sum(np.asarray(f) * np.asarray(g) * grid.weights))


def adjoint_gap(f: NDArray, g: NDArray, model: ModelSpec, t: float, grid: Grid) -> tuple[float, float]:
    """(<Lf, g>, <f, L*g>) for fields that vanish near the grid edges."""
    c = frozen_coefficients(model, grid, t)
    lhs = pairing(apply_L_frozen(f, c, "zero"), g, grid)
    rhs = pairing(f, apply_Lstar_frozen(g, c, "zero"), grid)
    return lhs, rhs


def random_bump_field(grid: Grid, S: int, rng: np.random.Generator, margin: float = 0.25) -> NDArray:
    """Smooth compactly supported field: sum of C-infinity bumps inside the grid."""
    lo, hi = grid.lower, grid.upper
    width = hi - lo
    x = grid.nodes
    out = np.zeros((S, grid.size))
    for i in range(S):
        for _ in range(2):
            centre = lo + width * rng.uniform(margin + 0.1, 1 - margin - 0.1, size=grid.d)
            radius = width * rng.uniform(0.08, margin)
            r2 = np.sum(((x - centre) / radius) ** 2, axis=1)
            inside = r2 < 1
            bump = np.zeros(grid.size)
            bump[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
            out[i] += rng.uniform(0.5, 2.0) * bump
    return out


# ---------------------------------------------------------------- reports


@dataclass
class ResidualReport:
    identity: str
    params: dict[str, Any]
    max_residual: float
    l2_residual: float
    excluded: int
    ratio: float | None = None
    refined: "ResidualReport | None" = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "identity": self.identity,
            "params": self.params,
            "max_residual": self.max_residual,
            "l2_residual": self.l2_residual,
            "excluded": self.excluded,
            "ratio": self.ratio,
            "extra": self.extra,
        }
        if self.refined is not None:
            out["refined"] = self.refined.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps({"schema": 1, **self.to_dict()}, indent=2, default=float)


def _window_mask(grid: Grid, window) -> NDArray:
    x = grid.nodes
    if window is None:
        lo = grid.lower + 0.15 * (grid.upper - grid.lower)
        hi = grid.upper - 0.15 * (grid.upper - grid.lower)
    else:
        lo, hi = np.broadcast_to(window[0], (grid.d,)), np.broadcast_to(window[1], (grid.d,))
    return np.all((x >= lo) & (x <= hi), axis=1)


def _slice_range(times: NDArray, t_window) -> list[int]:
    T0, T1 = times[0], times[-1]
    lo, hi = (T0 + 0.25 * (T1 - T0), T0 + 0.75 * (T1 - T0)) if t_window is None else t_window
    ms = [m for m in range(1, times.size - 1) if lo - 1e-12 <= times[m] <= hi + 1e-12]
    if not ms:
        raise ConfigError("no interior slice inside the time window")
    return ms


def _collect(name: str, residuals: list[NDArray], mask: NDArray, regimes: Sequence[int] | None, params: dict) -> ResidualReport:
    vals = []
    excluded = 0
    for r in residuals:
        sel = r[list(regimes)] if regimes is not None else r
        sel = sel[:, mask]
        bad = ~np.isfinite(sel)
        excluded += int(bad.sum())
        vals.append(np.abs(sel[~bad]))
    allv = np.concatenate(vals) if vals else np.zeros(0)
    if allv.size == 0:
        raise ConfigError("no nodes left to measure the residual")
    return ResidualReport(name, params, float(allv.max()), float(np.sqrt(np.mean(allv**2))), excluded)


def _with_refined(report: ResidualReport, refined: ResidualReport | None) -> ResidualReport:
    if refined is not None:
        report.refined = refined
        report.ratio = report.max_residual / refined.max_residual if refined.max_residual > 0 else float("inf")
    return report


def _params(field_: PotentialField) -> dict[str, Any]:
    return {"h": field_.grid.h.tolist(), "dt": float(field_.times[1] - field_.times[0]), "slices": int(field_.times.size)}


def _require_slices(field_: PotentialField) -> None:
    if field_.times.size < 3:
        raise ConfigError("at least three slices are needed for time derivatives")


def _dt(field_: PotentialField, m: int) -> NDArray:
    t = field_.times
    return (field_.values[m + 1] - field_.values[m - 1]) / (t[m + 1] - t[m - 1])


def check_backward(
    phi: PotentialField,
    model: ModelSpec,
    *,
    refined: PotentialField | None = None,
    window=None,
    t_window=None,
    regimes: Sequence[int] | None = None,
) -> ResidualReport:
    """Residual of the backward equation d phi/dt + L phi = 0 on interior slices and nodes."""
    _require_slices(phi)
    mask = _window_mask(phi.grid, window)
    res = []
    for m in _slice_range(phi.times, t_window):
        res.append(_dt(phi, m) + apply_L(phi.values[m], model, float(phi.times[m]), phi.grid))
    rep = _collect("backward", res, mask, regimes, _params(phi))
    fine = check_backward(refined, model, window=window, t_window=t_window, regimes=regimes) if refined is not None else None
    return _with_refined(rep, fine)


def check_forward(
    phihat: PotentialField,
    model: ModelSpec,
    *,
    refined: PotentialField | None = None,
    window=None,
    t_window=None,
    regimes: Sequence[int] | None = None,
) -> ResidualReport:
    """Residual of the forward equation -d phihat/ds + L* phihat = 0."""
    _require_slices(phihat)
    mask = _window_mask(phihat.grid, window)
    res = []
    for m in _slice_range(phihat.times, t_window):
        res.append(-_dt(phihat, m) + apply_Lstar(phihat.values[m], model, float(phihat.times[m]), phihat.grid))
    rep = _collect("forward", res, mask, regimes, _params(phihat))
    fine = check_forward(refined, model, window=window, t_window=t_window, regimes=regimes) if refined is not None else None
    return _with_refined(rep, fine)


def _log_terms(phi_m: NDArray, model: ModelSpec, t: float, grid: Grid):
    """Pieces of the log-potential identity at one slice."""
    c = frozen_coefficients(model, grid, t)
    S, n = phi_m.shape
    x = grid.nodes
    if np.any(phi_m <= 0):
        raise DomainError("log identities need a positive potential")
    logphi = np.log(phi_m)
    quad = np.zeros((S, n))
    jump = np.zeros((S, n))
    switch = np.zeros((S, n))
    for i in range(S):
        g = _grad(logphi[i], grid)
        sg = np.einsum("nab,na->nb", model.diffusion_at(t, x, i), g)
        quad[i] = 0.5 * np.sum(sg * sg, axis=1)
        for k in range(c.jump_weight.shape[2]):
            r = displaced_values(phi_m[i], grid, x + c.jump_shift[i, :, k]) / phi_m[i]
            jump[i] += c.jump_weight[i, :, k] * (np.log(r) - (r - 1.0))
        for j in range(S):
            if j == i:
                continue
            target = c.hybrid.get((i, j))
            pj = phi_m[j] if target is None else displaced_values(phi_m[j], grid, target)
            rho = pj / phi_m[i]
            with np.errstate(divide="ignore"):
                switch[i] += np.where(c.rates[i, :, j] > 0, c.rates[i, :, j] * (np.log(rho) - (rho - 1.0)), 0.0)
    return c, logphi, quad, jump, switch


def check_log_identity(
    phi: PotentialField,
    model: ModelSpec,
    *,
    refined: PotentialField | None = None,
    window=None,
    t_window=None,
) -> ResidualReport:
    """Residual of (d/dt + L) log phi = -|sigma^T grad log phi|^2/2 + jump and switch log terms."""
    _require_slices(phi)
    mask = _window_mask(phi.grid, window)
    res = []
    for m in _slice_range(phi.times, t_window):
        t = float(phi.times[m])
        c, logphi, quad, jump, switch = _log_terms(phi.values[m], model, t, phi.grid)
        dlog = (np.log(phi.values[m + 1]) - np.log(phi.values[m - 1])) / (phi.times[m + 1] - phi.times[m - 1])
        res.append(dlog + apply_L_frozen(logphi, c) - (-quad + jump + switch))
    rep = _collect("log-potential", res, mask, None, _params(phi))
    fine = check_log_identity(refined, model, window=window, t_window=t_window) if refined is not None else None
    return _with_refined(rep, fine)


def hjb_residual(
    phi: PotentialField,
    model: ModelSpec,
    *,
    nodes: int = 50,
    seed: int = 0,
    window=None,
    t_window=None,
) -> ResidualReport:
    """Minimized Hamiltonian of the value function J = -log phi at random interior nodes.

    The infimum is evaluated at the closed-form minimizers
    u = sigma^T grad J, 1 - theta = exp(J - J(x + gamma)),
    xi = exp(J - J(psi, j)).
    """
    _require_slices(phi)
    grid = phi.grid
    mask = np.flatnonzero(_window_mask(grid, window))
    ms = _slice_range(phi.times, t_window)
    rng = np.random.default_rng(seed)
    pick_m = rng.choice(ms, size=nodes)
    pick_i = rng.integers(0, model.n_regimes, size=nodes)
    pick_k = rng.choice(mask, size=nodes)
    x = grid.nodes
    out = np.empty(nodes)
    cache: dict[int, tuple] = {}
    for q, (m, i, k) in enumerate(zip(pick_m, pick_i, pick_k)):
        if m not in cache:
            t = float(phi.times[m])
            c = frozen_coefficients(model, grid, t)
            J = -np.log(phi.values[m])
            dJ = -(np.log(phi.values[m + 1]) - np.log(phi.values[m - 1])) / (phi.times[m + 1] - phi.times[m - 1])
            cache[m] = (t, c, J, dJ + apply_L_frozen(J, c))
        t, c, J, base = cache[m]
        gJ = _grad(J[i], grid)[k]
        sig = model.diffusion_at(t, x[k : k + 1], i)[0]
        u = sig.T @ gJ
        h = base[i, k] - (sig @ u) @ gJ + 0.5 * u @ u
        for a in range(c.jump_weight.shape[2]):
            Jx = float(displaced_values(J[i], grid, x[k : k + 1] + c.jump_shift[i, k : k + 1, a])[0])
            dj = Jx - J[i, k]
            theta = 1.0 - np.exp(-dj)
            h += c.jump_weight[i, k, a] * (-theta * dj + (1 - theta) * np.log1p(-theta) + theta)
        for j in range(model.n_regimes):
            if j == i or c.rates[i, k, j] == 0:
                continue
            target = c.hybrid.get((i, j))
            Jj = J[j, k] if target is None else float(displaced_values(J[j], grid, target[k : k + 1])[0])
            dj = Jj - J[i, k]
            xi = np.exp(-dj)
            h += c.rates[i, k, j] * ((xi - 1.0) * dj + xi * np.log(xi) + 1.0 - xi)
        out[q] = h
    bad = ~np.isfinite(out)
    vals = np.abs(out[~bad])
    return ResidualReport("hjb", _params(phi), float(vals.max()), float(np.sqrt(np.mean(vals**2))), int(bad.sum()))


# ---------------------------------------------------------------- bridge forward


class _Spline1D:
    """Cubic-spline representation of a node field per regime (d = 1)."""

    def __init__(self, values: NDArray, grid: Grid):
        if grid.d != 1:
            raise UnsupportedModelError("pointwise identity checks are implemented for d = 1")
        x = grid.nodes[:, 0]
        self.splines = [CubicSpline(x, v) for v in values]
        self.lo, self.hi = x[0], x[-1]

    def __call__(self, i: int, x: NDArray, nu: int = 0) -> NDArray:
        inside = (x >= self.lo) & (x <= self.hi)
        out = self.splines[i](np.clip(x, self.lo, self.hi), nu)
        return np.where(inside, out, np.nan)


def _bump_function(rng: np.random.Generator, lo: float, hi: float):
    """Random smooth f_i(x) = a + b exp(-(x - c)^2 / (2 s^2)) with exact derivatives."""
    a, b = rng.uniform(0.2, 1.0), rng.uniform(0.5, 2.0)
    c = rng.uniform(lo, hi)
    s = rng.uniform(0.3, 1.0) * (hi - lo) / 4

    def f(x, nu=0):
        e = np.exp(-((x - c) ** 2) / (2 * s * s))
        if nu == 0:
            return a + b * e
        if nu == 1:
            return -b * e * (x - c) / (s * s)
        return b * e * (((x - c) ** 2) / s**4 - 1.0 / (s * s))

    return f


def _pointwise_L(fs, model: ModelSpec, t: float, x: NDArray, i: int) -> NDArray:
    """Reference generator of callables fs[i](x, nu) at points x (1-D)."""
    X = x[:, None]
    b = model.drift_at(t, X, i)[:, 0]
    a = model.covariance_at(t, X, i)[:, 0, 0]
    out = b * fs[i](x, 1) + 0.5 * a * fs[i](x, 2)
    small = model.jumps.small & model.jumps.compensate_small
    for k in range(model.jumps.count):
        gam = model.jump_at(t, X, i, k)[:, 0]
        term = fs[i](x + gam) - fs[i](x)
        if small[k]:
            term -= gam * fs[i](x, 1)
        out += model.jumps.weights[k] * term
    for j in range(model.n_regimes):
        if j == i:
            continue
        q = model.rate_at(t, X, i, j)
        out += q * (fs[j](model.hybrid_at(t, X, i, j)[:, 0]) - fs[i](x))
    return out


def _pointwise_bridge_L(fs, phis, model: ModelSpec, t: float, x: NDArray, i: int) -> NDArray:
    """Bridge generator with tilted coefficients built from callables phis."""
    X = x[:, None]
    p = phis[i](x)
    b = model.drift_at(t, X, i)[:, 0]
    a = model.covariance_at(t, X, i)[:, 0, 0]
    drift = b + a * phis[i](x, 1) / p
    small = model.jumps.small & model.jumps.compensate_small
    out = 0.5 * a * fs[i](x, 2)
    for k in range(model.jumps.count):
        gam = model.jump_at(t, X, i, k)[:, 0]
        r = phis[i](x + gam) / p
        w = model.jumps.weights[k]
        term = fs[i](x + gam) - fs[i](x)
        if small[k]:
            drift += w * (r - 1.0) * gam
            term -= gam * fs[i](x, 1)
        out += w * r * term
    out += drift * fs[i](x, 1)
    for j in range(model.n_regimes):
        if j == i:
            continue
        y = model.hybrid_at(t, X, i, j)[:, 0]
        q = model.rate_at(t, X, i, j) * phis[j](y) / p
        out += q * (fs[j](y) - fs[i](x))
    return out


def h_transform_residual(
    phi_values: NDArray,
    grid: Grid,
    model: ModelSpec,
    t: float,
    *,
    trials: int = 10,
    points: int = 40,
    seed: int = 0,
    window=None,
) -> float:
    """Max relative gap between the bridge generator and the phi-conjugated generator.

    Checks L_bridge f = (L(phi f) - f L phi) / phi on random smooth f with
    phi represented by cubic splines of its node values (exact derivatives
    of the spline, so the identity holds up to rounding when the tilted
    coefficients are right).
    """
    phis_s = _Spline1D(phi_values, grid)
    S = phi_values.shape[0]
    mask = _window_mask(grid, window)
    xs = grid.nodes[mask, 0]
    lo, hi = xs.min(), xs.max()
    rng = np.random.default_rng(seed)
    worst = 0.0
    phis = [lambda x, nu=0, i=i: phis_s(i, x, nu) for i in range(S)]
    for _ in range(trials):
        fs = [_bump_function(rng, lo, hi) for _ in range(S)]
        prods = []
        for i in range(S):
            def pf(x, nu=0, i=i):
                f, p = fs[i], phis[i]
                if nu == 0:
                    return p(x) * f(x)
                if nu == 1:
                    return p(x, 1) * f(x) + p(x) * f(x, 1)
                return p(x, 2) * f(x) + 2 * p(x, 1) * f(x, 1) + p(x) * f(x, 2)
            prods.append(pf)
        x = rng.uniform(lo, hi, size=points)
        for i in range(S):
            p = phis[i](x)
            ok = p > 0
            lhs = _pointwise_bridge_L(fs, phis, model, t, x[ok], i)
            rhs = (_pointwise_L(prods, model, t, x[ok], i) - fs[i](x[ok]) * _pointwise_L(phis, model, t, x[ok], i)) / p[ok]
            fin = np.isfinite(lhs) & np.isfinite(rhs)
            if not np.any(fin):
                continue
            scale = max(1.0, float(np.abs(rhs[fin]).max()))
            worst = max(worst, float(np.abs(lhs[fin] - rhs[fin]).max()) / scale)
    return worst


def check_bridge_forward(
    phi: PotentialField,
    phihat: PotentialField,
    model: ModelSpec,
    *,
    refined: tuple[PotentialField, PotentialField] | None = None,
    window=None,
    t_window=None,
    regimes: Sequence[int] | None = None,
    identity_trials: int = 10,
    seed: int = 0,
) -> ResidualReport:
    """Residual of d/dt (phi phihat) = L*_bridge (phi phihat).

    The bridge adjoint is assembled from the tilted coefficients at each
    slice.  The h-transform generator identity is checked separately and
    stored in ``extra["h_transform"]``.
    """
    _require_slices(phi)
    if not np.allclose(phi.times, phihat.times):
        raise ConfigError("phi and phihat need the same slices")
    grid = phi.grid
    mask = _window_mask(grid, window)
    P = phi.values * phihat.values
    res = []
    ms = _slice_range(phi.times, t_window)
    for m in ms:
        t = float(phi.times[m])
        c = tilted_coefficients(frozen_coefficients(model, grid, t), phi.values[m])
        dP = (P[m + 1] - P[m - 1]) / (phi.times[m + 1] - phi.times[m - 1])
        res.append(dP - apply_Lstar_frozen(P[m], c))
    rep = _collect("bridge-forward", res, mask, regimes, _params(phi))
    if identity_trials and grid.d == 1:
        m = ms[len(ms) // 2]
        rep.extra["h_transform"] = h_transform_residual(
            phi.values[m], grid, model, float(phi.times[m]), trials=identity_trials, seed=seed, window=window
        )
    fine = None
    if refined is not None:
        fine = check_bridge_forward(refined[0], refined[1], model, window=window, t_window=t_window, regimes=regimes, identity_trials=0)
    return _with_refined(rep, fine)
