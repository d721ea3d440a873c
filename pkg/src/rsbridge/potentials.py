"""Time-dependent Schrodinger potentials and what is built from them.

``phi`` is propagated backward from its terminal value g and ``phihat``
forward from the measure f R_0:

    phi(t, x, i)    = sum_j int g(y, j) p_ij(t, x, T, y) dy
    phihat(s, y, j) = sum_i int f(x, i) p_ij(0, x, s, y) R_0(dx, i)

Their product is the bridge marginal.  The tilted kernel, the optimal
control triple and the tilted coefficients are ratios and log-gradients of
phi, so they are invariant under rescaling phi.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from . import _core
from .errors import ConfigError, DomainError, NumericError
from .grid import Grid, Marginal
from .kernel import Kernel, compose, kernel_analytic
from .model import ModelSpec, RegimeSet
from .simulate import GridControls

IDENTITY_TOL = 1e-10


@dataclass
class PotentialField:
    """Values on time slices x regimes x grid nodes, shape (M, S, n).

    For ``kind == "phihat"`` the first slice holds the start measure as a
    density (mass / node weight); a point mass is therefore a single
    spike of height 1/w.
    """

    grid: Grid
    regimes: RegimeSet
    times: NDArray
    values: NDArray
    kind: str
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(self.times.size, self.regimes.count, self.grid.size)
        if self.kind not in ("phi", "phihat"):
            raise ConfigError(f"unknown potential kind {self.kind!r}")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("slice times must increase")

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigError(f"no slice at t={t}")
        return k

    def slice(self, t: float) -> NDArray:
        return self.values[self.index(t)]

    def at(self, t: float) -> NDArray:
        """Values at any t in range, interpolated linearly in log between slices
        (linearly where a value vanishes)."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise ConfigError(f"t={t} outside the slice range")
        m = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
        lam = float(np.clip((t - self.times[m]) / (self.times[m + 1] - self.times[m]), 0.0, 1.0))
        a, b = self.values[m], self.values[m + 1]
        if lam == 0.0:
            return a.copy()
        if lam == 1.0:
            return b.copy()
        pos = (a > 0) & (b > 0)
        with np.errstate(divide="ignore"):
            logmix = np.exp((1 - lam) * np.log(np.where(pos, a, 1.0)) + lam * np.log(np.where(pos, b, 1.0)))
        return np.where(pos, logmix, (1 - lam) * a + lam * b)

    def scaled(self, c: float) -> "PotentialField":
        return PotentialField(self.grid, self.regimes, self.times, self.values * c, self.kind, dict(self.meta))


def uniform_slices(T: float, count: int = 32) -> NDArray:
    if count < 2:
        raise ConfigError("at least two slices are needed")
    return np.linspace(0.0, T, count + 1)


def kernels_to_horizon(model: ModelSpec, grid: Grid, times: Sequence[float], quadrature: str = "point") -> list[Kernel]:
    """Analytic kernels K(t_m, T) for every slice before the last."""
    T = float(times[-1])
    return [kernel_analytic(model, grid, float(t), T, quadrature) for t in times[:-1]]


def kernels_from_start(model: ModelSpec, grid: Grid, times: Sequence[float], quadrature: str = "point") -> list[Kernel]:
    """Analytic kernels K(0, t_m) for every slice after the first."""
    t0 = float(times[0])
    return [kernel_analytic(model, grid, t0, float(t), quadrature) for t in times[1:]]


def _weights(grid: Grid, S: int) -> NDArray:
    return np.tile(grid.weights, S)


def propagate_phi(g: NDArray, kernels: Sequence[Kernel], grid: Grid | None = None) -> PotentialField:
    """Backward propagation of the terminal field g (shape (S, n)).

    ``kernels`` either all end at T (one hop per slice) or chain
    consecutively t_0 -> t_1 -> ... -> T (applied recursively).
    """
    if not kernels:
        raise ConfigError("at least one kernel is required")
    grid = grid or kernels[0].grid
    S = kernels[0].n_regimes
    g = np.asarray(g, dtype=float).reshape(S, grid.size)
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ConfigError("terminal potential must be finite and nonnegative")
    w = _weights(grid, S)
    T = kernels[-1].s
    chained = len(kernels) > 1 and all(np.isclose(a.s, b.t) for a, b in zip(kernels[:-1], kernels[1:]))
    if chained:
        vals = [g.reshape(-1)]
        for K in reversed(kernels):
            vals.append(K.matrix @ (vals[-1] * w))
        vals = vals[::-1]
        times = [K.t for K in kernels] + [T]
    else:
        if any(not np.isclose(K.s, T) for K in kernels):
            raise ConfigError("kernels must all end at the horizon or chain consecutively")
        order = np.argsort([K.t for K in kernels])
        vals = [kernels[k].matrix @ (g.reshape(-1) * w) for k in order] + [g.reshape(-1)]
        times = [kernels[k].t for k in order] + [T]
    return PotentialField(grid, kernels[0].regimes, np.array(times), np.array(vals), "phi")


def propagate_phihat(f: NDArray, R0: Marginal, kernels: Sequence[Kernel]) -> PotentialField:
    """Forward propagation of the measure f R_0.

    ``kernels`` either all start at 0 or chain consecutively from 0.
    """
    if not kernels:
        raise ConfigError("at least one kernel is required")
    grid = R0.grid
    S = R0.regimes.count
    f = np.broadcast_to(np.asarray(f, dtype=float), (S, grid.size))
    start_mass = (f * R0.mass).reshape(-1)
    w = _weights(grid, S)
    t0 = kernels[0].t
    chained = len(kernels) > 1 and all(np.isclose(a.s, b.t) for a, b in zip(kernels[:-1], kernels[1:]))
    if chained:
        vals = [start_mass / w]
        for K in kernels:
            vals.append((vals[-1] * w) @ K.matrix)
        times = [t0] + [K.s for K in kernels]
    else:
        if any(not np.isclose(K.t, t0) for K in kernels):
            raise ConfigError("kernels must all start at the same time or chain consecutively")
        order = np.argsort([K.s for K in kernels])
        vals = [start_mass / w] + [start_mass @ kernels[k].matrix for k in order]
        times = [t0] + [kernels[k].s for k in order]
    return PotentialField(grid, R0.regimes, np.array(times), np.array(vals), "phihat")


def bridge_kernel(phi: PotentialField, K: Kernel) -> Kernel:
    """Tilted kernel phi(s, y, j) / phi(t, x, i) p_ij(t, x, s, y); zero rows where phi(t, x, i) = 0."""
    a = phi.slice(K.t).reshape(-1)
    b = phi.slice(K.s).reshape(-1)
    inv = np.divide(1.0, a, out=np.zeros_like(a), where=a > 0)
    vals = inv[:, None] * K.matrix * b[None, :]
    return Kernel(K.grid, K.regimes, K.t, K.s, vals, {"kind": "bridge", "base": K.provenance.get("kind")})


def bridge_marginal(phi: PotentialField, phihat: PotentialField, t: float) -> Marginal:
    """Bridge marginal phi phihat at slice t, as masses."""
    a = phi.slice(t)
    b = phihat.slice(t)
    return Marginal(phi.grid, phi.regimes, a * b * phi.grid.weights)


def marginal_flow(phi: PotentialField, phihat: PotentialField) -> NDArray:
    """Total bridge mass at every common slice."""
    return np.array([bridge_marginal(phi, phihat, t).total for t in phi.times if np.any(np.isclose(phihat.times, t))])


# ---------------------------------------------------------------- gradients


def gradient(values: NDArray, grid: Grid) -> NDArray:
    """Second-order central differences (one-sided at edges); returns (..., n, d)."""
    shape = values.shape[:-1] + grid.shape
    v = values.reshape(shape)
    lead = len(values.shape) - 1
    comps = []
    for a in range(grid.d):
        comps.append(np.gradient(v, grid.h[a], axis=lead + a, edge_order=2).reshape(values.shape))
    return np.stack(comps, axis=-1)


def log_gradient(values: NDArray, grid: Grid) -> NDArray:
    """grad log phi = grad phi / phi; NaN where phi = 0."""
    g = gradient(values, grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(values[..., None] > 0, g / values[..., None], np.nan)


def displaced_values(values: NDArray, grid: Grid, points: NDArray, order: int = 3) -> NDArray:
    """Interpolate a (n,) node field at points (m, d); NaN off the node range."""
    rows = np.zeros(points.shape[0], dtype=np.intp)
    return _core.interp_rows(values[None, :], rows, points, grid.lower + 0.5 * grid.h, grid.h, grid.shape, order=order)


# ---------------------------------------------------------------- controls


@dataclass
class BridgeCoefficients:
    """Tilted coefficients on slices x regimes x nodes.

    drift (M, S, n, d); jump_multiplier (M, S, n, A) = phi(x + gamma) / phi(x);
    switch_multiplier (M, S, n, S) = phi(psi_ij(x), j) / phi(x, i);
    valid marks phi > 0.
    """

    times: NDArray
    drift: NDArray
    jump_multiplier: NDArray
    switch_multiplier: NDArray
    valid: NDArray
    identity_error: float = 0.0


def _tilt_parts(phi: PotentialField, model: ModelSpec, m: int, i: int, order: int):
    """Pieces shared by the optimal controls and the tilted coefficients at slice m, regime i.

    Displaced points off the grid see a zero potential.
    """
    grid = phi.grid
    t = float(phi.times[m])
    x = grid.nodes
    vals = phi.values[m, i]
    pos = vals > 0
    safe = np.where(pos, vals, 1.0)
    glog = log_gradient(phi.values[m, i][None], grid)[0]
    glog = np.where(pos[:, None], glog, 0.0)
    sig = model.diffusion_at(t, x, i)
    A, S = model.jumps.count, model.n_regimes
    ratio_jump = np.ones((grid.size, A))
    for a in range(A):
        y = x + model.jump_at(t, x, i, a)
        pv = displaced_values(vals, grid, y, order)
        ratio_jump[:, a] = np.where(pos, np.nan_to_num(pv) / safe, 1.0)
    ratio_switch = np.ones((grid.size, S))
    for j in range(S):
        if j == i:
            continue
        if model.identity_hybrid or (i, j) not in model.hybrid_maps:
            pv = phi.values[m, j].copy()
        else:
            pv = displaced_values(phi.values[m, j], grid, model.hybrid_at(t, x, i, j), order)
        ratio_switch[:, j] = np.where(pos, np.nan_to_num(pv) / safe, 1.0)
    return t, x, pos, glog, sig, ratio_jump, ratio_switch


def optimal_controls(
    phi: PotentialField,
    model: ModelSpec,
    *,
    include_terminal: bool | None = None,
    order: int = 3,
) -> GridControls:
    """Optimal triple u = -sigma^T grad log phi, theta = 1 - phi(x + gamma)/phi(x),
    xi_ij = phi(psi_ij(x), j)/phi(x, i), interpolated on the grid.

    The terminal slice is used only when phi(T) is positive everywhere
    (otherwise controls after the last interior slice are frozen).
    """
    M = phi.times.size
    if include_terminal is None:
        include_terminal = bool(np.all(phi.values[-1] > 0))
    use = M if include_terminal else M - 1
    S, n, d, A = model.n_regimes, phi.grid.size, model.d, model.jumps.count
    if model.d != phi.grid.d or S != phi.regimes.count:
        raise ConfigError("potential and model do not match")
    u = np.zeros((use, S, n, d))
    theta = np.zeros((use, S, n, A))
    xi = np.ones((use, S, n, S))
    valid = np.zeros((use, S, n), dtype=bool)
    for m in range(use):
        for i in range(S):
            t, x, pos, glog, sig, rj, rs = _tilt_parts(phi, model, m, i, order)
            u[m, i] = -np.einsum("nba,nb->na", sig, glog)
            theta[m, i] = 1.0 - rj
            xi[m, i] = rs
            valid[m, i] = pos
    interior = valid[1:use - 1] if use > 2 else valid
    if not np.any(interior):
        raise DomainError("potential vanishes at every interior node")
    return GridControls(phi.grid, phi.times[:use], u, theta, xi, valid)


def bridge_coefficients(phi: PotentialField, model: ModelSpec, *, order: int = 3, check: bool = True) -> BridgeCoefficients:
    """Tilted drift, jump and switch multipliers.

    The drift is assembled as b + sigma sigma^T grad log phi plus, with
    small-jump compensation, the sum over small atoms of
    (phi(x + gamma)/phi(x) - 1) gamma w; it is checked against
    b - sigma u - sum theta gamma w from the optimal triple.
    """
    M = phi.times.size
    S, n, d, A = model.n_regimes, phi.grid.size, model.d, model.jumps.count
    drift = np.zeros((M, S, n, d))
    jm = np.ones((M, S, n, A))
    sm = np.ones((M, S, n, S))
    valid = np.zeros((M, S, n), dtype=bool)
    err = 0.0
    small = model.jumps.small if model.jumps.compensate_small else np.zeros(A, dtype=bool)
    for m in range(M):
        for i in range(S):
            t, x, pos, glog, sig, rj, rs = _tilt_parts(phi, model, m, i, order)
            b = model.drift_at(t, x, i)
            cov = np.einsum("nab,ncb->nac", sig, sig)
            tilted = b + np.einsum("nab,nb->na", cov, glog)
            from_controls = b - np.einsum("nab,nb->na", sig, -np.einsum("nba,nb->na", sig, glog))
            for a in np.flatnonzero(small):
                gam = model.jump_at(t, x, i, int(a))
                w = model.jumps.weights[a]
                tilted += (rj[:, a] - 1.0)[:, None] * gam * w
                from_controls -= (1.0 - rj[:, a])[:, None] * gam * w
            drift[m, i] = np.where(pos[:, None], tilted, np.nan)
            jm[m, i] = rj
            sm[m, i] = rs
            valid[m, i] = pos
            if np.any(pos):
                scale = max(1.0, float(np.abs(tilted[pos]).max()))
                err = max(err, float(np.abs(tilted[pos] - from_controls[pos]).max()) / scale)
    if check and err > IDENTITY_TOL:
        raise NumericError(f"tilted drift disagrees with the optimal controls by {err:.3e}")
    return BridgeCoefficients(phi.times, drift, jm, sm, valid, err)


def constant_potential(grid: Grid, regimes: RegimeSet, times: Sequence[float], value: float = 1.0) -> PotentialField:
    times = np.asarray(times, dtype=float)
    return PotentialField(grid, regimes, times, np.full((times.size, regimes.count, grid.size), value), "phi")


def potential_from_function(
    grid: Grid, regimes: RegimeSet, times: Sequence[float], fn: Callable[[float, NDArray, int], NDArray], kind: str = "phi"
) -> PotentialField:
    """Sample fn(t, nodes, i) on slices; useful for closed-form potentials."""
    times = np.asarray(times, dtype=float)
    vals = np.array([[fn(float(t), grid.nodes, i) for i in range(regimes.count)] for t in times])
    return PotentialField(grid, regimes, times, vals, kind)


# ---------------------------------------------------------------- full solve


@dataclass
class BridgeSolution:
    """Static solution plus propagated potentials on uniform slices."""

    model: ModelSpec
    grid: Grid
    rho0: Marginal
    rhoT: Marginal
    boundary: Any
    report: Any
    phi: PotentialField
    phihat: PotentialField
    endpoint: Kernel

    def marginal(self, t: float) -> Marginal:
        return bridge_marginal(self.phi, self.phihat, t)

    def controls(self, **kw) -> GridControls:
        return optimal_controls(self.phi, self.model, **kw)


def solve_bridge(
    model: ModelSpec,
    grid: Grid,
    rho0: Marginal,
    rhoT: Marginal,
    *,
    slices: int = 32,
    quadrature: str = "point",
    tol: float = 1e-10,
    max_iters: int = 10_000,
    kernel: Callable[[float, float], Kernel] | None = None,
) -> BridgeSolution:
    """Solve the static system on K(0, T) and propagate both potentials.

    ``kernel(t, s)`` builds the transition kernel; by default the analytic
    constructor with the given quadrature.
    """
    from .sinkhorn import solve_static

    build = kernel or (lambda t, s: kernel_analytic(model, grid, t, s, quadrature))
    times = uniform_slices(model.horizon, slices)
    K = build(0.0, model.horizon)
    boundary, report = solve_static(K, rho0, rhoT, tol=tol, max_iters=max_iters)
    phi = propagate_phi(boundary.phiT, [K] + [build(float(t), model.horizon) for t in times[1:-1]])
    start = Marginal(grid, rho0.regimes, boundary.phihat0)
    phihat = propagate_phihat(1.0, start, [build(0.0, float(t)) for t in times[1:-1]] + [K])
    return BridgeSolution(model, grid, rho0, rhoT, boundary, report, phi, phihat, K)
