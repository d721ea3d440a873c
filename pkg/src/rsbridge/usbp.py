"""Bridges with killing: the two-regime (active, dead) special case.

A particle moves by a single-regime reference in the active regime and is
killed at the time-dependent rate V(t); the dead regime is absorbing and
frozen, keeping the particle where it was killed.  The target prescribes
both where survivors end up and where killed particles lie.

With a Dirac start at x0 and f-hat = 1 everything is explicit:

    p11(t, x, s, y) = q(t, x, s, y) = exp(-int_t^s V) q0(t, x, s, y)
    p12(t, x, s, y) = int_t^s V(r) q(t, x, r, y) dr
    g(y, a)  = rhoT(y, a) / q(0, x0, T, y)
    g(y, d)  = rhoT(y, d) / p12(0, x0, T, y)
    phi(t, x, a) = int q(t,x,T,y) g(y,a) dy + int p12(t,x,T,y) g(y,d) dy
    phi(t, x, d) = g(x, d)
    phihat(s, y, a) = q(0, x0, s, y),  phihat(s, y, d) = p12(0, x0, s, y)

The killing rate of the bridge is V(t) phi(t, x, d) / phi(t, x, a).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DomainError, ModelError, UnsupportedModelError
from .expr import CoefficientExpr, constant
from .grid import Grid, Marginal
from .kernel import (
    ConstantCoefficients,
    Kernel,
    _offset_table,
    constant_coefficients,
    identity_kernel,
    integrated_rate,
    kernel_mc,
)
from .model import ZERO, ModelSpec, RegimeSet, build_model
from .potentials import PotentialField, displaced_values, uniform_slices
from .quadrature import adaptive_simpson
from .simulate import ControlTriple, kl_running_cost

ACTIVE, DEAD = 0, 1
REGIMES = RegimeSet(("active", "dead"))
TIME_TOL = 1e-10


class TargetError(ConfigError):
    """The target charges nodes the reference cannot reach."""

    def __init__(self, message: str, nodes: list[tuple[int, int]]):
        super().__init__(message)
        self.nodes = nodes


@dataclass(frozen=True)
class KillingModel:
    """Single-regime reference killed at rate V(t), started from x0."""

    base: ModelSpec
    V: CoefficientExpr
    x0: NDArray

    def __post_init__(self):
        if self.base.n_regimes != 1:
            raise ConfigError("the killed reference must have a single regime")
        extra = self.V.variables - {"t"}
        if extra:
            raise UnsupportedModelError(f"killing rate may depend on t only, got {sorted(extra)}")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.base.d,):
            raise ConfigError("start point has the wrong dimension")
        object.__setattr__(self, "x0", x0)
        for t in np.linspace(0.0, self.horizon, 33):
            v = float(self.V.evaluate(t=t))
            if not np.isfinite(v) or v < 0:
                raise ModelError(f"killing rate {v} at t={t} is not a finite nonnegative number")

    @property
    def horizon(self) -> float:
        return self.base.horizon

    @property
    def d(self) -> int:
        return self.base.d

    def rate(self, t) -> NDArray:
        return np.asarray(self.V.evaluate(t=t), dtype=float)

    def survival(self, t: float, s: float, tol: float = TIME_TOL) -> float:
        return float(np.exp(-integrated_rate(self.V, t, s, tol)))

    def killed_mass(self) -> float:
        """Reference probability of dying before the horizon."""
        return 1.0 - self.survival(0.0, self.horizon)

    def two_regime_model(self) -> ModelSpec:
        """The same reference written as a switching model with an absorbing dead regime."""
        b = self.base
        d = b.d
        zeros = tuple(ZERO for _ in range(d))
        return ModelSpec(
            d,
            REGIMES,
            b.horizon,
            (b.drift[0], zeros),
            (b.diffusion[0], tuple(zeros for _ in range(d))),
            (b.jump_amplitude[0], zeros),
            b.jumps,
            ((ZERO, self.V), (ZERO, ZERO)),
            {},
            dict(b.params),
        )

    def describe(self) -> dict[str, Any]:
        return {"base": self.base.describe(), "V": str(self.V), "x0": self.x0.tolist()}


def killing_model(
    d: int = 1,
    horizon: float = 1.0,
    drift: Sequence = (0.0,),
    diffusion: Sequence[Sequence] = ((1.0,),),
    V: str | float | CoefficientExpr = 0.5,
    x0: Sequence[float] | float = 0.0,
    **kw,
) -> KillingModel:
    """Build a killed reference from expressions (extra keywords go to build_model)."""
    base = build_model(d, horizon, 1, {0: list(drift)}, {0: [list(r) for r in diffusion]}, **kw)
    if isinstance(V, CoefficientExpr):
        rate = V
    elif isinstance(V, (int, float)):
        rate = constant(V)
    else:
        from .expr import parse_coefficient

        rate = parse_coefficient(str(V), d=d, params=kw.get("params"))
    return KillingModel(base, rate, np.atleast_1d(np.asarray(x0, float)))


# ---------------------------------------------------------------- target


@dataclass
class UsbpTarget:
    """Terminal masses of survivors (active) and of killing locations (dead)."""

    grid: Grid
    active: NDArray
    dead: NDArray
    checks: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.size
        self.active = np.asarray(self.active, dtype=float).reshape(n)
        self.dead = np.asarray(self.dead, dtype=float).reshape(n)
        both = np.concatenate([self.active, self.dead])
        if not np.all(np.isfinite(both)) or np.any(both < 0):
            raise ConfigError("target masses must be finite and nonnegative")
        if abs(both.sum() - 1.0) > 1e-9:
            raise ConfigError(f"target masses sum to {both.sum()!r}, not 1")

    @classmethod
    def from_densities(cls, grid: Grid, active: NDArray, dead: NDArray, normalize: bool = True) -> "UsbpTarget":
        a = np.asarray(active, float) * grid.weights
        b = np.asarray(dead, float) * grid.weights
        if normalize:
            total = a.sum() + b.sum()
            a, b = a / total, b / total
        return cls(grid, a, b)

    @property
    def marginal(self) -> Marginal:
        return Marginal(self.grid, REGIMES, np.stack([self.active, self.dead]))

    @property
    def dead_mass(self) -> float:
        return float(self.dead.sum())

    def validate(self, km: KillingModel, reference: "UsbpKernels") -> dict[str, Any]:
        """Relative entropy against the reference terminal law and sup of g; stored in ``checks``."""
        ref = reference.terminal_law()
        g = usbp_g(self, reference)
        mass = self.marginal.mass
        pos = mass > 0
        entropy = float(np.sum(mass[pos] * np.log(mass[pos] / ref.mass[pos])))
        self.checks = {
            "relative_entropy": entropy,
            "relative_entropy_finite": bool(np.isfinite(entropy)),
            "sup_g": float(g.max()),
            "g_bounded": bool(np.isfinite(g.max())),
            "reference_killed_mass": km.killed_mass(),
            "target_dead_mass": self.dead_mass,
        }
        return self.checks


# ---------------------------------------------------------------- kernels


def _killed_profiles(
    ref: ConstantCoefficients, V: CoefficientExpr, grid: Grid, t: float, s: float, quadrature: str, tol: float
) -> tuple[NDArray, NDArray]:
    """Offset profiles of p11 and p12 between t and s (shape (2n - 1,) per axis product)."""
    displacements, _ = _offset_table(grid)
    h = grid.h
    if s == t:
        if quadrature == "point":
            raise ConfigError("point kernels need a positive time lag")
        p11 = ref.profile(displacements, 0.0, h, quadrature)
        return p11, np.zeros_like(p11)
    p11 = np.exp(-integrated_rate(V, t, s, tol)) * ref.profile(displacements, s - t, h, quadrature)
    if V.is_constant and V.constant_value() == 0.0:
        return p11, np.zeros_like(p11)
    if quadrature == "point":
        raise ConfigError("killed-mass kernels integrate from lag zero; use cell or hat quadrature")

    # The discretized profile behaves like sqrt(r - t) near r = t; with r = t + u^2
    # the integrand is smooth in u.
    def integrand(u):
        r = t + u * u
        return 2.0 * u * float(V.evaluate(t=r)) * np.exp(-integrated_rate(V, t, r, tol)) * ref.profile(displacements, u * u, h, quadrature)

    p12 = np.maximum(adaptive_simpson(integrand, 0.0, np.sqrt(s - t), tol, max_depth=40), 0.0)
    return p11, p12


@dataclass
class UsbpKernels:
    """The pair (p11, p12) between t and s, started from the nodes of ``grid``."""

    km: KillingModel
    p11: Kernel
    p12: Kernel

    @property
    def grid(self) -> Grid:
        return self.p11.grid

    def full(self) -> Kernel:
        """Two-regime kernel: active -> (active, dead) blocks and the frozen dead -> dead identity."""
        grid = self.grid
        n = grid.size
        vals = identity_kernel(grid, REGIMES, self.p11.t).values
        vals[ACTIVE, :, ACTIVE, :] = self.p11.values.reshape(n, n)
        vals[ACTIVE, :, DEAD, :] = self.p12.values.reshape(n, n)
        prov = {"kind": self.p11.provenance.get("kind", "analytic"), "family": "killing", "model": self.km.describe()}
        return Kernel(grid, REGIMES, self.p11.t, self.p11.s, vals, prov)

    def terminal_law(self) -> Marginal:
        """Reference law at s started from x0 at t, as masses on (active, dead)."""
        k = self.grid.node_of(self.km.x0)
        w = self.grid.weights
        return Marginal(self.grid, REGIMES, np.stack([self.p11.values.reshape(-1, w.size)[k] * w, self.p12.values.reshape(-1, w.size)[k] * w]))


def usbp_kernels(
    km: KillingModel,
    grid: Grid,
    t: float = 0.0,
    s: float | None = None,
    *,
    quadrature: str = "hat",
    tol: float = TIME_TOL,
    mc: dict[str, Any] | None = None,
) -> UsbpKernels:
    """Kernels p11 (survive) and p12 (killed, located at y) between t and s.

    Constant-coefficient references are integrated analytically in space
    and by adaptive Simpson in the killing time.  Other references need
    ``mc={"paths": ..., "dt": ..., "seed": ...}`` and are estimated from
    the two-regime model by Monte Carlo.
    """
    s = km.horizon if s is None else float(s)
    if not 0.0 <= t <= s <= km.horizon + 1e-12:
        raise ConfigError("need 0 <= t <= s <= T")
    if grid.d != km.d:
        raise ConfigError("model and grid dimensions differ")
    try:
        ref = constant_coefficients(km.base, 0)
    except UnsupportedModelError:
        if mc is None:
            raise
        K = kernel_mc(km.two_regime_model(), grid, t, s, int(mc["paths"]), float(mc["dt"]), int(mc.get("seed", 0)))
        one = RegimeSet.of_size(1)
        p11 = Kernel(grid, one, t, s, K.values[ACTIVE, :, ACTIVE, :], dict(K.provenance), K.leak[ACTIVE] if K.leak is not None else None, K.flags)
        p12 = Kernel(grid, one, t, s, K.values[ACTIVE, :, DEAD, :], dict(K.provenance), None, K.flags)
        return UsbpKernels(km, p11, p12)
    _, index = _offset_table(grid)
    a, b = _killed_profiles(ref, km.V, grid, float(t), s, quadrature, tol)
    prov = {"kind": "analytic", "family": "killing", "quadrature": quadrature, "V": str(km.V)}
    one = RegimeSet.of_size(1)
    p11 = Kernel(grid, one, float(t), s, a[index], dict(prov, block="survive"))
    p12 = Kernel(grid, one, float(t), s, b[index], dict(prov, block="killed"))
    return UsbpKernels(km, p11, p12)


# ---------------------------------------------------------------- explicit potentials


def usbp_g(target: UsbpTarget, reference: UsbpKernels) -> NDArray:
    """Terminal potential g (shape (2, n)) for f-hat = 1 and a Dirac start.

    Off the target support g is 0.  Raises TargetError listing the
    (regime, node) pairs where the target is charged but the reference
    terminal law vanishes.
    """
    law = reference.terminal_law().mass
    mass = np.stack([target.active, target.dead])
    bad = np.argwhere((mass > 0) & (law <= 0))
    if bad.size:
        nodes = [(int(i), int(k)) for i, k in bad]
        raise TargetError(f"target charges {len(nodes)} node(s) the reference cannot reach, e.g. {nodes[:5]}", nodes)
    return np.divide(mass, law, out=np.zeros_like(mass), where=mass > 0)


@dataclass
class UsbpSolution:
    km: KillingModel
    target: UsbpTarget
    g: NDArray
    phi: PotentialField
    phihat: PotentialField
    quadrature: str
    checks: dict[str, Any] = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    @property
    def model(self) -> ModelSpec:
        return self.km.two_regime_model()

    def marginal(self, t: float) -> Marginal:
        a = self.phi.slice(t) * self.phihat.slice(t)
        return Marginal(self.grid, REGIMES, a * self.grid.weights)

    def killing_rate(self, t: float, x: NDArray | None = None) -> NDArray:
        return usbp_killing_rate(self.phi, self.km.V, t, x)


def usbp_potentials(
    km: KillingModel,
    target: UsbpTarget,
    grid: Grid | None = None,
    slices: int | Sequence[float] = 32,
    *,
    quadrature: str = "hat",
    tol: float = TIME_TOL,
    assembly: str = "closed",
) -> UsbpSolution:
    """Explicit phi and phihat on slice times (no Sinkhorn iteration is needed).

    ``assembly="closed"`` evaluates the formulas with kernels from 0 and to
    T at every slice; discretized kernels compose only to O(h^2), so the
    bridge mass at interior slices is off by that much.  ``"chained"``
    propagates both potentials through consecutive-slice kernels instead,
    which conserves bridge mass exactly on the grid.
    """
    if assembly == "chained":
        return _chained_potentials(km, target, grid or target.grid, slices, quadrature, tol)
    if assembly != "closed":
        raise ConfigError(f"unknown assembly {assembly!r}")
    grid = grid or target.grid
    times = uniform_slices(km.horizon, slices) if isinstance(slices, int) else np.asarray(slices, float)
    if times[0] != 0.0 or not np.isclose(times[-1], km.horizon):
        raise ConfigError("slices must run from 0 to T")
    T = float(times[-1])
    x0 = grid.node_of(km.x0)
    w = grid.weights
    n = grid.size

    forward = [None] + [usbp_kernels(km, grid, 0.0, float(s), quadrature=quadrature, tol=tol) for s in times[1:]]
    g = usbp_g(target, forward[-1])
    checks = target.validate(km, forward[-1])

    phi = np.empty((times.size, 2, n))
    for m, t in enumerate(times[:-1]):
        pair = usbp_kernels(km, grid, float(t), T, quadrature=quadrature, tol=tol)
        phi[m, ACTIVE] = pair.p11.values.reshape(n, n) @ (g[ACTIVE] * w) + pair.p12.values.reshape(n, n) @ (g[DEAD] * w)
        phi[m, DEAD] = g[DEAD]
    phi[-1] = g

    phihat = np.zeros((times.size, 2, n))
    phihat[0, ACTIVE, x0] = 1.0 / w[x0]
    for m in range(1, times.size):
        pair = forward[m]
        phihat[m, ACTIVE] = pair.p11.values.reshape(n, n)[x0]
        phihat[m, DEAD] = pair.p12.values.reshape(n, n)[x0]

    meta = {"family": "killing", "quadrature": quadrature, "assembly": "closed", "model": km.describe()}
    sol = UsbpSolution(
        km,
        target,
        g,
        PotentialField(grid, REGIMES, times, phi, "phi", dict(meta)),
        PotentialField(grid, REGIMES, times, phihat, "phihat", dict(meta)),
        quadrature,
        checks,
    )
    sol.checks["normalization"] = float(np.sum(g * forward[-1].terminal_law().mass))
    return sol


def _chained_potentials(km, target, grid, slices, quadrature, tol) -> UsbpSolution:
    times = uniform_slices(km.horizon, slices) if isinstance(slices, int) else np.asarray(slices, float)
    if times[0] != 0.0 or not np.isclose(times[-1], km.horizon):
        raise ConfigError("slices must run from 0 to T")
    n, w = grid.size, np.tile(grid.weights, 2)
    steps = [usbp_kernels(km, grid, float(a), float(b), quadrature=quadrature, tol=tol).full().matrix for a, b in zip(times[:-1], times[1:])]
    phihat = np.zeros((times.size, 2 * n))
    phihat[0, grid.node_of(km.x0)] = 1.0 / grid.weight
    for m, K in enumerate(steps):
        phihat[m + 1] = (phihat[m] * w) @ K
    law = (phihat[-1] * w).reshape(2, n)
    mass = np.stack([target.active, target.dead])
    bad = np.argwhere((mass > 0) & (law <= 0))
    if bad.size:
        nodes = [(int(i), int(k)) for i, k in bad]
        raise TargetError(f"target charges {len(nodes)} node(s) the reference cannot reach, e.g. {nodes[:5]}", nodes)
    g = np.divide(mass, law, out=np.zeros_like(mass), where=mass > 0)
    phi = np.empty((times.size, 2 * n))
    phi[-1] = g.reshape(-1)
    for m in range(len(steps) - 1, -1, -1):
        phi[m] = steps[m] @ (phi[m + 1] * w)
    pos = mass > 0
    entropy = float(np.sum(mass[pos] * np.log(mass[pos] / law[pos])))
    target.checks = {
        "relative_entropy": entropy,
        "relative_entropy_finite": bool(np.isfinite(entropy)),
        "sup_g": float(g.max()),
        "g_bounded": bool(np.isfinite(g.max())),
        "reference_killed_mass": km.killed_mass(),
        "target_dead_mass": target.dead_mass,
    }
    meta = {"family": "killing", "quadrature": quadrature, "assembly": "chained", "model": km.describe()}
    sol = UsbpSolution(
        km,
        target,
        g,
        PotentialField(grid, REGIMES, times, phi, "phi", dict(meta)),
        PotentialField(grid, REGIMES, times, phihat, "phihat", dict(meta)),
        quadrature,
        dict(target.checks),
    )
    sol.checks["normalization"] = float(np.sum(g * law))
    return sol


# ---------------------------------------------------------------- killing rate and cost


def usbp_killing_rate(phi: PotentialField, V: CoefficientExpr, t: float, x: NDArray | None = None) -> NDArray:
    """Bridge killing rate V(t) phi(t, x, dead) / phi(t, x, active).

    ``x`` holds points (shape (m, d)); omitted means every node.  Between
    slices phi is interpolated in time as in PotentialField.at.
    """
    vals = phi.at(t)
    if x is None:
        a, b = vals[ACTIVE], vals[DEAD]
    else:
        pts = np.asarray(x, float).reshape(-1, phi.grid.d)
        a = displaced_values(vals[ACTIVE], phi.grid, pts)
        b = displaced_values(vals[DEAD], phi.grid, pts)
    if np.any(~(a > 0)):
        raise DomainError(f"phi vanishes in the active regime at t={t}")
    return float(V.evaluate(t=t)) * b / a


def tilted_kill_identity(
    sol: UsbpSolution, t: float, s: float, *, panels: int = 16, tol: float = TIME_TOL
) -> tuple[NDArray, NDArray]:
    """Check the tilted killed-kernel identity by quadrature in the killing time.

    Returns (direct, integrated): the bridge kernel phi(s,y,d)/phi(t,x,a) p12(t,x,s,y)
    and int_t^s (phi(r,y,d)/phi(r,y,a)) V(r) phat11(t,x,r,y) dr with phi(r, ., a)
    rebuilt from the closed form at every quadrature node (composite Simpson).
    Both have shape (n, n), rows restricted to phi(t, ., a) > 0.
    """
    km, grid, g = sol.km, sol.grid, sol.g
    n, w = grid.size, grid.weights
    T = km.horizon

    def phi_active(r):
        if np.isclose(r, T):
            return g[ACTIVE].copy()
        pair = usbp_kernels(km, grid, r, T, quadrature=sol.quadrature, tol=tol)
        return pair.p11.values.reshape(n, n) @ (g[ACTIVE] * w) + pair.p12.values.reshape(n, n) @ (g[DEAD] * w)

    at_t = phi_active(t)
    inv = np.divide(1.0, at_t, out=np.zeros_like(at_t), where=at_t > 0)
    direct = inv[:, None] * usbp_kernels(km, grid, t, s, quadrature=sol.quadrature, tol=tol).p12.values.reshape(n, n) * g[DEAD][None, :]

    # composite Simpson in u with r = t + u^2 (the kernel at lag r - t is not smooth in r)
    us = np.linspace(0.0, np.sqrt(s - t), 2 * panels + 1)
    rs = t + us**2
    coef = np.ones(us.size)
    coef[1:-1:2], coef[2:-1:2] = 4.0, 2.0
    coef *= us[-1] / (6.0 * panels) * 2.0 * us
    total = np.zeros((n, n))
    for c, r in zip(coef, rs):
        at_r = phi_active(r)
        q = usbp_kernels(km, grid, t, r, quadrature=sol.quadrature, tol=tol).p11.values.reshape(n, n)
        p_hat11 = inv[:, None] * q * at_r[None, :]
        ratio = np.divide(g[DEAD], at_r, out=np.zeros(n), where=at_r > 0)
        total += c * ratio[None, :] * float(km.V.evaluate(t=r)) * p_hat11
    return direct, total


def usbp_scp_cost(path, controls: ControlTriple, km: KillingModel):
    """Running KL cost of a controlled killed path; the switch term is V(t)[xi log xi + 1 - xi]."""
    return kl_running_cost(path, controls, km.two_regime_model())


def hazard_table(
    times: NDArray, regimes: NDArray, *, dead: int = DEAD, bins: Sequence[float]
) -> list[dict[str, float]]:
    """Empirical killing hazard per time bin from recorded regime paths.

    ``regimes`` has shape (n_paths, len(times)).  For each bin the hazard
    is -log(survivors at end / survivors at start) / width.
    """
    rows = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        a = int(np.argmin(np.abs(times - lo)))
        b = int(np.argmin(np.abs(times - hi)))
        at_risk = int(np.sum(regimes[:, a] != dead))
        alive = int(np.sum(regimes[:, b] != dead))
        rate = -np.log(alive / at_risk) / (times[b] - times[a]) if at_risk and alive else float("nan")
        rows.append({"t0": float(times[a]), "t1": float(times[b]), "at_risk": at_risk, "events": at_risk - alive, "hazard": float(rate)})
    return rows


def bridge_hazard(sol: UsbpSolution, t: float) -> float:
    """Population killing hazard of the bridge at a slice: mean tilted rate over living mass."""
    phi = sol.phi.slice(t)
    living = phi[ACTIVE] * sol.phihat.slice(t)[ACTIVE]
    if living.sum() <= 0:
        return float("nan")
    rate = float(sol.km.V.evaluate(t=t)) * np.divide(phi[DEAD], phi[ACTIVE], out=np.zeros(sol.grid.size), where=phi[ACTIVE] > 0)
    return float(np.sum(rate * living) / living.sum())


def terminal_log_g(sol: UsbpSolution, x: NDArray, regime: NDArray) -> NDArray:
    """log g at terminal states, g interpolated linearly on the grid (clamped at the edges)."""
    from . import _core

    grid = sol.grid
    pts = np.asarray(x, float).reshape(-1, grid.d)
    rows = np.asarray(regime, dtype=np.int64).reshape(-1)
    g = _core.interp_rows(sol.g, rows, pts, grid.lower + 0.5 * grid.h, grid.h, grid.shape, order=1, clamp=True)
    with np.errstate(divide="ignore"):
        return np.log(g)


def usbp_objective(batch, controls: ControlTriple, sol: UsbpSolution) -> NDArray:
    """Per-path unconstrained objective: running KL cost minus log g at the end state.

    Its mean under the law driven by ``controls`` is minimized by the
    optimal triple, with minimum -log phi(0, x0, active).  ``batch`` must
    be recorded.
    """
    running = usbp_scp_cost(batch, controls, sol.km)
    return running - terminal_log_g(sol, batch.x_final, batch.regime_final)


# ---------------------------------------------------------------- configuration and artifacts


def _target_part(spec, grid: Grid, law: NDArray, base) -> NDArray:
    """Unnormalized target masses for one regime from a file or components.

    Components take the shapes of config marginals; ``reweight = true``
    multiplies the component by the reference terminal law of that regime.
    """
    from .config import _component_density, _positive, resolve
    from .io import read_marginal

    if isinstance(spec, str):
        return read_marginal(resolve(spec, base), grid, RegimeSet.of_size(1)).mass[0]
    comps = [spec] if isinstance(spec, dict) else list(spec)
    out = np.zeros(grid.size)
    for comp in comps:
        shape, _ = _component_density(comp, grid)
        if comp.get("reweight", False):
            shape = shape * law
        if shape.sum() <= 0:
            raise ConfigError(f"target component {dict(comp)} has no mass on the grid")
        out += _positive(comp, "mass", 1.0) * shape / shape.sum()
    return out


def killing_setup(cfg) -> tuple[KillingModel, UsbpTarget]:
    """Killing model and target described by the [model] and [usbp] sections of a config."""
    from .expr import parse_coefficient

    p = cfg.usbp
    if p is None or cfg.model is None:
        raise ConfigError("usbp needs [model] (one regime) and [usbp]")
    km = KillingModel(cfg.model, parse_coefficient(p.V, d=0), np.asarray(p.x0, float))
    grid = cfg.grid
    law = usbp_kernels(km, grid).terminal_law().mass
    a = _target_part(p.target["active"], grid, law[ACTIVE], cfg.base)
    d = _target_part(p.target["dead"], grid, law[DEAD], cfg.base)
    total = a.sum() + d.sum()
    if total <= 0:
        raise ConfigError("the killing target has no mass")
    return km, UsbpTarget(grid, a / total, d / total)


def run_usbp(cfg, outs, prefix: str = "usbp/") -> dict[str, Any]:
    """Solve, check and write the killing problem of a config."""
    from .io import write_json, write_marginal_flow, write_potentials, write_rows
    from .kernel import save_kernel
    from .potentials import optimal_controls
    from scipy.integrate import trapezoid

    from .simulate import RngStream, simulate_bridge

    km, target = killing_setup(cfg)
    grid = cfg.grid
    p = cfg.usbp
    sol = usbp_potentials(km, target, grid, p.slices, assembly=p.assembly)
    pair = usbp_kernels(km, grid)
    save_kernel(pair.full(), outs.path(f"{prefix}kernels/K_0_{format(km.horizon, '.6g')}.bin"))
    write_potentials(sol.phi, sol.phihat, outs.path(f"{prefix}potentials.csv"))
    write_marginal_flow(sol.phi, sol.phihat, outs.path(f"{prefix}marginals.csv"))

    rows = []
    coords = [f"x{k + 1}" for k in range(grid.d)]
    for t in sol.phi.times:
        vals = sol.phi.slice(t)
        live = vals[ACTIVE] > 0
        rate = float(km.V.evaluate(t=t)) * np.divide(vals[DEAD], vals[ACTIVE], out=np.zeros(grid.size), where=live)
        rows += [[float(t), *map(float, grid.nodes[k]), float(rate[k])] for k in np.flatnonzero(live)]
    write_rows(outs.path(f"{prefix}killing_rate.csv"), ["t", *coords, "rate"], rows)

    flow = np.array([sol.marginal(t).mass.sum(axis=1) for t in sol.phi.times])
    terminal = sol.marginal(km.horizon).mass - target.marginal.mass
    report: dict[str, Any] = {
        "kind": "usbp",
        "model": km.describe(),
        "assembly": p.assembly,
        "checks": sol.checks,
        "killed_mass": {"quadrature": float(pair.p12.values.reshape(grid.size, grid.size)[grid.node_of(km.x0)] @ grid.weights), "exact": km.killed_mass()},
        "mass_bookkeeping_max_error": float(np.max(np.abs(flow.sum(axis=1) - 1.0))),
        "dead_mass_by_slice": flow[:, DEAD].tolist(),
        "dead_mass_nondecreasing": bool(np.all(np.diff(flow[:, DEAD]) >= -1e-12)),
        "terminal_max_error": float(np.max(np.abs(terminal / grid.weights))),
    }
    if p.paths > 0:
        dt = km.horizon / (4 * p.slices)
        bins = sol.phi.times[:: max(1, p.slices // 8)]
        batch = simulate_bridge(
            km.two_regime_model(), optimal_controls(sol.phi, km.two_regime_model()), Marginal.point_mass(grid, REGIMES, ACTIVE, km.x0),
            dt, RngStream(cfg.seed("usbp"), 0), p.paths, snapshots=tuple(bins),
        )
        dead = float(np.mean(batch.regime_final == DEAD))
        regimes = np.stack([batch.state_at(float(t))[1] for t in bins], axis=1)
        table = hazard_table(np.asarray(bins), regimes, bins=bins)
        for row in table:
            ts = [t for t in sol.phi.times if row["t0"] - 1e-12 <= t <= row["t1"] + 1e-12]
            row["formula"] = float(trapezoid([bridge_hazard(sol, t) for t in ts], ts) / (row["t1"] - row["t0"]))
        report["monte_carlo"] = {
            "paths": p.paths,
            "dt": dt,
            "rejected": int(batch.rejected.sum()),
            "dead_mass": dead,
            "dead_mass_se": float(np.sqrt(dead * (1 - dead) / batch.size)),
            "target_dead_mass": target.dead_mass,
            "hazard": table,
        }
    write_json(report, outs.path(f"{prefix}report.json"))
    return report
