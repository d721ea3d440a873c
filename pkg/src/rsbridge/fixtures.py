"""Named problem instances shared by the tests, the benchmark and the CLI."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError
from .grid import Grid, Marginal
from .kernel import Kernel, kernel_analytic
from .model import ModelSpec, RegimeSet, build_model
from .potentials import BridgeSolution, solve_bridge
from .usbp import REGIMES, KillingModel, UsbpSolution, UsbpTarget, killing_model, usbp_kernels, usbp_potentials


def gaussian_density(x: NDArray, mean: float, var: float) -> NDArray:
    return np.exp(-((x - mean) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)


def bump_density(x: NDArray, center: float, radius: float) -> NDArray:
    """Smooth compactly supported bump (1 - u^2)^2 on |u| < 1, u = (x - center) / radius."""
    u = (x - center) / radius
    return np.where(np.abs(u) < 1, (1 - u**2) ** 2, 0.0)


@dataclass
class BridgeFixture:
    name: str
    model: ModelSpec
    grid: Grid
    rho0: Marginal
    rhoT: Marginal
    slices: int = 16
    quadrature: str = "hat"
    notes: dict[str, Any] = field(default_factory=dict)

    def kernel(self, t: float, s: float) -> Kernel:
        return kernel_analytic(self.model, self.grid, t, s, self.quadrature)

    def solve(self, **kw) -> BridgeSolution:
        kw.setdefault("slices", self.slices)
        kw.setdefault("quadrature", self.quadrature)
        return solve_bridge(self.model, self.grid, self.rho0, self.rhoT, **kw)

    def refined(self) -> "BridgeFixture":
        """Same problem with half the grid spacing and twice the slices."""
        builder = FIXTURES[self.name]
        return builder(nodes=2 * self.grid.size, slices=2 * self.slices, quadrature=self.quadrature)


def gaussian_fixture(
    nodes: int = 100,
    slices: int = 16,
    quadrature: str = "hat",
    *,
    var0: float = 0.5,
    varT: float = 0.4,
) -> BridgeFixture:
    """Drifted Brownian reference (b = 0.3, sigma = 0.8, T = 1) between two Gaussians on [-5, 5]."""
    model = build_model(1, 1.0, 1, {0: [0.3]}, {0: [[0.8]]})
    grid = Grid.uniform(-5.0, 5.0, nodes)
    x = grid.nodes[:, 0]
    one = RegimeSet.of_size(1)
    rho0 = Marginal.from_density(grid, one, gaussian_density(x, -1.0, var0), normalize=True)
    rhoT = Marginal.from_density(grid, one, gaussian_density(x, 1.0, varT), normalize=True)
    return BridgeFixture("gaussian", model, grid, rho0, rhoT, slices, quadrature, {"var0": var0, "varT": varT})


def narrow_gaussian_fixture(nodes: int = 100, slices: int = 16, quadrature: str = "point") -> BridgeFixture:
    """Gaussian fixture with tighter targets, sampled at nodes; used for path-level checks."""
    fx = gaussian_fixture(nodes, slices, quadrature, var0=0.25, varT=0.15)
    fx.name = "narrow-gaussian"
    return fx


def switching_fixture(nodes: int = 100, slices: int = 16, quadrature: str = "hat") -> BridgeFixture:
    """Two regimes sharing the Gaussian dynamics, switching at constant rates 0.7 and 0.4."""
    model = build_model(1, 1.0, 2, {0: [0.3], 1: [0.3]}, {0: [[0.8]], 1: [[0.8]]}, rates={(0, 1): 0.7, (1, 0): 0.4})
    grid = Grid.uniform(-5.0, 5.0, nodes)
    x = grid.nodes[:, 0]
    two = RegimeSet.of_size(2)
    d0 = np.stack([0.8 * gaussian_density(x, -1.0, 0.5), 0.2 * gaussian_density(x, -0.5, 0.5)])
    dT = np.stack([0.4 * gaussian_density(x, 1.0, 0.4), 0.6 * gaussian_density(x, 0.5, 0.6)])
    rho0 = Marginal.from_density(grid, two, d0, normalize=True)
    rhoT = Marginal.from_density(grid, two, dT, normalize=True)
    return BridgeFixture("switching", model, grid, rho0, rhoT, slices, quadrature)


FIXTURES: dict[str, Callable[..., BridgeFixture]] = {
    "gaussian": gaussian_fixture,
    "narrow-gaussian": narrow_gaussian_fixture,
    "switching": switching_fixture,
}


# ---------------------------------------------------------------- killing


@dataclass
class KillingFixture:
    name: str
    km: KillingModel
    grid: Grid
    target: UsbpTarget
    slices: int = 32
    rho0: Marginal | None = None

    @property
    def model(self) -> ModelSpec:
        return self.km.two_regime_model()

    def solve(self, **kw) -> UsbpSolution:
        return usbp_potentials(self.km, self.target, self.grid, kw.pop("slices", self.slices), **kw)

    def start(self) -> Marginal:
        """The start law: rho0 when given, else the point mass at x0 in the active regime."""
        if self.rho0 is not None:
            return self.rho0
        return Marginal.point_mass(self.grid, REGIMES, 0, self.km.x0)

    def kernel(self, t: float = 0.0, s: float | None = None) -> Kernel:
        return usbp_kernels(self.km, self.grid, t, s).full()

    def refined(self) -> "KillingFixture":
        return KILLING_FIXTURES[self.name](nodes=2 * self.grid.size - 1, slices=2 * self.slices)


def _odd(nodes: int) -> int:
    if nodes % 2 == 0:
        raise ConfigError("killing fixtures need an odd node count so that x0 = 0 is a node")
    return nodes


def killing_smooth_fixture(nodes: int = 101, slices: int = 32, V: str | float = 0.5) -> KillingFixture:
    """Killing at rate V from x0 = 0; survivors pushed toward 0.8, killed particles toward -0.5 (mass 0.7 / 0.3).

    The targets are the reference terminal law reweighted by smooth
    Gaussian factors, so g is smooth.  (The killing-location law has a
    logarithmic cusp at x0; a target that does not share it would give g
    a cusp there.)
    """
    km = killing_model(1, 1.0, [0.2], [[1.0]], V=V, x0=0.0)
    grid = Grid.uniform(-5.0, 5.0, _odd(nodes))
    x = grid.nodes[:, 0]
    law = usbp_kernels(km, grid).terminal_law().mass
    a = law[0] * np.exp(-((x - 0.8) ** 2) / (2 * 0.5))
    d = law[1] * np.exp(-((x + 0.5) ** 2) / (2 * 0.6))
    target = UsbpTarget(grid, 0.7 * a / a.sum(), 0.3 * d / d.sum())
    return KillingFixture("killing-smooth", km, grid, target, slices)


def killing_compact_fixture(nodes: int = 101, slices: int = 32, dirac: bool = False) -> KillingFixture:
    """Compactly supported targets; the start is a bump on [-1, 0.5] (or the point mass at 0)."""
    km = killing_model(1, 1.0, [0.2], [[1.0]], V="0.3 + 0.4*t", x0=0.0)
    grid = Grid.uniform(-5.0, 5.0, _odd(nodes))
    x = grid.nodes[:, 0]
    a = bump_density(x, 1.0, 1.2)
    d = bump_density(x, -0.8, 0.9)
    target = UsbpTarget(grid, 0.65 * a / a.sum(), 0.35 * d / d.sum())
    rho0 = None
    if not dirac:
        b = bump_density(x, -0.25, 0.75)
        rho0 = Marginal(grid, REGIMES, np.stack([b / b.sum(), np.zeros_like(b)]))
    name = "killing-compact-dirac" if dirac else "killing-compact"
    return KillingFixture(name, km, grid, target, slices, rho0)


KILLING_FIXTURES: dict[str, Callable[..., KillingFixture]] = {
    "killing-smooth": killing_smooth_fixture,
    "killing-compact": killing_compact_fixture,
    "killing-compact-dirac": lambda nodes=101, slices=32: killing_compact_fixture(nodes, slices, dirac=True),
}
