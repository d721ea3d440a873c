"""Uniform spatial grids with midpoint quadrature, and discretized marginals."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError
from .model import RegimeSet


@dataclass(frozen=True)
class Axis:
    lower: float
    upper: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("an axis needs at least 2 points")
        if not self.upper > self.lower:
            raise ConfigError("axis upper bound must exceed lower bound")

    @property
    def h(self) -> float:
        return (self.upper - self.lower) / self.n

    @property
    def nodes(self) -> NDArray:
        """Cell midpoints."""
        return self.lower + (np.arange(self.n) + 0.5) * self.h

    @classmethod
    def parse(cls, text: str) -> "Axis":
        try:
            lo, hi, n = text.split(":")
            return cls(float(lo), float(hi), int(n))
        except ValueError:
            raise ConfigError(f"grid axis {text!r} is not of the form lower:upper:n") from None

    def __str__(self) -> str:
        return f"{self.lower!r}:{self.upper!r}:{self.n}"


@dataclass(frozen=True)
class Grid:
    """Tensor grid of cells; nodes are cell midpoints and every node has weight prod(h).

    Nodes are flattened in C order (last axis fastest).
    """

    axes: tuple[Axis, ...]

    @classmethod
    def uniform(cls, lower: float, upper: float, n: int) -> "Grid":
        return cls((Axis(float(lower), float(upper), int(n)),))

    @classmethod
    def parse(cls, spec: str | Sequence[str]) -> "Grid":
        """Parse ``"lo:hi:n"`` or ``"lo:hi:n,lo:hi:n"`` (one entry per axis)."""
        parts = spec.split(",") if isinstance(spec, str) else list(spec)
        return cls(tuple(Axis.parse(p.strip()) for p in parts))

    def __str__(self) -> str:
        return ",".join(str(a) for a in self.axes)

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.n for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def h(self) -> NDArray:
        return np.array([a.h for a in self.axes])

    @property
    def lower(self) -> NDArray:
        return np.array([a.lower for a in self.axes])

    @property
    def upper(self) -> NDArray:
        return np.array([a.upper for a in self.axes])

    @property
    def weight(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def weights(self) -> NDArray:
        return np.full(self.size, self.weight)

    @cached_property
    def nodes(self) -> NDArray:
        """Array of shape (size, d) with node coordinates."""
        mesh = np.meshgrid(*[a.nodes for a in self.axes], indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def refine(self) -> "Grid":
        """Same domain with the spacing halved on every axis."""
        return Grid(tuple(Axis(a.lower, a.upper, 2 * a.n) for a in self.axes))

    def cell_index(self, x: NDArray) -> NDArray:
        """Flat index of the cell containing each point, -1 outside the grid."""
        x = np.atleast_2d(x)
        idx = np.floor((x - self.lower) / self.h).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(idx, 0, np.array(self.shape) - 1).T), self.shape)
        return np.where(inside, flat, -1)

    def nearest_node(self, x: Sequence[float]) -> int:
        """Index of the node whose cell contains ``x``."""
        k = int(self.cell_index(np.asarray(x, float).reshape(1, -1))[0])
        if k < 0:
            raise ConfigError(f"point {list(x)} lies outside the grid")
        return k

    def node_of(self, x: Sequence[float], atol: float = 1e-9) -> int:
        """Index of the node at ``x``; raises if ``x`` is not a node."""
        k = self.nearest_node(x)
        if np.max(np.abs(self.nodes[k] - np.asarray(x, float))) > atol * max(1.0, float(np.max(self.h))):
            raise ConfigError(f"point {list(x)} is not a grid node (nearest {self.nodes[k].tolist()})")
        return k

    def describe(self) -> list[list[float]]:
        return [[a.lower, a.upper, a.n] for a in self.axes]

    @classmethod
    def from_description(cls, desc) -> "Grid":
        return cls(tuple(Axis(float(lo), float(hi), int(n)) for lo, hi, n in desc))


@dataclass
class Marginal:
    """Nonnegative masses per (regime, node).

    ``mass[i, k]`` is a density value times the node weight, or the mass of
    a point mass placed at node k.  ``dirac`` lists (regime, node) entries
    that are point masses rather than discretized densities.
    """

    grid: Grid
    regimes: RegimeSet
    mass: NDArray
    dirac: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float).reshape(self.regimes.count, self.grid.size)
        if np.any(self.mass < 0) or not np.all(np.isfinite(self.mass)):
            raise ConfigError("marginal weights must be finite and nonnegative")

    @classmethod
    def from_density(cls, grid: Grid, regimes: RegimeSet, density: NDArray, normalize: bool = False) -> "Marginal":
        mass = np.asarray(density, float).reshape(regimes.count, grid.size) * grid.weights
        if normalize:
            mass = mass / mass.sum()
        return cls(grid, regimes, mass)

    @classmethod
    def point_mass(cls, grid: Grid, regimes: RegimeSet, regime: int, x: Sequence[float]) -> "Marginal":
        node = grid.node_of(x)
        mass = np.zeros((regimes.count, grid.size))
        mass[regime, node] = 1.0
        return cls(grid, regimes, mass, ((regime, node),))

    @property
    def density(self) -> NDArray:
        return self.mass / self.grid.weights

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    @property
    def support(self) -> NDArray:
        return self.mass > 0

    def regime_mass(self) -> NDArray:
        return self.mass.sum(axis=1)
