"""Experiment configuration files (TOML).

Everything is parsed and range-checked before any computation starts.
Relative file names are resolved against the directory of the config
file.  See README.md for the full key list.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .expr import parse_coefficient
from .grid import Grid, Marginal
from .kernel import QUADRATURES
from .model import ModelSpec, RegimeSet, model_from_config

STAGES = ("simulate", "kernel", "solve", "bridge", "verify", "usbp")
SUITES = ("backward", "forward", "adjoint", "bridge")
# stream ids of the per-purpose seeds derived from the root seed
PURPOSES = {"simulate": 1, "kernel": 2, "bridge": 3, "verify": 4, "usbp": 5}


def purpose_seed(root: int, purpose: str) -> int:
    """Independent 63-bit seed for one purpose, derived from the root seed."""
    ss = np.random.SeedSequence(int(root), spawn_key=(PURPOSES[purpose],))
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


def load_toml(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _positive(table: Mapping[str, Any], key: str, default, kind=float, strict: bool = True):
    value = table.get(key, default)
    try:
        value = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {value!r}") from None
    if (strict and not value > 0) or (not strict and value < 0):
        raise ConfigError(f"{key} must be {'positive' if strict else 'nonnegative'}, got {value!r}")
    return value


def parse_grid(spec: Any) -> Grid:
    if isinstance(spec, Mapping):
        spec = spec.get("axes", spec.get("spec"))
    if spec is None:
        raise ConfigError("[grid] needs axes = \"lower:upper:n\" (one entry per dimension)")
    return Grid.parse(spec if isinstance(spec, str) else list(spec))


# ---------------------------------------------------------------- marginals


def _component_density(comp: Mapping[str, Any], grid: Grid) -> tuple[np.ndarray, bool]:
    x = grid.nodes
    shape = comp.get("shape", "gaussian")
    if shape == "gaussian":
        mean = np.broadcast_to(np.asarray(comp.get("mean", 0.0), float), (grid.d,))
        var = _positive(comp, "var", 1.0)
        return np.exp(-np.sum((x - mean) ** 2, axis=1) / (2 * var)), False
    if shape == "bump":
        center = np.broadcast_to(np.asarray(comp.get("center", 0.0), float), (grid.d,))
        radius = _positive(comp, "radius", 1.0)
        u2 = np.sum((x - center) ** 2, axis=1) / radius**2
        return np.where(u2 < 1, (1 - u2) ** 2, 0.0), False
    if shape == "point":
        out = np.zeros(grid.size)
        out[grid.node_of(np.atleast_1d(np.asarray(comp.get("at", 0.0), float)))] = 1.0
        return out, True
    raise ConfigError(f"unknown marginal shape {shape!r}; use gaussian, bump or point")


def marginal_from_spec(spec: Any, grid: Grid, regimes: RegimeSet, base: Path) -> Marginal:
    """A marginal from a CSV file name or a list of components.

    Components are tables with ``regime``, ``mass`` and ``shape`` (gaussian
    with ``mean``/``var``, bump with ``center``/``radius``, point with
    ``at``).  Component masses are normalized to total 1.
    """
    from .io import read_marginal

    if isinstance(spec, str):
        return read_marginal(resolve(spec, base), grid, regimes)
    if isinstance(spec, Mapping):
        spec = [spec]
    if not isinstance(spec, list) or not spec:
        raise ConfigError("a marginal is a file name or a list of components")
    mass = np.zeros((regimes.count, grid.size))
    dirac = []
    weights = [_positive(c, "mass", 1.0) for c in spec]
    total = sum(weights)
    for comp, wgt in zip(spec, weights):
        i = regimes.index(comp.get("regime", 1))
        shape, point = _component_density(comp, grid)
        if shape.sum() <= 0:
            raise ConfigError(f"marginal component {dict(comp)} has no mass on the grid")
        mass[i] += wgt / total * shape / shape.sum()
        if point:
            dirac.append((i, int(np.argmax(shape))))
    return Marginal(grid, regimes, mass, tuple(dirac))


def resolve(name: str, base: Path) -> Path:
    p = Path(name)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"referenced file does not exist: {p}")
    return p


# ---------------------------------------------------------------- config


@dataclass
class SolverParams:
    tol: float = 1e-10
    max_iters: int = 10_000
    f0: str | None = None
    quadrature: str = "hat"
    slices: int = 16
    kernel: str = "analytic"
    paths_per_node: int = 2000
    kernel_dt: float = 0.01


@dataclass
class SimulationParams:
    paths: int = 1000
    dt: float = 0.01
    seed: int = 0
    record: int = 50


@dataclass
class UsbpParams:
    V: str = "0.5"
    x0: list[float] = field(default_factory=lambda: [0.0])
    target: Any = None
    slices: int = 32
    assembly: str = "closed"
    paths: int = 20_000


@dataclass
class ExperimentConfig:
    path: Path
    raw: dict[str, Any]
    model: ModelSpec | None
    grid: Grid
    rho0: Marginal | None
    rhoT: Marginal | None
    solver: SolverParams
    simulation: SimulationParams
    out: Path
    stages: tuple[str, ...]
    suites: tuple[str, ...]
    usbp: UsbpParams | None

    @property
    def base(self) -> Path:
        return self.path.parent

    def seed(self, purpose: str) -> int:
        return purpose_seed(self.simulation.seed, purpose)

    def digest(self) -> str:
        """Hash of the parsed config plus the bytes of every referenced file."""
        h = hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode())
        for name in _referenced_files(self.raw):
            p = Path(name) if Path(name).is_absolute() else self.base / name
            if p.exists():
                h.update(p.read_bytes())
        return h.hexdigest()


def _referenced_files(raw: Mapping[str, Any]) -> list[str]:
    names = []
    for key in ("rho0", "rhoT"):
        v = raw.get("marginals", {}).get(key)
        if isinstance(v, str):
            names.append(v)
    if isinstance(raw.get("solver", {}).get("f0"), str):
        names.append(raw["solver"]["f0"])
    target = raw.get("usbp", {}).get("target", {})
    if isinstance(target, Mapping):
        names += [v for v in target.values() if isinstance(v, str)]
    return sorted(names)


def _solver(table: Mapping[str, Any]) -> SolverParams:
    p = SolverParams(
        tol=_positive(table, "tol", 1e-10),
        max_iters=_positive(table, "max_iters", 10_000, int),
        f0=table.get("f0"),
        quadrature=str(table.get("quadrature", "hat")),
        slices=_positive(table, "slices", 16, int),
        kernel=str(table.get("kernel", "analytic")),
        paths_per_node=_positive(table, "paths_per_node", 2000, int),
        kernel_dt=_positive(table, "kernel_dt", 0.01),
    )
    if p.quadrature not in QUADRATURES:
        raise ConfigError(f"quadrature must be one of {QUADRATURES}")
    if p.kernel not in ("analytic", "mc"):
        raise ConfigError("solver.kernel must be analytic or mc")
    if p.slices < 2:
        raise ConfigError("solver.slices must be at least 2")
    return p


def _simulation(table: Mapping[str, Any]) -> SimulationParams:
    return SimulationParams(
        paths=_positive(table, "paths", 1000, int),
        dt=_positive(table, "dt", 0.01),
        seed=_positive(table, "seed", 0, int, strict=False),
        record=_positive(table, "record", 50, int, strict=False),
    )


def _usbp(table: Mapping[str, Any] | None, d: int) -> UsbpParams | None:
    if table is None:
        return None
    V = table.get("V", 0.5)
    parse_coefficient(str(V), d=0)  # syntax and identifier check: t only
    x0 = np.atleast_1d(np.asarray(table.get("x0", [0.0] * d), float)).tolist()
    if len(x0) != d:
        raise ConfigError("usbp.x0 has the wrong dimension")
    p = UsbpParams(
        V=str(V),
        x0=x0,
        target=table.get("target"),
        slices=_positive(table, "slices", 32, int),
        assembly=str(table.get("assembly", "closed")),
        paths=_positive(table, "paths", 20_000, int, strict=False),
    )
    if p.assembly not in ("closed", "chained"):
        raise ConfigError("usbp.assembly must be closed or chained")
    if not isinstance(p.target, Mapping) or "active" not in p.target or "dead" not in p.target:
        raise ConfigError("[usbp.target] needs active and dead entries")
    return p


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Parse and validate an experiment file.  ``overrides`` replace top-level tables' keys,
    e.g. {"grid": {"axes": "-6:6:200"}}."""
    path = Path(path).resolve()
    raw = load_toml(path)
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update(values)
    return config_from_dict(raw, path)


def config_from_dict(raw: dict[str, Any], path: Path) -> ExperimentConfig:
    base = path.parent
    model = model_from_config(raw["model"]) if "model" in raw else None
    if "grid" not in raw:
        raise ConfigError("missing [grid] section")
    grid = parse_grid(raw["grid"])
    if model is not None and model.d != grid.d:
        raise ConfigError("model and grid dimensions differ")
    solver = _solver(raw.get("solver", {}))
    simulation = _simulation(raw.get("simulation", {}))
    stages = tuple(raw.get("pipeline", {}).get("stages", ()))
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; known: {STAGES}")
    suites = tuple(raw.get("verify", {}).get("suites", SUITES))
    if any(s not in SUITES for s in suites):
        raise ConfigError(f"verify.suites must be drawn from {SUITES}")
    rho0 = rhoT = None
    marg = raw.get("marginals", {})
    if model is not None:
        if "rho0" in marg:
            rho0 = marginal_from_spec(marg["rho0"], grid, model.regimes, base)
        if "rhoT" in marg:
            rhoT = marginal_from_spec(marg["rhoT"], grid, model.regimes, base)
    if solver.f0 is not None:
        resolve(solver.f0, base)
    usbp = _usbp(raw.get("usbp"), grid.d)
    if usbp is not None:
        for key in ("active", "dead"):
            if isinstance(usbp.target[key], str):
                resolve(usbp.target[key], base)
    out = Path(raw.get("output", {}).get("dir", "out"))
    out = out if out.is_absolute() else base / out
    return ExperimentConfig(path, raw, model, grid, rho0, rhoT, solver, simulation, out, stages, suites, usbp)
