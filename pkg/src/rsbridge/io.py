"""Plain-text tables and JSON documents for every artifact the CLI writes.

Floats are written with 17 significant digits so that values survive a
round trip exactly.  Column order is fixed per artifact kind.  JSON
documents carry a ``schema`` number.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError
from .grid import Grid, Marginal
from .model import RegimeSet
from .potentials import PotentialField
from .sinkhorn import BoundaryPotentials, ConvergenceReport
from .verify import ResidualReport

SCHEMA = 1


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    if not rows:
        raise ConfigError(f"{path} is empty")
    return [c.strip() for c in rows[0]], [r for r in rows[1:] if r]


def _coord_columns(d: int) -> list[str]:
    return [f"x{k + 1}" for k in range(d)]


def _node_index(grid: Grid, coords: NDArray, path) -> NDArray:
    """Map coordinates to node indices; every row must sit on a node."""
    idx = np.rint((coords - (grid.lower + 0.5 * grid.h)) / grid.h).astype(np.int64)
    shape = np.array(grid.shape)
    if np.any(idx < 0) or np.any(idx >= shape):
        raise ConfigError(f"{path}: coordinates outside the grid")
    back = grid.lower + (idx + 0.5) * grid.h
    if np.any(np.abs(back - coords) > 1e-6 * grid.h):
        raise ConfigError(f"{path}: coordinates are not grid nodes")
    return np.ravel_multi_index(tuple(idx.T), grid.shape)


# ---------------------------------------------------------------- marginals


def write_marginal(marginal: Marginal, path: str | Path) -> None:
    """Columns regime, x1..xd, density (regimes by label)."""
    grid = marginal.grid
    dens = marginal.density
    rows = []
    for i, label in enumerate(marginal.regimes.labels):
        for k in range(grid.size):
            rows.append([label, *map(float, grid.nodes[k]), float(dens[i, k])])
    _write_rows(path, ["regime", *_coord_columns(grid.d), "density"], rows)


def read_marginal(path: str | Path, grid: Grid, regimes: RegimeSet) -> Marginal:
    """Read a marginal with a ``density`` or a ``weight`` (mass) column.

    Nodes absent from the file carry no mass.
    """
    header, rows = _read_rows(path)
    coords = _coord_columns(grid.d)
    if "regime" not in header or any(c not in header for c in coords):
        raise ConfigError(f"{path}: expected columns regime,{','.join(coords)} and density or weight")
    if "density" in header:
        value_col, is_density = header.index("density"), True
    elif "weight" in header:
        value_col, is_density = header.index("weight"), False
    else:
        raise ConfigError(f"{path}: no density or weight column")
    ri = header.index("regime")
    ci = [header.index(c) for c in coords]
    mass = np.zeros((regimes.count, grid.size))
    if rows:
        try:
            reg = np.array([regimes.index(r[ri].strip()) for r in rows])
            xs = np.array([[float(r[c]) for c in ci] for r in rows])
            vals = np.array([float(r[value_col]) for r in rows])
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"{path}: malformed row ({exc})") from None
        nodes = _node_index(grid, xs, path)
        if is_density:
            vals = vals * grid.weights[nodes]
        np.add.at(mass, (reg, nodes), vals)
    return Marginal(grid, regimes, mass)


# ---------------------------------------------------------------- potentials


def write_potentials(phi: PotentialField, phihat: PotentialField, path: str | Path) -> None:
    """Columns t, regime, x1..xd, phi, phihat on the common slices."""
    grid = phi.grid
    if not np.allclose(phi.times, phihat.times):
        raise ConfigError("phi and phihat must share slice times")
    rows = []
    for m, t in enumerate(phi.times):
        for i, label in enumerate(phi.regimes.labels):
            for k in range(grid.size):
                rows.append([float(t), label, *map(float, grid.nodes[k]), float(phi.values[m, i, k]), float(phihat.values[m, i, k])])
    _write_rows(path, ["t", "regime", *_coord_columns(grid.d), "phi", "phihat"], rows)


def boundary_fields(pot: BoundaryPotentials, T: float) -> tuple[PotentialField, PotentialField]:
    """Two-slice fields at 0 and T from a static solution (phihat at 0 as a density)."""
    w = pot.grid.weights
    phi = PotentialField(pot.grid, pot.regimes, [0.0, T], np.stack([pot.phi0, pot.phiT]), "phi", dict(pot.meta))
    phihat = PotentialField(pot.grid, pot.regimes, [0.0, T], np.stack([pot.phihat0 / w, pot.phihatT]), "phihat", dict(pot.meta))
    return phi, phihat


def read_potentials(path: str | Path, grid: Grid, regimes: RegimeSet) -> tuple[PotentialField, PotentialField]:
    header, rows = _read_rows(path)
    coords = _coord_columns(grid.d)
    need = ["t", "regime", *coords, "phi", "phihat"]
    if any(c not in header for c in need):
        raise ConfigError(f"{path}: expected columns {','.join(need)}")
    col = {c: header.index(c) for c in need}
    try:
        t = np.array([float(r[col["t"]]) for r in rows])
        reg = np.array([regimes.index(r[col["regime"]].strip()) for r in rows])
        xs = np.array([[float(r[col[c]]) for c in coords] for r in rows])
        a = np.array([float(r[col["phi"]]) for r in rows])
        b = np.array([float(r[col["phihat"]]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed row ({exc})") from None
    times = np.unique(t)
    nodes = _node_index(grid, xs, path)
    m = np.searchsorted(times, t)
    phi = np.zeros((times.size, regimes.count, grid.size))
    phihat = np.zeros_like(phi)
    phi[m, reg, nodes] = a
    phihat[m, reg, nodes] = b
    return PotentialField(grid, regimes, times, phi, "phi"), PotentialField(grid, regimes, times, phihat, "phihat")


def write_marginal_flow(phi: PotentialField, phihat: PotentialField, path: str | Path) -> None:
    """Bridge marginals phi * phihat per slice: columns t, regime, x1..xd, density."""
    grid = phi.grid
    rows = []
    for m, t in enumerate(phi.times):
        dens = phi.values[m] * phihat.values[m]
        for i, label in enumerate(phi.regimes.labels):
            for k in range(grid.size):
                rows.append([float(t), label, *map(float, grid.nodes[k]), float(dens[i, k])])
    _write_rows(path, ["t", "regime", *_coord_columns(grid.d), "density"], rows)


# ---------------------------------------------------------------- reports


def write_convergence(report: ConvergenceReport, path: str | Path) -> None:
    _write_rows(path, ["iter", "residual"], ([k + 1, float(r)] for k, r in enumerate(report.residuals)))


def write_json(payload: dict[str, Any], path: str | Path) -> None:
    atomic_write_text(path, json.dumps({"schema": SCHEMA, **payload}, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return str(v)


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    _write_rows(path, header, rows)


def emit_table(artifact: Any, path: str | Path, format: str = "csv") -> Path:
    """Write an artifact as CSV or JSON, choosing the layout from its type.

    Supported: Marginal, ConvergenceReport, ResidualReport (JSON only),
    a (phi, phihat) pair of PotentialFields, and plain dicts (JSON only).
    """
    path = Path(path)
    if format not in ("csv", "json"):
        raise ConfigError(f"unknown format {format!r}")
    if format == "json":
        if isinstance(artifact, ConvergenceReport):
            write_json({"kind": "convergence", **artifact.to_dict()}, path)
        elif isinstance(artifact, ResidualReport):
            write_json({"kind": "residual", **artifact.to_dict()}, path)
        elif isinstance(artifact, Marginal):
            write_json({"kind": "marginal", "grid": artifact.grid.describe(), "regimes": list(artifact.regimes.labels), "mass": artifact.mass}, path)
        elif isinstance(artifact, dict):
            write_json(artifact, path)
        else:
            raise ConfigError(f"unknown artifact type {type(artifact).__name__}")
        return path
    if isinstance(artifact, Marginal):
        write_marginal(artifact, path)
    elif isinstance(artifact, ConvergenceReport):
        write_convergence(artifact, path)
    elif isinstance(artifact, tuple) and len(artifact) == 2 and all(isinstance(a, PotentialField) for a in artifact):
        write_potentials(artifact[0], artifact[1], path)
    else:
        raise ConfigError(f"artifact type {type(artifact).__name__} has no CSV layout")
    return path
