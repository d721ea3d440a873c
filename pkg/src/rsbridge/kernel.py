"""Transition kernels discretized on a grid.

``Kernel.values[i, k, j, l]`` is the density in y of moving from node k in
regime i at time t to node l in regime j at time s.  Analytic constructors
cover constant-coefficient references (optionally with constant-shift
jumps, constant switching, killing); general models are estimated by
Monte Carlo in :func:`kernel_mc`.

Three discretizations of an analytic density are offered:

``point``
    density evaluated at the node (spectrally accurate composition when the
    kernel is wide compared to the spacing).
``cell``
    average of the density over the cell of the node (exact mass in the
    grid at every time lag, comparable to binned Monte Carlo).
``hat``
    average against the piecewise-linear hat function of the node (exact
    mass, and integrals against node values act on the piecewise-linear
    interpolant, which keeps potentials smooth enough for second-order
    finite differences).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm
from scipy.special import ndtr
from scipy.stats import poisson

from .errors import ConfigError, ModelError, NumericError, UnsupportedModelError
from .expr import CoefficientExpr
from .grid import Grid
from .model import ModelSpec, RegimeSet
from .quadrature import adaptive_simpson

MAGIC = b"RSBKERN\x00"
FORMAT_VERSION = 1
QUADRATURES = ("point", "cell", "hat")


@dataclass
class Kernel:
    """Discretized transition density between times t and s."""

    grid: Grid
    regimes: RegimeSet
    t: float
    s: float
    values: NDArray
    provenance: dict[str, Any] = field(default_factory=lambda: {"kind": "analytic"})
    leak: NDArray | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        S, n = self.regimes.count, self.grid.size
        self.values = np.asarray(self.values, dtype=float).reshape(S, n, S, n)
        if self.s < self.t:
            raise ConfigError("kernel end time precedes its start time")

    @property
    def n_regimes(self) -> int:
        return self.regimes.count

    @property
    def matrix(self) -> NDArray:
        """Values as an (S*n, S*n) matrix, rows are (regime, start node)."""
        m = self.n_regimes * self.grid.size
        return self.values.reshape(m, m)

    def row_mass(self) -> NDArray:
        """Mass sum_j sum_y p w_y for every start (i, x), shape (S, n)."""
        return np.einsum("ikjl,l->ik", self.values, self.grid.weights)

    def block(self, i: int, j: int) -> NDArray:
        return self.values[i, :, j, :]

    def with_values(self, values: NDArray, **provenance) -> "Kernel":
        prov = dict(self.provenance)
        prov.update(provenance)
        return Kernel(self.grid, self.regimes, self.t, self.s, values, prov, self.leak, self.flags)


# ---------------------------------------------------------------- 1-D profiles


def _cell_profile(u: NDArray, sd: float, h: float) -> NDArray:
    """Average over [u - h/2, u + h/2] of the N(0, sd^2) density, evaluated stably."""
    a = np.abs(u)
    if sd == 0:
        return np.where(a < h / 2, 1.0 / h, np.where(np.isclose(a, h / 2), 0.5 / h, 0.0))
    return (ndtr((h / 2 - a) / sd) - ndtr((-h / 2 - a) / sd)) / h


def _g1(v: NDArray) -> NDArray:
    """Antiderivative of the normal cdf: v Phi(v) + phi(v)."""
    return v * ndtr(v) + np.exp(-0.5 * v * v) / np.sqrt(2 * np.pi)


def _hat_profile(u: NDArray, sd: float, h: float) -> NDArray:
    """(1/h) times the integral of N(u', 0, sd^2) against the unit hat of half-width h centred at u."""
    a = np.abs(u)
    if sd == 0:
        return np.maximum(0.0, 1.0 - a / h) / h
    val = sd / (h * h) * (_g1((h - a) / sd) - 2.0 * _g1(-a / sd) + _g1((-h - a) / sd))
    return np.maximum(val, 0.0)


def _point_density(u: NDArray, cov: NDArray) -> NDArray:
    d = cov.shape[0]
    inv = np.linalg.inv(cov)
    det = np.linalg.det(cov)
    quad = np.einsum("...i,ij,...j->...", u, inv, u)
    return np.exp(-0.5 * quad) / np.sqrt((2 * np.pi) ** d * det)


def gaussian_profile(u: NDArray, cov: NDArray, h: NDArray, quadrature: str) -> NDArray:
    """Discretized N(0, cov) density at displacements ``u`` of shape (m, d)."""
    if quadrature == "point":
        if np.linalg.det(cov) <= 0:
            raise NumericError("singular covariance in a point-evaluated Gaussian kernel")
        return _point_density(u, cov)
    if quadrature not in QUADRATURES:
        raise ConfigError(f"unknown kernel quadrature {quadrature!r}")
    if np.any(np.abs(cov - np.diag(np.diag(cov))) > 0):
        raise UnsupportedModelError("cell and hat quadrature need a diagonal covariance")
    prof = _cell_profile if quadrature == "cell" else _hat_profile
    out = np.ones(u.shape[0])
    for a in range(u.shape[1]):
        out = out * prof(u[:, a], float(np.sqrt(cov[a, a])), float(h[a]))
    return out


# ---------------------------------------------------------------- translation-invariant densities


@lru_cache(maxsize=16)
def _offset_table(grid: Grid) -> tuple[NDArray, NDArray]:
    """All node displacements y - x and, for every (x, y) pair, the index of its displacement."""
    shape = np.array(grid.shape)
    ranges = [np.arange(-(n - 1), n) for n in grid.shape]
    mesh = np.meshgrid(*ranges, indexing="ij")
    steps = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    displacements = steps * grid.h
    multi = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=-1)
    diff = multi[None, :, :] - multi[:, None, :] + (shape - 1)
    index = np.ravel_multi_index(tuple(np.moveaxis(diff, -1, 0)), tuple(2 * shape - 1))
    return displacements, index


def _poisson_cutoff(mean: float, tail: float) -> int:
    """Smallest n with P(N > n) < tail for N ~ Poisson(mean)."""
    n = int(mean)
    while poisson.sf(n, mean) >= tail:
        n += 1
    return n


def poisson_mixture(rates: NDArray, shifts: NDArray, tau: float, tail: float = 1e-17) -> list[tuple[float, NDArray]]:
    """(probability, total shift) for every jump-count vector with non-negligible probability."""
    rates = np.asarray(rates, float)
    d = shifts.shape[1] if shifts.ndim == 2 else 1
    if rates.size == 0 or tau == 0:
        return [(1.0, np.zeros(d))]
    counts = [range(_poisson_cutoff(r * tau, tail) + 1) if r > 0 else range(1) for r in rates]
    terms = []
    for ns in product(*counts):
        p = float(np.prod([poisson.pmf(n, r * tau) for n, r in zip(ns, rates)]))
        if p < tail:
            continue
        terms.append((p, np.asarray(ns, float) @ shifts))
    return terms


def jump_diffusion_profile(
    displacements: NDArray,
    tau: float,
    drift: NDArray,
    cov: NDArray,
    shifts: NDArray,
    rates: NDArray,
    h: NDArray,
    quadrature: str,
) -> NDArray:
    """Discretized density of X_s - X_t for constant drift, covariance and constant-shift jumps.

    ``drift`` must already include any small-jump compensation.
    """
    d = displacements.shape[1]
    if tau == 0:
        if quadrature == "point":
            raise NumericError("point kernels need a positive time lag")
        return gaussian_profile(displacements, np.zeros((d, d)), h, quadrature)
    out = np.zeros(displacements.shape[0])
    for p, shift in poisson_mixture(rates, shifts.reshape(len(rates), d), tau):
        out += p * gaussian_profile(displacements - drift * tau - shift, cov * tau, h, quadrature)
    return out


@dataclass(frozen=True)
class ConstantCoefficients:
    """Constant drift/diffusion with constant-shift jumps: a translation-invariant reference."""

    drift: NDArray
    sigma: NDArray
    shifts: NDArray = field(default_factory=lambda: np.zeros((0, 1)))
    rates: NDArray = field(default_factory=lambda: np.zeros(0))
    compensate_small: bool = False
    radius: float = 1.0

    @property
    def cov(self) -> NDArray:
        s = np.atleast_2d(self.sigma)
        return s @ s.T

    @property
    def effective_drift(self) -> NDArray:
        b = np.atleast_1d(np.asarray(self.drift, float))
        if self.compensate_small and self.rates.size:
            small = np.linalg.norm(self.shifts, axis=1) <= self.radius
            b = b - (self.rates[small, None] * self.shifts[small]).sum(axis=0)
        return b

    def profile(self, displacements: NDArray, tau: float, h: NDArray, quadrature: str) -> NDArray:
        return jump_diffusion_profile(
            displacements, tau, self.effective_drift, self.cov, self.shifts, self.rates, h, quadrature
        )

    def matrix(self, grid: Grid, tau: float, quadrature: str) -> NDArray:
        """(n, n) matrix of kernel values between nodes for a time lag ``tau``."""
        displacements, index = _offset_table(grid)
        return self.profile(displacements, tau, grid.h, quadrature)[index]


def constant_coefficients(model: ModelSpec, regime: int = 0) -> ConstantCoefficients:
    """Extract constant coefficients of one regime; reject models that are not translation invariant."""
    cc = model.constant_coefficients(regime)
    if cc is None:
        raise UnsupportedModelError("analytic kernels need constant drift and diffusion")
    shifts = np.zeros((model.jumps.count, model.d))
    for k in range(model.jumps.count):
        comps = model.jump_amplitude[regime]
        scope = {f"z{m + 1}": model.jumps.atoms[k, m] for m in range(model.jumps.jump_dim)}
        for a, c in enumerate(comps):
            if c.depends_on("t", *[f"x{m + 1}" for m in range(model.d)]):
                raise UnsupportedModelError("analytic kernels need constant-shift jumps")
            shifts[k, a] = float(c.evaluate(scope))
    return ConstantCoefficients(cc[0], cc[1], shifts, model.jumps.weights.copy(), model.jumps.compensate_small, model.jumps.radius)


# ---------------------------------------------------------------- constructors


def identity_kernel(grid: Grid, regimes: RegimeSet, t: float) -> Kernel:
    """Unit mass in the cell of the start node, same regime."""
    S, n = regimes.count, grid.size
    values = np.zeros((S, n, S, n))
    for i in range(S):
        values[i, :, i, :] = np.eye(n) / grid.weights
    return Kernel(grid, regimes, t, t, values, {"kind": "identity"})


def kernel_gaussian(
    grid: Grid,
    t: float,
    s: float,
    drift: Sequence[float] | float,
    sigma,
    quadrature: str = "point",
) -> Kernel:
    """Single-regime Gaussian kernel with mean x + b (s - t) and covariance sigma sigma^T (s - t)."""
    if not s > t:
        raise ConfigError("kernel_gaussian needs s > t")
    ref = ConstantCoefficients(np.atleast_1d(np.asarray(drift, float)), np.atleast_2d(np.asarray(sigma, float)))
    if np.linalg.det(ref.cov) <= 0:
        raise NumericError("singular covariance")
    values = ref.matrix(grid, s - t, quadrature)
    return Kernel(grid, RegimeSet.of_size(1), t, s, values, {"kind": "analytic", "family": "gaussian", "quadrature": quadrature})


def kernel_jump_diffusion(grid: Grid, t: float, s: float, ref: ConstantCoefficients, quadrature: str = "point") -> Kernel:
    """Single-regime kernel of a constant-coefficient diffusion with constant-shift compound Poisson jumps."""
    values = ref.matrix(grid, s - t, quadrature)
    return Kernel(grid, RegimeSet.of_size(1), t, s, values, {"kind": "analytic", "family": "jump-diffusion", "quadrature": quadrature})


def kernel_regime_product(base: Kernel, rates: NDArray, regimes: RegimeSet | None = None) -> Kernel:
    """Couple a single-regime kernel with an independent constant-rate regime chain.

    Valid when every regime has the same spatial dynamics and switching does
    not move X: then p_ij = P_ij(s - t) p.
    """
    if base.n_regimes != 1:
        raise ConfigError("kernel_regime_product needs a single-regime base kernel")
    q = np.array(rates, dtype=float)
    np.fill_diagonal(q, 0.0)
    if np.any(q < 0):
        raise ModelError("negative switching rate")
    np.fill_diagonal(q, -q.sum(axis=1))
    P = expm(q * (base.s - base.t))
    S = q.shape[0]
    regimes = regimes or RegimeSet.of_size(S)
    values = P[:, None, :, None] * base.values[0, :, 0, :][None, :, None, :]
    prov = dict(base.provenance, regime_product=q.tolist())
    return Kernel(base.grid, regimes, base.t, base.s, values, prov)


def integrated_rate(V: CoefficientExpr, t: float, s: float, tol: float = 1e-10) -> float:
    """Integral of a nonnegative rate V(r) over [t, s] by adaptive Simpson."""

    def f(r):
        v = float(V.evaluate(t=r))
        if v < 0:
            raise ModelError(f"negative killing rate {v} at t={r}")
        return v

    if V.is_constant:
        return f(t) * (s - t)
    return float(adaptive_simpson(f, t, s, tol))


def kernel_killing(base: Kernel, V: CoefficientExpr, tol: float = 1e-10) -> Kernel:
    """Scale a conservative single-regime kernel by exp(-int_t^s V)."""
    if base.n_regimes != 1:
        raise ConfigError("kernel_killing needs a single-regime base kernel")
    factor = np.exp(-integrated_rate(V, base.t, base.s, tol))
    k = base.with_values(base.values * factor, killing=str(V))
    return k


def kernel_analytic(model: ModelSpec, grid: Grid, t: float, s: float, quadrature: str = "point") -> Kernel:
    """Analytic kernel for translation-invariant models.

    Supported: constant drift/diffusion and constant-shift jumps, identical
    across regimes, with constant switching rates and identity hybrid maps.
    Other models raise UnsupportedModelError (use :func:`kernel_mc`).
    """
    if model.d != grid.d:
        raise ConfigError("model and grid dimensions differ")
    ref = constant_coefficients(model, 0)
    for i in range(1, model.n_regimes):
        other = constant_coefficients(model, i)
        if not (np.array_equal(other.drift, ref.drift) and np.array_equal(other.sigma, ref.sigma) and np.array_equal(other.shifts, ref.shifts)):
            raise UnsupportedModelError("analytic multi-regime kernels need identical dynamics in every regime")
    if not model.identity_hybrid:
        raise UnsupportedModelError("analytic multi-regime kernels need identity hybrid maps")
    base = kernel_jump_diffusion(grid, t, s, ref, quadrature)
    if model.n_regimes == 1:
        base.provenance["model"] = model.describe()
        return base
    S = model.n_regimes
    rates = np.zeros((S, S))
    x0 = np.zeros((1, model.d))
    for i in range(S):
        for j in range(S):
            if i != j:
                if not model.rates[i][j].is_constant:
                    raise UnsupportedModelError("analytic multi-regime kernels need constant rates")
                rates[i, j] = model.rate_at(0.0, x0, i, j)[0]
    k = kernel_regime_product(base, rates, model.regimes)
    k.provenance["model"] = model.describe()
    return k


LEAK_WARNING = 0.05


def kernel_mc(
    model: ModelSpec,
    grid: Grid,
    t: float,
    s: float,
    paths_per_node: int,
    dt: float,
    seed: int,
    *,
    min_paths: int = 1000,
) -> Kernel:
    """Monte Carlo kernel: bin the endpoints of reference paths started at every node.

    Start row (i, k) uses its own random stream, so rows are independent and
    reproducible individually.  Paths ending outside the grid are recorded in
    ``leak`` (fraction per start row) and flag the kernel when any row
    loses more than 5%.
    """
    from .simulate import RngStream, simulate_reference, worker_count
    from . import _core
    from concurrent.futures import ThreadPoolExecutor

    if paths_per_node < min_paths:
        raise ConfigError(f"kernel_mc needs at least {min_paths} paths per node")
    if model.d != grid.d:
        raise ConfigError("model and grid dimensions differ")
    if not s > t:
        raise ConfigError("kernel_mc needs s > t")
    S, n = model.n_regimes, grid.size
    nodes = grid.nodes

    def row(item):
        i, k = item
        rng = RngStream(seed, i * n + k)
        batch = simulate_reference(model, (nodes[k], i), dt, rng, paths_per_node, record=False, t0=t, t1=s)
        counts, leak = _core.bin_points(batch.x_final, batch.regime_final, grid.lower, grid.h, grid.shape, S)
        return counts, leak

    items = [(i, k) for i in range(S) for k in range(n)]
    workers = min(worker_count(), len(items))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(row, items))
    else:
        results = [row(it) for it in items]
    values = np.empty((S, n, S, n))
    leak = np.empty((S, n))
    for (i, k), (counts, lk) in zip(items, results):
        values[i, k] = counts / (paths_per_node * grid.weights)
        leak[i, k] = lk / paths_per_node
    flags = ("leak",) if np.any(leak > LEAK_WARNING) else ()
    prov = {
        "kind": "monte-carlo",
        "paths": paths_per_node,
        "bandwidth": grid.h.tolist(),
        "dt": dt,
        "seed": seed,
        "model": model.describe(),
    }
    return Kernel(grid, model.regimes, t, s, values, prov, leak, flags)


def compose(K1: Kernel, K2: Kernel) -> Kernel:
    """Chapman-Kolmogorov composition: sum over intermediate regimes and nodes with quadrature weights."""
    if K1.grid != K2.grid or K1.regimes != K2.regimes:
        raise ConfigError("cannot compose kernels on different grids or regime sets")
    if not np.isclose(K1.s, K2.t, rtol=0, atol=1e-12):
        raise ConfigError(f"kernel times do not chain: {K1.s} vs {K2.t}")
    w = np.tile(K1.grid.weights, K1.n_regimes)
    values = (K1.matrix * w[None, :]) @ K2.matrix
    return Kernel(K1.grid, K1.regimes, K1.t, K2.s, values, {"kind": "composed", "parts": [K1.provenance.get("kind"), K2.provenance.get("kind")]})


def l1_distance(K1: Kernel, K2: Kernel) -> NDArray:
    """Per start (regime, node) L1 distance over (regime, y) between two kernels."""
    return np.einsum("ikjl,l->ik", np.abs(K1.values - K2.values), K1.grid.weights)


# ---------------------------------------------------------------- persistence


def content_hash(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def save_kernel(kernel: Kernel, path: str | Path, key: str | None = None) -> str:
    """Write the binary kernel format; returns the content hash stored in the header."""
    meta = {
        "grid": kernel.grid.describe(),
        "regimes": list(kernel.regimes.labels),
        "t": kernel.t,
        "s": kernel.s,
        "provenance": kernel.provenance,
        "flags": list(kernel.flags),
    }
    if kernel.leak is not None:
        meta["leak"] = kernel.leak.tolist()
    data = np.ascontiguousarray(kernel.values, dtype="<f8")
    digest = hashlib.sha256(json.dumps(meta, sort_keys=True, default=str).encode() + data.tobytes()).digest()
    if key is not None:
        digest = bytes.fromhex(key)
    meta_bytes = json.dumps(meta, sort_keys=True, default=str).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(data.tobytes())
    tmp.replace(path)
    return digest.hex()


def load_kernel(path: str | Path) -> Kernel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path} is not a kernel file")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported kernel format version {version}")
    pos = 12 + 32
    (ndim,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
    pos += 8 * ndim
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos:pos + meta_len])
    pos += meta_len
    count = int(np.prod(dims))
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(float)
    leak = np.asarray(meta["leak"]) if "leak" in meta else None
    return Kernel(
        Grid.from_description(meta["grid"]),
        RegimeSet(tuple(meta["regimes"])),
        float(meta["t"]),
        float(meta["s"]),
        values,
        meta["provenance"],
        leak,
        tuple(meta.get("flags", ())),
    )


def kernel_header_hash(path: str | Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(44)
    return head[12:44].hex()


class KernelCache:
    """Directory of kernels keyed by a content hash of their inputs."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.bin"

    def get_or_build(self, inputs: dict[str, Any], build: Callable[[], Kernel]) -> Kernel:
        key = content_hash(inputs)
        path = self.path(key)
        if path.exists():
            return load_kernel(path)
        kernel = build()
        save_kernel(kernel, path, key)
        return kernel
