"""Path simulation of the reference, controlled and bridge processes.

The scheme is Euler-Maruyama for the continuous part with per-step thinning
for jumps and regime switches: within a step at most one jump atom and one
switch fire, with probabilities rate * dt.  Every coefficient of a step is
evaluated at the pre-step state, so

    x_{k+1} = x_k + drift dt + sigma dB + gamma(z) + (psi_ij(x_k) - x_k).

Paths are simulated in fixed blocks; block b of a run seeded by
``RngStream(seed, stream)`` draws from its own generator, so results do not
depend on the number of worker threads.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import xlogy

from . import _core
from .errors import ConfigError, DomainError, NumericError
from .expr import CoefficientExpr, parse_coefficient
from .grid import Grid, Marginal
from .model import ModelSpec, switch_targets

BLOCK = 8192
_START_KEY = 2**31 - 1
MAX_EVENT_PROBABILITY = 0.1


def worker_count() -> int:
    """Worker threads allowed by ``RB_THREADS`` (default 1)."""
    try:
        n = int(os.environ.get("RB_THREADS", "1"))
    except ValueError:
        raise ConfigError("RB_THREADS must be an integer") from None
    return max(1, n)


@dataclass(frozen=True)
class RngStream:
    """A seeded random stream; ``generator(*key)`` derives independent children."""

    seed: int
    stream: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.stream < 0:
            raise ConfigError("seed and stream id must be nonnegative")

    def generator(self, *key: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *key))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)


# ---------------------------------------------------------------- controls


class ControlTriple:
    """Girsanov controls (u, theta, xi).

    ``evaluate(t, x, i)`` returns for the n points ``x`` in regime i:
    u of shape (n, d), theta of shape (n, atoms), xi of shape (n, S) and a
    boolean validity mask.  This base class is the identity triple.
    """

    def __init__(self, d: int, n_atoms: int, n_regimes: int):
        self.d = d
        self.n_atoms = n_atoms
        self.n_regimes = n_regimes

    @classmethod
    def identity(cls, model: ModelSpec) -> "ControlTriple":
        return cls(model.d, model.jumps.count, model.n_regimes)

    def evaluate(self, t: float, x: NDArray, i: int):
        n = x.shape[0]
        return (
            np.zeros((n, self.d)),
            np.zeros((n, self.n_atoms)),
            np.ones((n, self.n_regimes)),
            np.ones(n, dtype=bool),
        )


class ExprControls(ControlTriple):
    """Controls given by coefficient expressions.

    ``drift`` maps regime -> d expressions, ``jump`` maps regime -> one
    expression per atom, ``switch`` maps (i, j) -> expression.  Missing
    entries take identity values.
    """

    def __init__(
        self,
        model: ModelSpec,
        drift: Mapping[int, Sequence[str | float | CoefficientExpr]] | None = None,
        jump: Mapping[int, Sequence[str | float | CoefficientExpr]] | None = None,
        switch: Mapping[tuple[int, int], str | float | CoefficientExpr] | None = None,
        params: Mapping[str, float] | None = None,
    ):
        super().__init__(model.d, model.jumps.count, model.n_regimes)
        self.model = model
        params = {**model.params, **(params or {})}

        def parse(v):
            if isinstance(v, CoefficientExpr):
                return v
            return parse_coefficient(str(v), d=model.d, params=params)

        self.drift = {i: [parse(v) for v in vs] for i, vs in (drift or {}).items()}
        self.jump = {i: [parse(v) for v in vs] for i, vs in (jump or {}).items()}
        self.switch = {k: parse(v) for k, v in (switch or {}).items()}
        for i, vs in self.drift.items():
            if len(vs) != self.d:
                raise ConfigError(f"drift control for regime {i + 1} needs {self.d} components")
        for i, vs in self.jump.items():
            if len(vs) != self.n_atoms:
                raise ConfigError(f"jump control for regime {i + 1} needs one entry per atom")

    def evaluate(self, t, x, i):
        u, theta, xi, valid = super().evaluate(t, x, i)
        n = x.shape[0]
        scope = self.model.env(t, x)
        for k, e in enumerate(self.drift.get(i, ())):
            u[:, k] = np.broadcast_to(e.evaluate(scope), (n,))
        for a, e in enumerate(self.jump.get(i, ())):
            theta[:, a] = np.broadcast_to(e.evaluate(scope), (n,))
        for (src, j), e in self.switch.items():
            if src == i:
                xi[:, j] = np.broadcast_to(e.evaluate(scope), (n,))
        return u, theta, xi, valid


class GridControls(ControlTriple):
    """Controls sampled on time slices x grid nodes x regimes.

    Fields are interpolated linearly in time and (multi)linearly in space;
    points outside the grid use the nearest edge values.  A point is valid
    when some node of its stencil carries a valid value.  With
    ``freeze_after`` set, evaluation times are capped at that time.
    """

    def __init__(
        self,
        grid: Grid,
        times: NDArray,
        drift: NDArray,
        jump: NDArray,
        switch: NDArray,
        valid: NDArray | None = None,
        freeze_after: float | None = None,
    ):
        times = np.asarray(times, dtype=float)
        M, S, n = times.size, switch.shape[1], grid.size
        d, A = drift.shape[-1], jump.shape[-1]
        super().__init__(d, A, S)
        if drift.shape != (M, S, n, d) or jump.shape != (M, S, n, A) or switch.shape != (M, S, n, S):
            raise ConfigError("control field shapes do not match the slices and grid")
        self.grid = grid
        self.times = times
        self.fields = (drift, jump, switch)
        self.valid_field = np.ones((M, S, n), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        self.freeze_after = freeze_after
        channels = [np.moveaxis(drift, -1, 2), np.moveaxis(jump, -1, 2), np.moveaxis(switch, -1, 2)]
        channels.append(self.valid_field[:, :, None, :].astype(float))
        table = np.concatenate(channels, axis=2)  # (M, S, C, n)
        self.n_channels = table.shape[2]
        # invalid nodes hold NaN-free placeholders so that interpolation stays finite
        self.table = np.nan_to_num(table.reshape(-1, n), nan=0.0, posinf=0.0, neginf=0.0)

    def with_freeze(self, freeze_after: float | None) -> "GridControls":
        drift, jump, switch = self.fields
        return GridControls(self.grid, self.times, drift, jump, switch, self.valid_field, freeze_after)

    def _slice_weights(self, t: float) -> tuple[int, float]:
        if self.freeze_after is not None:
            t = min(t, self.freeze_after)
        m = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
        lam = (t - self.times[m]) / (self.times[m + 1] - self.times[m])
        return m, float(np.clip(lam, 0.0, 1.0))

    def _at_slice(self, m: int, x: NDArray, i: int) -> NDArray:
        n, C, S = x.shape[0], self.n_channels, self.n_regimes
        rows = ((m * S + i) * C + np.arange(C))[None, :].repeat(n, axis=0).reshape(-1)
        pts = np.repeat(x, C, axis=0)
        g = self.grid
        vals = _core.interp_rows(self.table, rows, pts, g.lower + 0.5 * g.h, g.h, g.shape, order=1, clamp=True)
        return vals.reshape(n, C)

    def evaluate(self, t, x, i):
        m, lam = self._slice_weights(t)
        vals = self._at_slice(m, x, i)
        if lam > 0.0:
            vals = (1.0 - lam) * vals + lam * self._at_slice(m + 1, x, i)
        d, A = self.d, self.n_atoms
        u = vals[:, :d]
        theta = vals[:, d : d + A]
        xi = vals[:, d + A : d + A + self.n_regimes]
        valid = vals[:, -1] > 0.0
        return u, theta, xi, valid

    def perturbed(self, drift_shift: NDArray | float = 0.0, jump_scale: float = 1.0, switch_scale: float = 1.0) -> "GridControls":
        """Admissible perturbation: u + shift, 1 - theta scaled, xi scaled (scales > 0)."""
        if jump_scale <= 0 or switch_scale <= 0:
            raise ConfigError("perturbation scales must be positive")
        drift, jump, switch = self.fields
        return GridControls(
            self.grid,
            self.times,
            drift + drift_shift,
            1.0 - (1.0 - jump) * jump_scale,
            switch * switch_scale,
            self.valid_field,
            self.freeze_after,
        )


def check_control_domain(theta: NDArray, xi: NDArray, i: int) -> None:
    if np.any(theta >= 1.0):
        raise DomainError("jump control theta must stay below 1")
    off = np.delete(xi, i, axis=1)
    if np.any(off <= 0.0):
        raise DomainError("switch control xi must be positive")


# ---------------------------------------------------------------- paths


@dataclass
class SamplePath:
    """One trajectory with its driving-noise record.

    ``x[k]``/``regime[k]`` is the state at ``times[k]`` after the events of
    step k-1.  ``jump_atom[k]`` and ``switch_mark[k]`` record the jump atom
    (-1 for none) and switching mark (NaN for none) accepted in step k.
    """

    path_id: int
    times: NDArray
    x: NDArray
    regime: NDArray
    dB: NDArray
    jump_atom: NDArray
    switch_mark: NDArray
    rejected: bool = False

    @property
    def events(self) -> list[tuple[float, str, object]]:
        out: list[tuple[float, str, object]] = []
        for k in range(self.times.size - 1):
            t = float(self.times[k + 1])
            out.append((t, "diffstep", None))
            if self.jump_atom[k] >= 0:
                out.append((t, "jump", int(self.jump_atom[k])))
            if not np.isnan(self.switch_mark[k]):
                out.append((t, "switch", (int(self.regime[k]), int(self.regime[k + 1]), float(self.switch_mark[k]))))
        return out

    def killing_time(self, dead: int) -> float:
        """First time the path sits in regime ``dead`` (inf if never)."""
        hit = np.flatnonzero(self.regime == dead)
        return float(self.times[hit[0]]) if hit.size else math.inf


@dataclass
class PathBatch:
    """A batch of paths.  Full arrays are present only when recorded."""

    times: NDArray
    x_final: NDArray
    regime_final: NDArray
    rejected: NDArray
    x: NDArray | None = None
    regime: NDArray | None = None
    dB: NDArray | None = None
    jump_atom: NDArray | None = None
    switch_steps: NDArray | None = None  # (m, 2): path, step
    switch_marks: NDArray | None = None  # (m,)
    snapshots: dict[int, tuple[NDArray, NDArray]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.x_final.shape[0]

    @property
    def recorded(self) -> bool:
        return self.x is not None

    def _require_record(self) -> None:
        if not self.recorded:
            raise ValueError("the batch was simulated without a path record")

    def mark_array(self) -> NDArray:
        self._require_record()
        marks = np.full(self.jump_atom.shape, np.nan)
        if self.switch_steps.size:
            marks[self.switch_steps[:, 0], self.switch_steps[:, 1]] = self.switch_marks
        return marks

    def path(self, n: int) -> SamplePath:
        self._require_record()
        marks = self.mark_array()[n]
        return SamplePath(
            n,
            self.times,
            self.x[n],
            self.regime[n],
            self.dB[n],
            self.jump_atom[n],
            marks,
            bool(self.rejected[n]),
        )

    def state_at(self, t: float) -> tuple[NDArray, NDArray]:
        """States at a recorded snapshot or path time."""
        k = _step_of(self.times, t)
        if k in self.snapshots:
            return self.snapshots[k]
        if k == self.times.size - 1:
            return self.x_final, self.regime_final
        self._require_record()
        return self.x[:, k], self.regime[:, k]

    @classmethod
    def concatenate(cls, parts: Sequence["PathBatch"]) -> "PathBatch":
        first = parts[0]
        offsets = np.cumsum([0] + [p.size for p in parts[:-1]])

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if vals[0] is None else np.concatenate(vals, axis=0)

        steps = None
        if first.recorded:
            steps = np.concatenate([p.switch_steps + np.array([off, 0]) for p, off in zip(parts, offsets)], axis=0)
        snaps = {
            k: (np.concatenate([p.snapshots[k][0] for p in parts]), np.concatenate([p.snapshots[k][1] for p in parts]))
            for k in first.snapshots
        }
        return cls(
            first.times,
            cat("x_final"),
            cat("regime_final"),
            cat("rejected"),
            cat("x"),
            cat("regime"),
            cat("dB"),
            cat("jump_atom"),
            steps,
            cat("switch_marks"),
            snaps,
        )


def _step_of(times: NDArray, t: float) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ConfigError(f"time {t} is not on the simulation grid")
    return k


def time_grid(t0: float, t1: float, dt: float) -> NDArray:
    if not dt > 0:
        raise ConfigError("dt must be positive")
    if not t1 > t0:
        raise ConfigError("the end time must follow the start time")
    K = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    return np.linspace(t0, t1, K + 1)


# ---------------------------------------------------------------- engine


def sample_start(start, n: int, rng: RngStream, d: int) -> tuple[NDArray, NDArray]:
    """Start states from (x0, i0), a Marginal (categorical over its masses)
    or explicit arrays (x (n, d), i (n,))."""
    if isinstance(start, Marginal):
        gen = rng.generator(_START_KEY)
        mass = start.mass.reshape(-1)
        total = mass.sum()
        if not total > 0:
            raise ConfigError("start marginal has no mass")
        pick = gen.choice(mass.size, size=n, p=mass / total)
        regime, node = np.divmod(pick, start.grid.size)
        return start.grid.nodes[node].copy(), regime.astype(np.int64)
    x0, i0 = start
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x = np.broadcast_to(x0.reshape(1, d), (n, d)).copy()
        return x, np.full(n, int(i0), dtype=np.int64)
    if x0.shape != (n, d):
        raise ConfigError("explicit start states must have shape (paths, d)")
    return x0.copy(), np.broadcast_to(np.asarray(i0, dtype=np.int64), (n,)).copy()


def _run_block(
    model: ModelSpec,
    x: NDArray,
    regime: NDArray,
    times: NDArray,
    gen: np.random.Generator,
    controls: ControlTriple | None,
    record: bool,
    snapshot_steps: Sequence[int],
    on_invalid: str,
) -> PathBatch:
    n, d = x.shape
    K = times.size - 1
    A = model.jumps.count
    weights = model.jumps.weights
    rejected = np.zeros(n, dtype=bool)
    if record:
        xs = np.empty((n, K + 1, d))
        rs = np.empty((n, K + 1), dtype=np.int16)
        dBs = np.empty((n, K, d))
        atoms = np.full((n, K), -1, dtype=np.int16)
        xs[:, 0], rs[:, 0] = x, regime
        sw_steps: list[NDArray] = []
        sw_marks: list[NDArray] = []
    snaps = {}
    if 0 in snapshot_steps:
        snaps[0] = (x.copy(), regime.copy())
    for k in range(K):
        t = times[k]
        h = times[k + 1] - t
        dB = gen.standard_normal((n, d)) * math.sqrt(h)
        u_jump = gen.random(n)
        u_switch = gen.random(n)
        dx = np.zeros((n, d))
        new_regime = regime.copy()
        for i in np.unique(regime[~rejected]):
            idx = np.flatnonzero((regime == i) & ~rejected)
            xi_ = x[idx]
            drift = model.drift_at(t, xi_, i) - model.compensator_at(t, xi_, i)
            sig = model.diffusion_at(t, xi_, i)
            jump_rates = np.broadcast_to(weights, (idx.size, A))
            switch_rates = model.rates_from(t, xi_, i) if model.has_switching else None
            if controls is not None:
                u, theta, xi, valid = controls.evaluate(t, xi_, i)
                if not np.all(valid):
                    if on_invalid == "raise":
                        raise DomainError(f"potential vanishes at a visited state (step {k}, regime {i + 1})")
                    rejected[idx[~valid]] = True
                    keep = valid
                    idx, xi_, drift, sig = idx[keep], xi_[keep], drift[keep], sig[keep]
                    u, theta, xi = u[keep], theta[keep], xi[keep]
                    if switch_rates is not None:
                        switch_rates = switch_rates[keep]
                drift = drift - np.einsum("nab,nb->na", sig, u)
                if A:
                    if np.any(theta >= 1.0):
                        raise DomainError("jump control theta must stay below 1")
                    jump_rates = weights * (1.0 - theta)
                if switch_rates is not None:
                    if np.any(np.delete(xi, i, axis=1) < 0.0):
                        raise DomainError("switch control xi must be nonnegative")
                    switch_rates = switch_rates * xi
                    switch_rates[:, i] = 0.0
            incr = drift * h + np.einsum("nab,nb->na", sig, dB[idx])
            if A:
                cum = np.cumsum(jump_rates * h, axis=1)
                if np.any(cum[:, -1] > 1.0):
                    raise NumericError(f"jump probability per step exceeds 1 at step {k}; reduce dt")
                if controls is None and np.any(cum[:, -1] > MAX_EVENT_PROBABILITY):
                    raise ConfigError(f"dt too large: jump probability per step above {MAX_EVENT_PROBABILITY}")
                fired = u_jump[idx] < cum[:, -1]
                which = np.where(fired, (u_jump[idx][:, None] >= cum).sum(axis=1), -1)
                for a in np.unique(which[fired]):
                    sel = which == a
                    incr[sel] += model.jump_at(t, xi_[sel], i, int(a))
                if record:
                    atoms[idx, k] = which
            if switch_rates is not None:
                total = switch_rates.sum(axis=1) * h
                if np.any(total > 1.0):
                    raise NumericError(f"switch probability per step exceeds 1 at step {k}; reduce dt")
                if controls is None and np.any(total > MAX_EVENT_PROBABILITY):
                    raise ConfigError(f"dt too large: switch probability per step above {MAX_EVENT_PROBABILITY}")
                w = u_switch[idx] / h
                target = switch_targets(model, t, xi_, i, w, rates=switch_rates)
                for j in np.unique(target[target >= 0]):
                    sel = target == j
                    if not model.identity_hybrid:
                        incr[sel] += model.hybrid_at(t, xi_[sel], i, int(j)) - xi_[sel]
                    new_regime[idx[sel]] = j
                if record:
                    hit = target >= 0
                    sw_steps.append(np.stack([idx[hit], np.full(hit.sum(), k)], axis=1))
                    sw_marks.append(w[hit])
            dx[idx] = incr
        x = x + dx
        regime = new_regime
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state at step {k + 1}")
        if record:
            xs[:, k + 1], rs[:, k + 1], dBs[:, k] = x, regime, dB
        if k + 1 in snapshot_steps:
            snaps[k + 1] = (x.copy(), regime.copy())
    batch = PathBatch(times, x, regime, rejected, snapshots=snaps)
    if record:
        batch.x, batch.regime, batch.dB, batch.jump_atom = xs, rs, dBs, atoms
        batch.switch_steps = np.concatenate(sw_steps, axis=0) if sw_steps else np.zeros((0, 2), dtype=np.int64)
        batch.switch_marks = np.concatenate(sw_marks) if sw_marks else np.zeros(0)
    return batch


def _simulate(
    model: ModelSpec,
    start,
    dt: float,
    rng: RngStream,
    n_paths: int,
    controls: ControlTriple | None,
    record: bool,
    t0: float,
    t1: float | None,
    snapshots: Sequence[float],
    on_invalid: str = "reject",
) -> PathBatch:
    if n_paths < 1:
        raise ConfigError("at least one path is required")
    times = time_grid(t0, model.horizon if t1 is None else t1, dt)
    steps = sorted({_step_of(times, s) for s in snapshots})
    x, regime = sample_start(start, n_paths, rng, model.d)
    if np.any((regime < 0) | (regime >= model.n_regimes)):
        raise ConfigError("start regime out of range")
    blocks = [(b, slice(b * BLOCK, min(n_paths, (b + 1) * BLOCK))) for b in range((n_paths + BLOCK - 1) // BLOCK)]

    def run(item):
        b, sl = item
        return _run_block(model, x[sl], regime[sl], times, rng.generator(b), controls, record, steps, on_invalid)

    workers = min(worker_count(), len(blocks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(item) for item in blocks]
    return parts[0] if len(parts) == 1 else PathBatch.concatenate(parts)


def simulate_reference(
    model: ModelSpec,
    start,
    dt: float,
    rng: RngStream,
    n_paths: int = 1,
    *,
    record: bool = True,
    t0: float = 0.0,
    t1: float | None = None,
    snapshots: Sequence[float] = (),
) -> PathBatch:
    """Simulate reference paths from ``start`` at ``t0`` to ``t1`` (default T)."""
    return _simulate(model, start, dt, rng, n_paths, None, record, t0, t1, snapshots)


def simulate_controlled(
    model: ModelSpec,
    controls: ControlTriple,
    start,
    dt: float,
    rng: RngStream,
    n_paths: int = 1,
    *,
    record: bool = True,
    t0: float = 0.0,
    t1: float | None = None,
    snapshots: Sequence[float] = (),
    on_invalid: str = "raise",
) -> PathBatch:
    """Simulate under the controlled law: drift b - sigma u, jump intensity
    (1 - theta) nu and switching rates xi Q."""
    return _simulate(model, start, dt, rng, n_paths, controls, record, t0, t1, snapshots, on_invalid)


def simulate_bridge(
    model: ModelSpec,
    controls: GridControls,
    start,
    dt: float,
    rng: RngStream,
    n_paths: int = 1,
    *,
    record: bool = False,
    snapshots: Sequence[float] = (),
    freeze_steps: int = 2,
    on_invalid: str = "reject",
) -> PathBatch:
    """Simulate the bridge from its optimal controls.

    Controls are frozen over the last ``freeze_steps`` steps, where the
    potential gradient may blow up for concentrated targets.  Paths reaching
    states where the potential vanishes are rejected and flagged in
    ``batch.rejected`` (or raise with ``on_invalid="raise"``).
    """
    if freeze_steps > 0:
        times = time_grid(0.0, model.horizon, dt)
        controls = controls.with_freeze(times[max(0, times.size - 1 - freeze_steps)])
    return _simulate(model, start, dt, rng, n_paths, controls, record, 0.0, None, snapshots, on_invalid)


# ---------------------------------------------------------------- weights


def _as_batch(path) -> tuple[PathBatch, bool]:
    if isinstance(path, SamplePath):
        steps = np.flatnonzero(~np.isnan(path.switch_mark))
        batch = PathBatch(
            path.times,
            path.x[-1:].copy(),
            path.regime[-1:].copy(),
            np.array([path.rejected]),
            path.x[None],
            path.regime[None],
            path.dB[None],
            path.jump_atom[None],
            np.stack([np.zeros_like(steps), steps], axis=1),
            path.switch_mark[steps],
        )
        return batch, True
    path._require_record()
    return path, False


def _replay(batch: PathBatch, controls: ControlTriple, model: ModelSpec, kind: str) -> NDArray:
    n, K = batch.jump_atom.shape
    out = np.zeros(n)
    weights = model.jumps.weights
    A = model.jumps.count
    times = batch.times
    for k in range(K):
        t = times[k]
        h = times[k + 1] - t
        for i in np.unique(batch.regime[:, k]):
            idx = np.flatnonzero(batch.regime[:, k] == i)
            x = batch.x[idx, k]
            u, theta, xi, valid = controls.evaluate(t, x, i)
            if not np.all(valid):
                raise DomainError(f"controls undefined at a visited state (step {k}, regime {i + 1})")
            q = model.rates_from(t, x, i) if model.has_switching else np.zeros((idx.size, model.n_regimes))
            active = q > 0
            check_control_domain(theta, np.where(active, xi, 1.0), i)
            if kind == "weight":
                acc = -np.einsum("na,na->n", u, batch.dB[idx, k]) - 0.5 * h * np.einsum("na,na->n", u, u)
                if A:
                    acc += h * (theta @ weights)
                    a = batch.jump_atom[idx, k]
                    hit = a >= 0
                    acc[hit] += np.log1p(-theta[hit, a[hit]])
                acc += h * np.sum(np.where(active, q * (1.0 - xi), 0.0), axis=1)
                j = batch.regime[idx, k + 1]
                moved = j != i
                acc[moved] += np.log(xi[moved, j[moved]])
            else:
                acc = 0.5 * np.einsum("na,na->n", u, u)
                if A:
                    acc += (xlogy(1.0 - theta, 1.0 - theta) + theta) @ weights
                acc += np.sum(np.where(active, q * (xlogy(xi, xi) + 1.0 - xi), 0.0), axis=1)
                acc *= h
            out[idx] += acc
    return out


def girsanov_log_weight(path, controls: ControlTriple, model: ModelSpec):
    """log Z_{0,T} replayed from the noise record (left-point quadrature)."""
    batch, single = _as_batch(path)
    out = _replay(batch, controls, model, "weight")
    return float(out[0]) if single else out


def girsanov_weight(path, controls: ControlTriple, model: ModelSpec):
    """Girsanov density Z_{0,T} of the controlled law against the reference.

    Accepts a SamplePath (returns a float) or a recorded PathBatch (array).
    """
    return np.exp(girsanov_log_weight(path, controls, model))


def kl_running_cost(path, controls: ControlTriple, model: ModelSpec):
    """Time integral of the KL running cost along a path (always >= 0)."""
    batch, single = _as_batch(path)
    out = _replay(batch, controls, model, "cost")
    return float(out[0]) if single else out


# ---------------------------------------------------------------- output


def write_paths_csv(batch: PathBatch, path, *, d: int | None = None) -> None:
    """Write recorded paths as rows path_id, t, x1..xd, regime, event_kind."""
    batch._require_record()
    d = batch.x.shape[2] if d is None else d
    marks = batch.mark_array()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t"] + [f"x{k + 1}" for k in range(d)] + ["regime", "event_kind"])
        for n in range(batch.size):
            for k in range(batch.times.size):
                if k == 0:
                    kind = "start"
                else:
                    tags = ["diffstep"]
                    if batch.jump_atom[n, k - 1] >= 0:
                        tags.append("jump")
                    if not np.isnan(marks[n, k - 1]):
                        tags.append("switch")
                    kind = "+".join(tags)
                w.writerow(
                    [n, repr(float(batch.times[k]))]
                    + [repr(float(v)) for v in batch.x[n, k]]
                    + [int(batch.regime[n, k]) + 1, kind]
                )
