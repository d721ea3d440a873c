"""Regime-switching jump diffusion models.

A :class:`ModelSpec` bundles the coefficients of the coupled SDE for the
pair (X, Λ): drift, diffusion matrix, jump amplitude with a finite jump
measure, off-diagonal switching rates, and the maps that relocate X when
the regime switches.  Regimes are 0-based internally; configuration files
and the switching layout use the 1-based labels of the model description.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, ModelError
from .expr import CoefficientExpr, constant, parse_coefficient

ZERO = constant(0.0)


@dataclass(frozen=True)
class RegimeSet:
    """Finite regime set with unique labels."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ConfigError("a regime set needs at least one regime")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"regime labels must be unique: {self.labels}")

    @classmethod
    def of_size(cls, n: int) -> "RegimeSet":
        return cls(tuple(str(k + 1) for k in range(n)))

    @property
    def count(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, key: str | int) -> int:
        """0-based index of a regime given its label or its 1-based number."""
        key = str(key)
        if key in self.labels:
            return self.labels.index(key)
        if key.isdigit() and 1 <= int(key) <= self.count:
            return int(key) - 1
        raise ConfigError(f"unknown regime {key!r}; known: {self.labels}")


@dataclass(frozen=True)
class JumpMeasure:
    """Finite jump measure given as weighted atoms.

    ``atoms`` has shape (k, ell); ``weights`` are the intensities (per unit
    time) of the atoms.  Atoms with ``|z| <= radius`` are the small jumps,
    which are compensated in the SDE when ``compensate_small`` is set.
    """

    atoms: NDArray[np.float64]
    weights: NDArray[np.float64]
    compensate_small: bool = False
    radius: float = 1.0

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if atoms.ndim == 1:
            atoms = atoms.reshape(weights.size, -1) if weights.size else atoms.reshape(0, 1)
        if atoms.shape[0] != weights.size:
            raise ConfigError("jump atoms and weights differ in length")
        if np.any(~np.isfinite(weights)) or np.any(weights < 0):
            raise ConfigError("jump weights must be finite and nonnegative")
        if atoms.size and np.any(np.all(atoms == 0, axis=1)):
            raise ConfigError("the jump measure may not charge z = 0")
        if not np.all(np.isfinite(atoms)):
            raise ConfigError("jump atoms must be finite")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empty(cls, jump_dim: int = 1) -> "JumpMeasure":
        return cls(np.zeros((0, jump_dim)), np.zeros(0))

    @property
    def count(self) -> int:
        return self.weights.size

    @property
    def jump_dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def total_rate(self) -> float:
        return float(self.weights.sum())

    @property
    def small(self) -> NDArray[np.bool_]:
        """Mask of atoms inside the compensation radius."""
        return np.linalg.norm(self.atoms, axis=1) <= self.radius if self.count else np.zeros(0, bool)


@dataclass(frozen=True)
class SwitchLayout:
    """Consecutive half-open intervals on the positive half line, one per target regime.

    ``intervals[j] = (start, end)`` for every ``j != i`` (0-based); the
    length of each interval is the switching rate to ``j``.
    """

    regime: int
    intervals: dict[int, tuple[float, float]]

    @property
    def total(self) -> float:
        return sum(b - a for a, b in self.intervals.values())

    def target(self, w: float) -> int | None:
        for j, (a, b) in self.intervals.items():
            if a <= w < b:
                return j
        return None


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Complete description of a regime-switching jump diffusion.

    Attributes
    ----------
    d : int
        Spatial dimension.
    regimes : RegimeSet
    horizon : float
        Terminal time T.
    drift : per regime, a tuple of d expressions in (t, x).
    diffusion : per regime, a d x d nested tuple of expressions.
    jump_amplitude : per regime, a tuple of d expressions in (t, x, z).
    jumps : JumpMeasure
    rates : nested tuple, ``rates[i][j]`` is the switching rate i -> j
        (the diagonal is ignored).
    hybrid_maps : mapping (i, j) -> tuple of d expressions giving the new
        location after a switch; missing pairs mean the identity map.
    """

    d: int
    regimes: RegimeSet
    horizon: float
    drift: tuple[tuple[CoefficientExpr, ...], ...]
    diffusion: tuple[tuple[tuple[CoefficientExpr, ...], ...], ...]
    jump_amplitude: tuple[tuple[CoefficientExpr, ...], ...]
    jumps: JumpMeasure
    rates: tuple[tuple[CoefficientExpr, ...], ...]
    hybrid_maps: Mapping[tuple[int, int], tuple[CoefficientExpr, ...]] = field(default_factory=dict)
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        S, d = self.regimes.count, self.d
        if d < 1:
            raise ConfigError("dimension must be positive")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if len(self.drift) != S or any(len(b) != d for b in self.drift):
            raise ConfigError("drift must have d components per regime")
        if len(self.diffusion) != S or any(len(s) != d or any(len(r) != d for r in s) for s in self.diffusion):
            raise ConfigError("diffusion must be a d x d matrix per regime")
        if len(self.jump_amplitude) != S or any(len(g) != d for g in self.jump_amplitude):
            raise ConfigError("jump amplitude must have d components per regime")
        if len(self.rates) != S or any(len(r) != S for r in self.rates):
            raise ConfigError("rate matrix must be S x S")
        for (i, j), m in self.hybrid_maps.items():
            if i == j:
                raise ConfigError("a hybrid map from a regime to itself must be the identity")
            if len(m) != d:
                raise ConfigError("hybrid maps must have d components")
        self._check_jump_vanishes_at_zero()

    # ------------------------------------------------------------ helpers

    @property
    def n_regimes(self) -> int:
        return self.regimes.count

    def env(self, t, x: NDArray, z: NDArray | None = None) -> dict[str, Any]:
        scope: dict[str, Any] = {"t": t}
        for k in range(self.d):
            scope[f"x{k + 1}"] = x[..., k]
        if z is not None:
            for k in range(np.shape(z)[-1]):
                scope[f"z{k + 1}"] = z[..., k]
        return scope

    @staticmethod
    def _full(value, n: int) -> NDArray:
        return np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()

    def _check_jump_vanishes_at_zero(self) -> None:
        if self.jumps.count == 0:
            return
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, self.d))
        z = np.zeros((4, self.jumps.jump_dim))
        for i in range(self.n_regimes):
            for comp in self.jump_amplitude[i]:
                val = comp.evaluate(self.env(0.0, x, z))
                if np.any(np.abs(val) > 1e-12):
                    raise ConfigError("jump amplitude must vanish at z = 0")

    # ------------------------------------------------------------ evaluation

    def drift_at(self, t, x: NDArray, i: int) -> NDArray:
        n = x.shape[0]
        scope = self.env(t, x)
        return np.stack([self._full(c.evaluate(scope), n) for c in self.drift[i]], axis=-1)

    def diffusion_at(self, t, x: NDArray, i: int) -> NDArray:
        n = x.shape[0]
        scope = self.env(t, x)
        rows = [np.stack([self._full(c.evaluate(scope), n) for c in row], axis=-1) for row in self.diffusion[i]]
        return np.stack(rows, axis=-2)

    def covariance_at(self, t, x: NDArray, i: int) -> NDArray:
        s = self.diffusion_at(t, x, i)
        return s @ np.swapaxes(s, -1, -2)

    def jump_at(self, t, x: NDArray, i: int, atom: int) -> NDArray:
        n = x.shape[0]
        z = np.broadcast_to(self.jumps.atoms[atom], (n, self.jumps.jump_dim))
        scope = self.env(t, x, z)
        return np.stack([self._full(c.evaluate(scope), n) for c in self.jump_amplitude[i]], axis=-1)

    def compensator_at(self, t, x: NDArray, i: int) -> NDArray:
        """Sum over small atoms of weight * amplitude (zero unless compensation is on)."""
        out = np.zeros((x.shape[0], self.d))
        if not self.jumps.compensate_small:
            return out
        for k in np.flatnonzero(self.jumps.small):
            out += self.jumps.weights[k] * self.jump_at(t, x, i, k)
        return out

    def rate_at(self, t, x: NDArray, i: int, j: int) -> NDArray:
        n = x.shape[0]
        if i == j:
            return np.zeros(n)
        q = self._full(self.rates[i][j].evaluate(self.env(t, x)), n)
        if np.any(q < 0):
            raise ModelError(f"negative switching rate from regime {i + 1} to {j + 1}")
        return q

    def rates_from(self, t, x: NDArray, i: int) -> NDArray:
        """Matrix of shape (n, S) of the rates out of regime i (zero on the diagonal)."""
        return np.stack([self.rate_at(t, x, i, j) for j in range(self.n_regimes)], axis=-1)

    def hybrid_at(self, t, x: NDArray, i: int, j: int) -> NDArray:
        maps = self.hybrid_maps.get((i, j))
        if maps is None or i == j:
            return np.array(x, dtype=float, copy=True)
        n = x.shape[0]
        scope = self.env(t, x)
        return np.stack([self._full(c.evaluate(scope), n) for c in maps], axis=-1)

    @property
    def has_switching(self) -> bool:
        return any(
            not (self.rates[i][j].is_constant and self.rates[i][j].constant_value() == 0.0)
            for i in range(self.n_regimes)
            for j in range(self.n_regimes)
            if i != j
        )

    @property
    def identity_hybrid(self) -> bool:
        return not self.hybrid_maps

    def is_time_homogeneous(self) -> bool:
        exprs = [c for b in self.drift for c in b]
        exprs += [c for s in self.diffusion for r in s for c in r]
        exprs += [c for g in self.jump_amplitude for c in g]
        exprs += [c for r in self.rates for c in r]
        exprs += [c for m in self.hybrid_maps.values() for c in m]
        return not any(c.depends_on("t") for c in exprs)

    def constant_coefficients(self, i: int) -> tuple[NDArray, NDArray] | None:
        """(drift, diffusion) of regime i if both are constants, else None."""
        exprs = list(self.drift[i]) + [c for r in self.diffusion[i] for c in r]
        if not all(c.is_constant for c in exprs):
            return None
        b = np.array([c.constant_value() for c in self.drift[i]])
        s = np.array([[c.constant_value() for c in r] for r in self.diffusion[i]])
        return b, s

    def describe(self) -> dict[str, Any]:
        """JSON-ready canonical description used for hashing and manifests."""
        return {
            "d": self.d,
            "regimes": list(self.regimes.labels),
            "T": self.horizon,
            "drift": [[str(c) for c in b] for b in self.drift],
            "diffusion": [[[str(c) for c in r] for r in s] for s in self.diffusion],
            "jump_amplitude": [[str(c) for c in g] for g in self.jump_amplitude],
            "atoms": self.jumps.atoms.tolist(),
            "weights": self.jumps.weights.tolist(),
            "compensate_small": self.jumps.compensate_small,
            "rates": [[str(c) for c in r] for r in self.rates],
            "hybrid_maps": {f"{i + 1}{j + 1}": [str(c) for c in m] for (i, j), m in sorted(self.hybrid_maps.items())},
        }


# ---------------------------------------------------------------- construction


def _as_expr(value, d: int, jump_dim: int, params: Mapping[str, float]) -> CoefficientExpr:
    if isinstance(value, CoefficientExpr):
        return value.bind(params)
    if isinstance(value, (int, float)):
        return constant(value)
    return parse_coefficient(str(value), d=d, jump_dim=jump_dim, params=params)


def build_model(
    d: int,
    horizon: float,
    regimes: int | Sequence[str] = 1,
    drift: Mapping[int, Sequence] | None = None,
    diffusion: Mapping[int, Sequence[Sequence]] | None = None,
    jump_amplitude: Mapping[int, Sequence] | None = None,
    atoms: Sequence[Sequence[float]] | None = None,
    weights: Sequence[float] | None = None,
    compensate_small: bool = False,
    rates: Mapping[tuple[int, int], Any] | None = None,
    hybrid_maps: Mapping[tuple[int, int], Sequence] | None = None,
    params: Mapping[str, float] | None = None,
) -> ModelSpec:
    """Convenience constructor taking expressions as strings or numbers.

    Regimes missing from ``drift``/``diffusion``/``jump_amplitude`` get zero
    coefficients (a frozen regime).  Keys are 0-based regime indices.
    """
    regime_set = RegimeSet.of_size(regimes) if isinstance(regimes, int) else RegimeSet(tuple(regimes))
    S = regime_set.count
    params = dict(params or {})
    atoms_arr = np.zeros((0, 1)) if atoms is None else np.asarray(atoms, dtype=float).reshape(len(atoms), -1)
    jump_dim = atoms_arr.shape[1]
    nu = JumpMeasure(atoms_arr, np.zeros(0) if weights is None else np.asarray(weights, float), compensate_small)

    def expr(v):
        return _as_expr(v, d, jump_dim, params)

    drift = drift or {}
    diffusion = diffusion or {}
    jump_amplitude = jump_amplitude or {}
    b = tuple(tuple(expr(v) for v in drift.get(i, [0.0] * d)) for i in range(S))
    s = tuple(
        tuple(tuple(expr(v) for v in row) for row in diffusion.get(i, [[0.0] * d for _ in range(d)]))
        for i in range(S)
    )
    g = tuple(tuple(expr(v) for v in jump_amplitude.get(i, [0.0] * d)) for i in range(S))
    rates = rates or {}
    q = tuple(tuple(expr(rates.get((i, j), 0.0)) if i != j else ZERO for j in range(S)) for i in range(S))
    psi = {k: tuple(expr(v) for v in m) for k, m in (hybrid_maps or {}).items()}
    return ModelSpec(d, regime_set, float(horizon), b, s, g, nu, q, psi, params)


def model_from_config(table: Mapping[str, Any]) -> ModelSpec:
    """Build a model from the ``[model]`` table of a configuration file.

    See ``docs/coefficients.md`` for the key set.
    """
    try:
        d = int(table["d"])
        horizon = float(table["T"])
    except KeyError as exc:
        raise ConfigError(f"[model] is missing key {exc.args[0]!r}") from None
    regimes_raw = table.get("regimes", 1)
    regime_set = RegimeSet.of_size(int(regimes_raw)) if isinstance(regimes_raw, int) else RegimeSet(tuple(map(str, regimes_raw)))
    S = regime_set.count
    params = {str(k): float(v) for k, v in table.get("params", {}).items()}

    nu_table = table.get("nu", {})
    raw_atoms = nu_table.get("atoms", [])
    atoms = [list(map(float, a[:-1])) for a in raw_atoms]
    weights = [float(a[-1]) for a in raw_atoms]
    if any(len(a) == 0 for a in atoms):
        raise ConfigError("each jump atom needs coordinates followed by a weight")

    def per_regime(section: str) -> dict[int, Mapping[str, Any]]:
        out = {}
        for key, sub in table.get(section, {}).items():
            if not isinstance(sub, Mapping):
                raise ConfigError(f"[model.{section}.{key}] must be a table")
            out[regime_set.index(key)] = sub
        return out

    drift = {i: [sub.get(f"x{k + 1}", 0.0) for k in range(d)] for i, sub in per_regime("b").items()}
    diffusion = {
        i: [[sub.get(f"s{m + 1}{n + 1}", 0.0) for n in range(d)] for m in range(d)]
        for i, sub in per_regime("sigma").items()
    }
    gamma = {i: [sub.get(f"x{k + 1}", 0.0) for k in range(d)] for i, sub in per_regime("gamma").items()}

    def pair(key: str, prefix: str) -> tuple[int, int]:
        body = key[len(prefix):].lstrip("_")
        if len(body) != 2 or not body.isdigit():
            raise ConfigError(f"malformed key {key!r}; expected {prefix}_ij with 1-based digits")
        i, j = int(body[0]) - 1, int(body[1]) - 1
        if not (0 <= i < S and 0 <= j < S):
            raise ConfigError(f"key {key!r} refers to a regime outside 1..{S}")
        return i, j

    rates = {}
    for key, value in table.get("Q", {}).items():
        i, j = pair(key, "q")
        if i == j:
            raise ConfigError("diagonal switching rates are implied, not configured")
        rates[(i, j)] = value
    psi = {}
    for key, value in table.get("psi", {}).items():
        i, j = pair(key, "psi")
        psi[(i, j)] = list(value) if isinstance(value, (list, tuple)) else [value]
    return build_model(
        d,
        horizon,
        list(regime_set.labels),
        drift,
        diffusion,
        gamma,
        atoms if atoms else None,
        weights if weights else None,
        bool(nu_table.get("compensate_small", False)),
        rates,
        psi,
        params,
    )


# ---------------------------------------------------------------- switching


def switch_layout(model: ModelSpec, t: float, x: Sequence[float], i: int) -> SwitchLayout:
    """Lay the intervals out consecutively from 0 in increasing target regime, skipping i."""
    xa = np.asarray(x, dtype=float).reshape(1, model.d)
    start = 0.0
    intervals = {}
    for j in range(model.n_regimes):
        if j == i:
            continue
        q = float(model.rate_at(t, xa, i, j)[0])
        intervals[j] = (start, start + q)
        start += q
    return SwitchLayout(i, intervals)


def switch_maps(model: ModelSpec, t: float, x: Sequence[float], i: int, w: float) -> tuple[int, NDArray]:
    """Return (regime increment, displacement) triggered by a switching mark w."""
    if w < 0:
        raise ValueError("switching marks are nonnegative")
    layout = switch_layout(model, t, x, i)
    j = layout.target(w)
    xa = np.asarray(x, dtype=float).reshape(1, model.d)
    if j is None:
        return 0, np.zeros(model.d)
    return j - i, model.hybrid_at(t, xa, i, j)[0] - xa[0]


def switch_targets(model: ModelSpec, t, x: NDArray, i: int, w: NDArray, rates: NDArray | None = None) -> NDArray:
    """Vectorized switching: target regime for each mark in ``w`` (-1 for none).

    ``rates`` may carry pre-tilted rates of shape (n, S); by default the
    model rates out of regime i are used.
    """
    q = model.rates_from(t, x, i) if rates is None else rates
    q = q.copy()
    q[:, i] = 0.0
    edges = np.cumsum(q, axis=1)
    lower = edges - q
    hit = (w[:, None] >= lower) & (w[:, None] < edges) & (q > 0)
    target = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
    return target
