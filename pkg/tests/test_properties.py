"""Invariants checked on generated inputs."""
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rsbridge.config import PURPOSES, purpose_seed
from rsbridge.errors import DomainError
from rsbridge.expr import parse_coefficient, pretty
from rsbridge.grid import Grid, Marginal
from rsbridge.io import read_marginal, write_marginal
from rsbridge.kernel import Kernel, compose, kernel_gaussian, kernel_regime_product
from rsbridge.model import RegimeSet, build_model, switch_layout, switch_targets
from rsbridge.potentials import PotentialField, bridge_kernel
from rsbridge.sinkhorn import iterate_C, map_D, map_E_rho0, map_E_rhoT
from rsbridge.verify import adjoint_gap, random_bump_field

seeds = st.integers(0, 2**32 - 1)
floats = st.floats(-3, 3, allow_nan=False).map(lambda v: round(v, 3))


# ---------------------------------------------------------------- expressions

leaves = st.one_of(st.sampled_from(["t", "x1", "x2"]), st.floats(0, 9).map(lambda v: repr(round(v, 2))))


def _combine(children):
    binary = st.tuples(children, st.sampled_from(["+", "-", "*", "/", "^"]), children).map(lambda p: f"({p[0]}){p[1]}({p[2]})")
    unary = children.map(lambda c: f"-({c})")
    call = st.tuples(st.sampled_from(["sin", "cos", "tanh", "abs", "exp"]), children).map(lambda p: f"{p[0]}({p[1]})")
    pair = st.tuples(st.sampled_from(["min", "max"]), children, children).map(lambda p: f"{p[0]}({p[1]}, {p[2]})")
    return st.one_of(binary, unary, call, pair)


expressions = st.recursive(leaves, _combine, max_leaves=8)


@given(expressions)
def test_pretty_print_round_trips(src):
    e = parse_coefficient(src, d=2)
    again = parse_coefficient(pretty(e.ast), d=2)
    assert again.ast == e.ast


@given(expressions, floats, floats, floats)
def test_pretty_print_preserves_values(src, t, x1, x2):
    e = parse_coefficient(src, d=2)
    again = parse_coefficient(pretty(e.ast), d=2)
    try:
        with np.errstate(all="ignore"):
            a = e.evaluate(t=t, x1=x1, x2=x2)
    except DomainError:
        with pytest.raises(DomainError):
            again.evaluate(t=t, x1=x1, x2=x2)
        return
    b = again.evaluate(t=t, x1=x1, x2=x2)
    assert a == b or (np.isnan(a) and np.isnan(b))


# ---------------------------------------------------------------- switching


@given(st.lists(st.floats(0, 5), min_size=2, max_size=2), st.floats(-2, 2))
def test_switch_layout_tiles_total_rate(rates, x):
    m = build_model(1, 1.0, 3, rates={(0, 1): rates[0], (0, 2): rates[1]})
    lay = switch_layout(m, 0.0, [x], 0)
    assert lay.intervals[1] == (0.0, rates[0])
    assert lay.intervals[2][0] == rates[0]
    assert lay.intervals[2][1] == pytest.approx(sum(rates))


@given(st.floats(0.01, 3), st.floats(0.01, 3), seeds)
def test_switch_marks_beyond_total_rate_do_nothing(q1, q2, seed):
    m = build_model(1, 1.0, 3, rates={(0, 1): q1, (0, 2): q2})
    w = np.random.default_rng(seed).uniform(0, 2 * (q1 + q2), 200)
    x = np.zeros((200, 1))
    j = switch_targets(m, 0.0, x, 0, w)
    np.testing.assert_array_equal(j == -1, w >= q1 + q2)
    np.testing.assert_array_equal(j == 1, w < q1)


# ---------------------------------------------------------------- kernels


@settings(max_examples=20)
@given(st.floats(-1, 1), st.floats(0.3, 1.5), st.floats(0.05, 1.0), st.sampled_from(["point", "cell", "hat"]))
def test_gaussian_kernel_nonnegative_with_bounded_mass(b, s, lag, quad):
    g = Grid.uniform(-4, 4, 40)
    K = kernel_gaussian(g, 0.0, lag, b, s, quad)
    assert np.all(K.values >= 0)
    if quad != "point":
        assert np.all(K.row_mass() <= 1 + 1e-12)


@settings(max_examples=20)
@given(seeds)
def test_composition_is_associative(seed):
    rng = np.random.default_rng(seed)
    g = Grid.uniform(0, 3, 3)
    R = RegimeSet.of_size(2)
    Ks = [Kernel(g, R, k, k + 1, rng.uniform(0, 1, (2, 3, 2, 3))) for k in range(3)]
    left = compose(compose(Ks[0], Ks[1]), Ks[2])
    right = compose(Ks[0], compose(Ks[1], Ks[2]))
    np.testing.assert_allclose(left.values, right.values, rtol=1e-12)


@settings(max_examples=20)
@given(st.floats(0, 2), st.floats(0, 2))
def test_switching_preserves_mass(q12, q21):
    g = Grid.uniform(-10, 10, 60)
    base = kernel_gaussian(g, 0.0, 0.5, 0.0, 0.7, "hat")
    K = kernel_regime_product(base, np.array([[0, q12], [q21, 0]]))
    inner = np.abs(g.nodes[:, 0]) < 5
    np.testing.assert_allclose(K.row_mass()[:, inner], 1.0, atol=1e-9)


# ---------------------------------------------------------------- static maps


def _random_problem(rng, S=2, n=5):
    g = Grid.uniform(0, float(n), n)
    R = RegimeSet.of_size(S)
    K = Kernel(g, R, 0, 1, rng.uniform(0.1, 2.0, (S, n, S, n)))
    a = rng.dirichlet(np.ones(S * n)).reshape(S, n)
    b = rng.dirichlet(np.ones(S * n)).reshape(S, n)
    return K, Marginal(g, R, a), Marginal(g, R, b)


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_endpoint_maps_are_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    K, r0, rT = _random_problem(rng)
    f, h = rng.normal(size=(2, 2, 5))
    for E, m in ((map_E_rhoT, rT), (map_E_rho0, r0)):
        lhs = E(alpha * f + beta * h, K, m) if E is map_E_rhoT else E(alpha * f + beta * h, K, m, rT)
        rhs = (alpha * E(f, K, m) + beta * E(h, K, m)) if E is map_E_rhoT else (alpha * E(f, K, m, rT) + beta * E(h, K, m, rT))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=10))
def test_reciprocal_is_an_involution(vals):
    f = np.array(vals)
    np.testing.assert_allclose(map_D(map_D(f)), f, rtol=1e-15)


@settings(max_examples=25)
@given(seeds, st.floats(0.01, 100))
def test_coupling_is_gauge_free_and_matches_marginals(seed, scale):
    rng = np.random.default_rng(seed)
    K, r0, rT = _random_problem(rng)
    pot, rep = iterate_C(None, K, r0, rT, tol=1e-12)
    assert rep.converged
    pi = pot.coupling(K)
    np.testing.assert_allclose(pi.sum(axis=1), r0.mass.reshape(-1), atol=1e-10)
    np.testing.assert_allclose(pi.sum(axis=0), rT.mass.reshape(-1), atol=1e-10)
    other, _ = iterate_C(np.full((2, 5), scale), K, r0, rT, tol=1e-12)
    np.testing.assert_allclose(other.coupling(K), pi, atol=1e-10)


@settings(max_examples=25)
@given(seeds, st.floats(1e-3, 1e3))
def test_bridge_kernel_ignores_potential_scale(seed, c):
    rng = np.random.default_rng(seed)
    K, _, _ = _random_problem(rng)
    phi = PotentialField(K.grid, K.regimes, [0.0, 1.0], rng.uniform(0.1, 2, (2, 2, 5)), "phi")
    np.testing.assert_allclose(bridge_kernel(phi.scaled(c), K).values, bridge_kernel(phi, K).values, rtol=1e-12)


# ---------------------------------------------------------------- generator


@settings(max_examples=15)
@given(seeds, st.floats(-1, 1), st.floats(0.2, 1.5), st.floats(0, 2), st.floats(0, 2))
def test_generator_adjoint_pairing(seed, b, s, q12, q21):
    g = Grid.uniform(-5, 5, 80)
    m = build_model(1, 1.0, 2, drift={0: [b], 1: [-b]}, diffusion={0: [[s]], 1: [[s / 2]]}, rates={(0, 1): q12, (1, 0): q21})
    rng = np.random.default_rng(seed)
    f, h = random_bump_field(g, 2, rng), random_bump_field(g, 2, rng)
    lhs, rhs = adjoint_gap(f, h, m, 0.0, g)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs), abs(rhs))


# ---------------------------------------------------------------- io and seeds


@settings(max_examples=20)
@given(seeds)
def test_marginal_csv_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    g = Grid.uniform(float(rng.uniform(-9, 0)), float(rng.uniform(0.5, 9)), n)
    R = RegimeSet.of_size(2)
    m = Marginal(g, R, rng.dirichlet(np.ones(2 * n)).reshape(2, n))
    path = tmp_path_factory.mktemp("m") / "m.csv"
    write_marginal(m, path)
    np.testing.assert_array_max_ulp(read_marginal(path, g, R).mass, m.mass, maxulp=1)


@given(st.integers(0, 2**63 - 1))
def test_purpose_seeds_distinct(root):
    vals = [purpose_seed(root, p) for p in PURPOSES]
    assert len(set(vals)) == len(vals)
