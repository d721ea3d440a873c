import numpy as np
import pytest

from oracles import brute_force_coupling, kl
from rsbridge import _core
from rsbridge.errors import ConfigError, DomainError
from rsbridge.grid import Grid, Marginal
from rsbridge.kernel import Kernel, kernel_gaussian, kernel_regime_product
from rsbridge.model import RegimeSet
from rsbridge.sinkhorn import (
    SinkhornError,
    combined_norm,
    embed_flatten,
    endpoint_kernel,
    iterate_C,
    map_C,
    map_D,
    map_E_rho0,
    map_E_rhoT,
    solve_static,
)


def discrete_problem(values, a, b, regimes=1):
    """Problem on a grid of unit-weight nodes, so masses equal densities."""
    S = regimes
    n = len(a) // S
    grid = Grid.uniform(0.0, float(n), n)
    R = RegimeSet.of_size(S)
    K = Kernel(grid, R, 0.0, 1.0, np.asarray(values, float))
    return K, Marginal(grid, R, np.reshape(a, (S, n))), Marginal(grid, R, np.reshape(b, (S, n)))


@pytest.fixture(scope="module")
def two_regime():
    g = Grid.uniform(-5, 5, 100)
    K = kernel_regime_product(kernel_gaussian(g, 0, 1, 0.3, 0.8), np.array([[0, 0.4], [0.3, 0]]))
    R = RegimeSet.of_size(2)
    x = g.nodes[:, 0]
    d0 = np.stack([np.exp(-((x + 1) ** 2)), 0.5 * np.exp(-((x - 0.5) ** 2) / 0.5)])
    dT = np.stack([np.exp(-((x - 1) ** 2) / 0.3), np.exp(-(x**2))])
    d0[:, np.abs(x) > 3] = 0
    dT[:, np.abs(x) > 3] = 0
    r0 = Marginal.from_density(g, R, d0, normalize=True)
    rT = Marginal.from_density(g, R, dT, normalize=True)
    pot, rep = iterate_C(None, K, r0, rT)
    return K, r0, rT, pot, rep


def test_reciprocal_map():
    np.testing.assert_array_equal(map_D(np.array([2.0, 4.0])), [0.5, 0.25])
    f = np.array([0.3, 7.0, 1e-5])
    np.testing.assert_allclose(map_D(map_D(f)), f, rtol=1e-15)
    with pytest.raises(DomainError):
        map_D(np.array([1.0, 0.0]))


def test_forward_map_single_target_node():
    K, r0, rT = discrete_problem([[2.0, 5.0], [1.0, 1.0]], [1.0, 0.0], [1.0, 0.0])
    assert map_E_rhoT(np.array([[3.0, 8.0]]), K, rT)[0, 0] == pytest.approx(6.0)


def test_forward_map_constant_kernel_is_constant():
    K, r0, rT = discrete_problem(np.full((4, 4), 0.7), [0.25] * 4, [0.1, 0.2, 0.3, 0.4])
    out = map_E_rhoT(np.array([[1.0, 2.0, 3.0, 4.0]]), K, rT)
    np.testing.assert_allclose(out, 0.7 * 3.0, rtol=1e-14)


def test_backward_map_dirac_start():
    rng = np.random.default_rng(3)
    vals = rng.uniform(0.5, 2.0, (3, 3))
    K, r0, rT = discrete_problem(vals, [0.0, 1.0, 0.0], [1 / 3] * 3)
    out = map_E_rho0(np.array([[5.0, 2.0, 9.0]]), K, r0, rT)
    np.testing.assert_allclose(out[0], 2.0 * vals[1], rtol=1e-14)
    np.testing.assert_array_equal(map_E_rho0(np.zeros((1, 3)), K, r0, rT), 0.0)


def test_backward_map_matches_explicit_sum():
    rng = np.random.default_rng(4)
    vals = rng.uniform(0.1, 1.0, (2, 3, 2, 3))
    a = rng.dirichlet(np.ones(6))
    K, r0, rT = discrete_problem(vals, a, a, regimes=2)
    f = rng.uniform(0.5, 1.5, (2, 3))
    want = np.zeros((2, 3))
    for j in range(2):
        for y in range(3):
            want[j, y] = sum(vals[i, x, j, y] * a[i * 3 + x] * f[i, x] for i in range(2) for x in range(3))
    np.testing.assert_allclose(map_E_rho0(f, K, r0, rT), want, rtol=1e-13)


def test_constant_kernel_gives_product_coupling():
    a = np.array([0.2, 0.5, 0.3])
    b = np.array([0.6, 0.1, 0.3])
    K, r0, rT = discrete_problem(np.full((3, 3), 2.5), a, b)
    pot, rep = solve_static(K, r0, rT)
    np.testing.assert_allclose(pot.coupling(K), np.outer(a, b), atol=1e-12)


def test_single_node_converges_at_once():
    K, r0, rT = discrete_problem([[2.0, 5.0], [1.0, 1.0]], [1.0, 0.0], [1.0, 0.0])
    pot, rep = solve_static(K, r0, rT)
    assert rep.iterations <= 2
    assert pot.coupling(K)[0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("size,seed", [(2, 0), (2, 1), (3, 2)])
def test_coupling_minimizes_relative_entropy(size, seed):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0.2, 3.0, (size, size))
    a = rng.dirichlet(np.ones(size))
    b = rng.dirichlet(np.ones(size))
    K, r0, rT = discrete_problem(vals, a, b)
    pot, _ = solve_static(K, r0, rT, tol=1e-13)
    pi = pot.coupling(K)
    best = brute_force_coupling(vals, a, b)
    np.testing.assert_allclose(pi, best, atol=1e-8)
    assert kl(pi, vals) <= kl(best, vals) + 1e-12


def test_two_regime_coupling_minimizes_relative_entropy():
    rng = np.random.default_rng(9)
    # one occupied node per regime; the second node carries no mass
    vals = rng.uniform(0.2, 3.0, (2, 2, 2, 2))
    a = np.array([0.35, 0.0, 0.65, 0.0])
    b = np.array([0.55, 0.0, 0.45, 0.0])
    K, r0, rT = discrete_problem(vals, a, b, regimes=2)
    pot, _ = solve_static(K, r0, rT, tol=1e-13)
    occ = [0, 2]
    best = brute_force_coupling(K.matrix[np.ix_(occ, occ)], a[occ], b[occ])
    np.testing.assert_allclose(pot.coupling(K)[np.ix_(occ, occ)], best, atol=1e-8)


def test_marginals_reconstructed(two_regime):
    K, r0, rT, pot, rep = two_regime
    assert rep.converged
    pi = pot.coupling(K)
    np.testing.assert_allclose(pi.sum(axis=1), r0.mass.reshape(-1), atol=1e-9)
    np.testing.assert_allclose(pi.sum(axis=0), rT.mass.reshape(-1), atol=1e-9)
    w = K.grid.weights.min()
    assert rep.marginal_error0 * w < 1e-9 and rep.marginal_errorT * w < 1e-9


def test_fixed_point_and_normalization(two_regime):
    K, r0, rT, pot, rep = two_regime
    assert rep.fixed_point_residual <= 2 * 1e-10
    assert combined_norm(pot.phihatT, K.grid, rT.support) == pytest.approx(1.0, abs=1e-12)
    out = map_C(pot.phihatT, K, r0, rT)
    out /= combined_norm(out, K.grid, rT.support)
    s = rT.support
    assert np.max(np.abs(out[s] - pot.phihatT[s])) < 1e-8


def test_starting_point_does_not_change_coupling(two_regime):
    K, r0, rT, pot, _ = two_regime
    f0 = np.random.default_rng(1).uniform(0.5, 2.0, pot.phihatT.shape)
    other, _ = iterate_C(f0, K, r0, rT)
    np.testing.assert_allclose(other.coupling(K), pot.coupling(K), atol=1e-12)


def test_residuals_recorded(two_regime):
    *_, rep = two_regime
    assert rep.residuals.size == rep.iterations
    assert rep.residuals[-1] <= 1e-10
    d = rep.to_dict()
    assert d["status"] == "converged" and d["iterations"] == rep.iterations


def test_invalid_kernel_rejected():
    K, r0, rT = discrete_problem([[1.0, 0.0], [1.0, 1.0]], [0.5, 0.5], [0.5, 0.5])
    assert not endpoint_kernel(K, r0, rT).valid
    with pytest.raises(SinkhornError) as info:
        iterate_C(None, K, r0, rT)
    assert info.value.report.status == "invalid-kernel"
    pot, rep = iterate_C(None, K, r0, rT, raise_invalid=False)
    assert pot is None and rep.status == "invalid-kernel"


def test_unequal_masses_rejected():
    K, r0, rT = discrete_problem(np.ones((2, 2)), [0.5, 0.5], [0.5, 0.6])
    with pytest.raises(ConfigError):
        iterate_C(None, K, r0, rT)


def test_iteration_cap_reports_max_iters(two_regime):
    K, r0, rT, *_ = two_regime
    _, rep = iterate_C(None, K, r0, rT, max_iters=2)
    assert rep.status == "max-iters" and not rep.converged
    with pytest.raises(SinkhornError):
        solve_static(K, r0, rT, max_iters=2)


@pytest.mark.skipif("cython" not in _core.available_backends(), reason="compiled core not built")
def test_backends_agree(two_regime):
    K, r0, rT, *_ = two_regime
    p_py, rep_py = iterate_C(None, K, r0, rT, backend="python")
    p_cy, rep_cy = iterate_C(None, K, r0, rT, backend="cython")
    assert rep_py.iterations == rep_cy.iterations
    np.testing.assert_allclose(p_py.phi0, p_cy.phi0, rtol=1e-12)


def test_embedding_single_regime_copies_kernel(two_regime):
    K, r0, rT, *_ = two_regime
    K1 = Kernel(K.grid, RegimeSet.of_size(1), 0, 1, K.values[0, :, 0, :])
    m0 = Marginal(K.grid, RegimeSet.of_size(1), r0.mass[:1] / r0.mass[0].sum())
    mT = Marginal(K.grid, RegimeSet.of_size(1), rT.mass[:1] / rT.mass[0].sum())
    emb = embed_flatten(K1, m0, mT, cells=2)
    n = K.grid.size
    vals = emb.kernel.matrix.reshape(n, 2, n, 2)
    for c in range(2):
        for c2 in range(2):
            np.testing.assert_array_equal(vals[:, c, :, c2], K1.matrix)
    np.testing.assert_allclose(emb.unflatten(emb.rho0.mass, mass=True), m0.mass, rtol=1e-15)
    p1, _ = solve_static(K1, m0, mT)
    pe, _ = solve_static(emb.kernel, emb.rho0, emb.rhoT)
    back = emb.unflatten_potentials(pe, K.grid, RegimeSet.of_size(1))
    w = K.grid.weights
    pi = back.phihat0.reshape(-1)[:, None] * K1.matrix * (back.phiT.reshape(-1) * w)[None, :]
    np.testing.assert_allclose(pi, p1.coupling(K1), atol=1e-10)


def test_embedding_has_no_cross_interval_mass(two_regime):
    K, r0, rT, *_ = two_regime
    emb = embed_flatten(K, r0, rT, cells=2)
    m = emb.extra_size
    n = K.grid.size
    vals = emb.kernel.matrix.reshape(n, m, n, m)
    gap = [c for c in range(m) if c not in emb.regime_cells(0) and c not in emb.regime_cells(1)]
    assert np.all(vals[:, gap] == 0) and np.all(vals[:, :, :, gap] == 0)
    assert emb.rho0.total == pytest.approx(r0.total)


def test_embedding_reproduces_potentials(two_regime):
    K, r0, rT, pot, _ = two_regime
    emb = embed_flatten(K, r0, rT)
    pe, _ = iterate_C(None, emb.kernel, emb.rho0, emb.rhoT)
    back = emb.unflatten_potentials(pe, K.grid, K.regimes)
    # the extra axis changes the norm of phihatT by a constant; compare the coupling instead
    w = np.tile(K.grid.weights, 2)
    pi = back.phihat0.reshape(-1)[:, None] * K.matrix * (back.phiT.reshape(-1) * w)[None, :]
    np.testing.assert_allclose(pi, pot.coupling(K), atol=1e-10)
