import numpy as np
import pytest

from rsbridge import _core
from rsbridge.errors import ConfigError
from rsbridge.grid import Grid, Marginal
from rsbridge.kernel import compose, kernel_analytic
from rsbridge.model import RegimeSet, build_model
from rsbridge.potentials import (
    bridge_coefficients,
    bridge_kernel,
    constant_potential,
    gradient,
    marginal_flow,
    optimal_controls,
    potential_from_function,
    propagate_phi,
    propagate_phihat,
    solve_bridge,
    uniform_slices,
)
from rsbridge.simulate import RngStream, simulate_bridge

R1 = RegimeSet.of_size(1)


def brownian(b="0", s="1", regimes=1, rates=None):
    return build_model(
        1, 1.0, regimes,
        drift={i: [b] for i in range(regimes)},
        diffusion={i: [[s]] for i in range(regimes)},
        rates=rates,
    )


@pytest.fixture(scope="module")
def solved():
    m = brownian("0.3", "0.8")
    g = Grid.uniform(-5, 5, 100)
    x = g.nodes[:, 0]
    r0 = Marginal.from_density(g, R1, np.exp(-((x + 1) ** 2) / 0.5)[None], normalize=True)
    rT = Marginal.from_density(g, R1, np.exp(-((x - 1) ** 2) / 0.3)[None], normalize=True)
    return m, g, r0, rT, solve_bridge(m, g, r0, rT, slices=16)


@pytest.fixture(scope="module")
def two_regime_solved():
    m = brownian("0.3", "0.8", regimes=2, rates={(0, 1): "0.5", (1, 0): "0.8"})
    g = Grid.uniform(-5, 5, 80)
    x = g.nodes[:, 0]
    R = m.regimes
    d0 = np.stack([np.exp(-((x + 1) ** 2)), 0.6 * np.exp(-(x**2))])
    dT = np.stack([0.5 * np.exp(-((x - 1) ** 2) / 0.5), np.exp(-((x - 0.5) ** 2))])
    r0 = Marginal.from_density(g, R, d0, normalize=True)
    rT = Marginal.from_density(g, R, dT, normalize=True)
    return m, g, solve_bridge(m, g, r0, rT, slices=8)


def test_unit_terminal_potential_stays_near_one():
    m = brownian("0.3", "0.8")
    g = Grid.uniform(-8, 8, 160)
    times = uniform_slices(1.0, 4)
    Ks = [kernel_analytic(m, g, float(t), 1.0) for t in times[:-1]]
    phi = propagate_phi(np.ones((1, g.size)), Ks)
    interior = np.abs(g.nodes[:, 0]) < 3
    for k, K in enumerate(Ks):
        np.testing.assert_allclose(phi.values[k], K.row_mass(), rtol=1e-14)
        assert np.max(np.abs(phi.values[k, 0, interior] - 1)) < 1e-6


def test_martingale_terminal_potential():
    # with zero drift, x + c is harmonic, so it propagates unchanged
    m = brownian("0", "0.7")
    g = Grid.uniform(-8, 8, 320)
    x = g.nodes[:, 0]
    times = uniform_slices(1.0, 4)
    phi = propagate_phi((x + 10)[None], [kernel_analytic(m, g, float(t), 1.0, "hat") for t in times[:-1]])
    interior = np.abs(x) < 3
    for k in range(times.size):
        assert np.max(np.abs(phi.values[k, 0, interior] - (x[interior] + 10))) < 2e-3


def test_chained_and_direct_propagation_agree():
    m = brownian("0.3", "0.8")
    g = Grid.uniform(-5, 5, 60)
    steps = [kernel_analytic(m, g, 0.25 * k, 0.25 * (k + 1)) for k in range(4)]
    direct = [compose(compose(compose(steps[0], steps[1]), steps[2]), steps[3]),
              compose(compose(steps[1], steps[2]), steps[3]),
              compose(steps[2], steps[3]),
              steps[3]]
    gT = np.exp(-g.nodes[:, 0] ** 2)[None]
    a = propagate_phi(gT, steps)
    b = propagate_phi(gT, direct)
    np.testing.assert_allclose(a.times, b.times)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-10, atol=1e-14)


def test_forward_potential_from_point_mass():
    m = brownian("0.3", "0.8")
    g = Grid.uniform(-5, 5, 100)
    start = Marginal.point_mass(g, R1, 0, [0.05])
    Ks = [kernel_analytic(m, g, 0.0, s) for s in (0.25, 0.5, 1.0)]
    phihat = propagate_phihat(1.0, start, Ks)
    k = g.nearest_node([0.05])
    assert phihat.values[0, 0, k] == pytest.approx(1 / g.weight)
    for idx, K in enumerate(Ks, start=1):
        np.testing.assert_allclose(phihat.values[idx, 0], K.values[0, k, 0], rtol=1e-14)
        assert np.sum(phihat.values[idx, 0] * g.weights) == pytest.approx(1.0, abs=1e-6)


def test_mixed_kernel_lists_rejected():
    m = brownian()
    g = Grid.uniform(-3, 3, 20)
    with pytest.raises(ConfigError):
        propagate_phi(np.ones((1, 20)), [kernel_analytic(m, g, 0, 0.5), kernel_analytic(m, g, 0.2, 0.7), kernel_analytic(m, g, 0.1, 1.0)])
    with pytest.raises(ConfigError):
        propagate_phi(-np.ones((1, 20)), [kernel_analytic(m, g, 0, 1)])


def test_bridge_marginals_hit_the_targets(solved):
    m, g, r0, rT, sol = solved
    assert np.max(np.abs(sol.marginal(0.0).mass - r0.mass)) / g.weight < 1e-8
    assert np.max(np.abs(sol.marginal(1.0).mass - rT.mass)) / g.weight < 1e-8
    np.testing.assert_allclose(marginal_flow(sol.phi, sol.phihat), 1.0, atol=1e-6)


def test_bridge_kernel_rows_and_semigroup(solved):
    m, g, r0, rT, sol = solved
    K1 = kernel_analytic(m, g, 0.25, 0.5)
    K2 = kernel_analytic(m, g, 0.5, 0.75)
    B1 = bridge_kernel(sol.phi, K1)
    conservative = np.abs(K1.row_mass() - 1) < 1e-10
    live = conservative & (sol.phi.slice(0.25) > 1e-200)
    assert live.sum() > 20
    # rows sum to phi(t) propagated over phi(s); one where the step is conservative
    rows = B1.row_mass()
    want = (K1.matrix @ (sol.phi.slice(0.5).reshape(-1) * g.weights)) / sol.phi.slice(0.25).reshape(-1)
    np.testing.assert_allclose(rows[live], want.reshape(1, -1)[live], rtol=1e-10)
    B12 = compose(B1, bridge_kernel(sol.phi, K2))
    direct = bridge_kernel(sol.phi, compose(K1, K2))
    np.testing.assert_allclose(B12.values, direct.values, rtol=1e-9, atol=1e-12 * direct.values.max())


def test_gauge_invariance(solved):
    m, g, r0, rT, sol = solved
    K = kernel_analytic(m, g, 0.25, 0.5)
    np.testing.assert_allclose(bridge_kernel(sol.phi.scaled(7.5), K).values, bridge_kernel(sol.phi, K).values, rtol=1e-13)
    c1 = optimal_controls(sol.phi, m)
    c2 = optimal_controls(sol.phi.scaled(1e-3), m)
    for f1, f2 in zip(c1.fields, c2.fields):
        np.testing.assert_allclose(f1, f2, rtol=1e-10, atol=1e-12)


def test_tilted_drift_matches_controls(solved, two_regime_solved):
    m, g, r0, rT, sol = solved
    assert bridge_coefficients(sol.phi, m).identity_error <= 1e-10
    m2, g2, sol2 = two_regime_solved
    coeffs = bridge_coefficients(sol2.phi, m2)
    assert coeffs.identity_error <= 1e-10
    # switch multiplier is the ratio of the two regime potentials
    k = 3
    pos = sol2.phi.values[k, 0] > 0
    np.testing.assert_allclose(coeffs.switch_multiplier[k, 0, pos, 1], sol2.phi.values[k, 1, pos] / sol2.phi.values[k, 0, pos], rtol=1e-12)


def test_two_regime_marginals(two_regime_solved):
    m, g, sol = two_regime_solved
    np.testing.assert_allclose(sol.marginal(0.0).mass, sol.rho0.mass, atol=1e-10)
    np.testing.assert_allclose(sol.marginal(1.0).mass, sol.rhoT.mass, atol=1e-10)
    flow = marginal_flow(sol.phi, sol.phihat)
    np.testing.assert_allclose(flow, 1.0, atol=1e-6)


def test_pinned_brownian_control():
    # phi(t, x) = p(t, x; T, a) pins the path at a; u = (x - a) / (T - t)
    m = brownian()
    g = Grid.uniform(-6, 6, 240)
    a = 0.5
    times = uniform_slices(1.0, 4)
    spike = np.zeros((1, g.size))
    spike[0, g.nearest_node([a])] = 1 / g.weight
    phi = propagate_phi(spike, [kernel_analytic(m, g, float(t), 1.0) for t in times[:-1]])
    ctl = optimal_controls(phi, m)
    x = g.nodes[:, 0]
    a_node = x[g.nearest_node([a])]
    near = np.abs(x - a) < 1.5
    for k, t in enumerate(times[:-1]):
        want = (x - a_node) / (1.0 - t)
        got = ctl.fields[0][k, 0, :, 0]
        assert np.all(np.abs(got[near] - want[near]) <= 0.05 * np.maximum(np.abs(want[near]), 0.2))


def test_closed_form_potential_helpers():
    g = Grid.uniform(-2, 2, 10)
    times = [0.0, 0.5, 1.0]
    c = constant_potential(g, R1, times, 2.0)
    assert np.all(c.values == 2.0) and c.kind == "phi"
    f = potential_from_function(g, R1, times, lambda t, x, i: np.exp(t * x[:, 0]))
    np.testing.assert_allclose(f.slice(0.5)[0], np.exp(0.5 * g.nodes[:, 0]))
    # log-linear in time between slices
    np.testing.assert_allclose(f.at(0.25)[0], np.exp(0.25 * g.nodes[:, 0]), rtol=1e-12)
    with pytest.raises(ConfigError):
        f.slice(0.3)
    with pytest.raises(ConfigError):
        uniform_slices(1.0, 1)


def test_gradient_is_second_order():
    errors = []
    for n in (40, 80, 160):
        g = Grid.uniform(-3, 3, n)
        x = g.nodes[:, 0]
        d = gradient(np.sin(x)[None], g)[0, :, 0]
        errors.append(np.max(np.abs(d - np.cos(x))))
    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all(ratios > 3.5) and np.all(ratios < 4.5)


def test_bridge_paths_follow_marginals(solved):
    m, g, r0, rT, sol = solved
    batch = simulate_bridge(m, sol.controls(), r0, 0.01, RngStream(1), 20_000, snapshots=[0.5])
    xs, rs = batch.state_at(0.5)
    counts, _ = _core.bin_points(xs, rs, g.lower, g.h, g.shape, 1)
    tv = 0.5 * np.abs(counts / xs.shape[0] - sol.marginal(0.5).mass).sum()
    assert tv < 0.05
