import numpy as np
import pytest

from rsbridge.errors import ConfigError, ModelError, UnsupportedModelError
from rsbridge.expr import parse_coefficient
from rsbridge.grid import Grid
from rsbridge.kernel import (
    KernelCache,
    compose,
    identity_kernel,
    kernel_analytic,
    kernel_gaussian,
    kernel_killing,
    kernel_mc,
    kernel_regime_product,
    l1_distance,
    load_kernel,
    save_kernel,
)
from rsbridge.model import RegimeSet, build_model


def test_standard_normal_density_at_origin():
    g = Grid.uniform(-6, 6, 201)
    K = kernel_gaussian(g, 0.0, 1.0, 0.0, 1.0)
    k0 = g.node_of([0.0])
    assert K.values[0, k0, 0, k0] == pytest.approx(0.3989422804014327, rel=1e-14)


def test_short_time_density_integrates_to_one():
    g = Grid.uniform(-0.6, 0.6, 201)
    K = kernel_gaussian(g, 0.0, 0.01, 0.0, 1.0)
    k0 = g.node_of([0.0])
    assert abs(K.values[0, k0, 0] @ g.weights - 1.0) <= 1e-6


def test_translation_equivariance():
    g = Grid.uniform(-5, 5, 100)
    K = kernel_gaussian(g, 0.0, 0.7, 0.3, 0.8)
    v = K.values[0, :, 0, :]
    # p(x, y) depends on y - x only
    for shift in (1, 7, 30):
        assert np.array_equal(v[:-shift, :-shift], v[shift:, shift:])


def test_singular_covariance_and_bad_times():
    g = Grid.uniform(-1, 1, 10)
    with pytest.raises(ArithmeticError):
        kernel_gaussian(g, 0.0, 1.0, 0.0, 0.0)
    with pytest.raises(ConfigError):
        kernel_gaussian(g, 1.0, 1.0, 0.0, 1.0)


@pytest.mark.parametrize("V, factor", [("0", 1.0), ("0.5", np.exp(-0.5)), ("t", np.exp(-0.5))])
def test_killing_scale_factor(V, factor):
    g = Grid.uniform(-3, 3, 30)
    base = kernel_gaussian(g, 0.0, 1.0, 0.0, 1.0)
    K = kernel_killing(base, parse_coefficient(V, d=0))
    assert np.allclose(K.values, base.values * factor, rtol=1e-12, atol=0)


def test_negative_killing_rate_rejected():
    base = kernel_gaussian(Grid.uniform(-3, 3, 30), 0.0, 1.0, 0.0, 1.0)
    with pytest.raises(ModelError):
        kernel_killing(base, parse_coefficient("0.5 - t", d=0))


def test_mass_conservation_of_analytic_kernels():
    g = Grid.uniform(-10, 10, 200)
    m = build_model(1, 1.0, 2, drift={0: ["0.3"], 1: ["0.3"]}, diffusion={0: [["0.8"]], 1: [["0.8"]]},
                    jump_amplitude={0: ["z1"], 1: ["z1"]}, atoms=[[0.5], [-0.4]], weights=[0.6, 0.3], rates={(0, 1): 0.7, (1, 0): 0.4})
    for quad in ("point", "cell", "hat"):
        K = kernel_analytic(m, g, 0.0, 1.0, quad)
        assert np.all(K.values >= 0)
        mass = K.row_mass()
        inner = np.abs(g.nodes[:, 0]) <= 3
        assert np.max(np.abs(mass[:, inner] - 1)) <= 1e-6
        assert np.max(mass) <= 1 + 1e-6


def test_unsupported_models():
    g = Grid.uniform(-3, 3, 20)
    with pytest.raises(UnsupportedModelError):
        kernel_analytic(build_model(1, 1.0, 1, drift={0: ["x1"]}, diffusion={0: [["1"]]}), g, 0, 1)
    with pytest.raises(UnsupportedModelError):
        kernel_analytic(build_model(1, 1.0, 2, diffusion={0: [["1"]], 1: [["2"]]}), g, 0, 1)
    with pytest.raises(UnsupportedModelError):
        kernel_analytic(build_model(1, 1.0, 2, diffusion={0: [["1"]], 1: [["1"]]}, rates={(0, 1): "1 + 0*x1^2"}), g, 0, 1)


def test_mc_kernel_of_frozen_model():
    g = Grid.uniform(-2, 2, 8)
    K = kernel_mc(build_model(1, 1.0, 2), g, 0.0, 1.0, 1000, 0.1, 1)
    expected = identity_kernel(g, RegimeSet.of_size(2), 0.0).values
    assert np.array_equal(K.values, expected)
    assert K.provenance["kind"] == "monte-carlo" and K.provenance["paths"] == 1000


def test_mc_kernel_matches_gaussian():
    m = build_model(1, 1.0, 1, drift={0: ["0"]}, diffusion={0: [["1"]]})
    g = Grid.uniform(-6, 6, 40)
    K = kernel_mc(m, g, 0.0, 1.0, 10_000, 0.02, 7)
    Ka = kernel_gaussian(g, 0.0, 1.0, 0.0, 1.0, quadrature="cell")
    assert l1_distance(K, Ka).max() <= 0.05


def test_mc_killing_mass():
    m = build_model(1, 1.0, 2, drift={0: ["0"]}, diffusion={0: [["1"]]}, rates={(0, 1): "0.5"})
    g = Grid.uniform(-6, 6, 40)
    N = 10_000
    K = kernel_mc(m, g, 0.0, 1.0, N, 0.01, 7)
    killed = K.values[0, 20, 1, :] @ g.weights
    p = 1 - np.exp(-0.5)
    assert abs(killed - p) <= 3 * np.sqrt(p * (1 - p) / N)


def test_mc_leak_flag_and_minimum_paths():
    m = build_model(1, 1.0, 1, drift={0: ["0"]}, diffusion={0: [["1"]]})
    g = Grid.uniform(-1, 1, 4)
    K = kernel_mc(m, g, 0.0, 1.0, 1000, 0.05, 1)
    assert "leak" in K.flags and K.leak.max() > 0.05
    with pytest.raises(ConfigError):
        kernel_mc(m, g, 0.0, 1.0, 10, 0.05, 1)


def test_compose_with_identity():
    g = Grid.uniform(-5, 5, 50)
    K = kernel_gaussian(g, 0.0, 1.0, 0.2, 0.9)
    I = identity_kernel(g, K.regimes, 0.0)
    assert np.max(np.abs(compose(I, K).values - K.values)) <= 1e-12


def test_gaussian_convolution():
    g = Grid.uniform(-6, 6, 200)
    K = compose(kernel_gaussian(g, 0.0, 0.5, 0.0, 1.0, "point"), kernel_gaussian(g, 0.5, 1.0, 0.0, 1.0, "point"))
    direct = kernel_gaussian(g, 0.0, 1.0, 0.0, 1.0, "point")
    inner = np.abs(g.nodes[:, 0]) <= 2
    assert np.max(np.abs(K.values[0][inner] - direct.values[0][inner])) <= 2e-3


def test_killing_composition():
    g = Grid.uniform(-6, 6, 200)
    V = parse_coefficient("0.3 + 0.4*t", d=0)
    q = lambda t, s: kernel_killing(kernel_gaussian(g, t, s, 0.0, 1.0, "point"), V)
    K = compose(q(0.0, 0.4), q(0.4, 1.0))
    direct = q(0.0, 1.0)
    inner = np.abs(g.nodes[:, 0]) <= 2
    assert np.max(np.abs(K.values[0][inner] - direct.values[0][inner])) <= 2e-3


def test_composition_is_associative():
    g = Grid.uniform(-4, 4, 40)
    base = [kernel_gaussian(g, a, b, 0.1, 0.7, "hat") for a, b in ((0, 0.2), (0.2, 0.5), (0.5, 1.0))]
    Ks = [kernel_regime_product(k, np.array([[0, 0.5], [0.3, 0]])) for k in base]
    left = compose(compose(Ks[0], Ks[1]), Ks[2]).values
    right = compose(Ks[0], compose(Ks[1], Ks[2])).values
    assert np.max(np.abs(left - right)) <= 1e-12 * np.max(np.abs(left))


def test_compose_rejects_mismatch():
    g = Grid.uniform(-4, 4, 40)
    with pytest.raises(ConfigError):
        compose(kernel_gaussian(g, 0, 0.5, 0, 1), kernel_gaussian(g, 0.6, 1, 0, 1))
    with pytest.raises(ConfigError):
        compose(kernel_gaussian(g, 0, 0.5, 0, 1), kernel_gaussian(Grid.uniform(-4, 4, 41), 0.5, 1, 0, 1))


def test_kernel_file_round_trip(tmp_path):
    g = Grid.uniform(-4, 4, 30)
    K = kernel_regime_product(kernel_gaussian(g, 0.25, 1.0, 0.1, 0.7, "hat"), np.array([[0, 0.5], [0.3, 0]]))
    path = tmp_path / "K.bin"
    digest = save_kernel(K, path)
    L = load_kernel(path)
    assert np.array_equal(L.values, K.values)
    assert (L.t, L.s, L.grid, L.regimes.labels) == (K.t, K.s, K.grid, K.regimes.labels)
    raw = path.read_bytes()
    assert raw[:8].startswith(b"RSB")
    assert isinstance(digest, str) and len(digest) == 64
    (tmp_path / "bad.bin").write_bytes(b"garbage")
    with pytest.raises(ConfigError):
        load_kernel(tmp_path / "bad.bin")


def test_kernel_cache_builds_once(tmp_path):
    g = Grid.uniform(-4, 4, 12)
    cache = KernelCache(tmp_path)
    calls = []

    def build():
        calls.append(1)
        return kernel_gaussian(g, 0.0, 1.0, 0.0, 1.0)

    a = cache.get_or_build({"grid": str(g), "t": 0, "s": 1}, build)
    b = cache.get_or_build({"grid": str(g), "t": 0, "s": 1}, build)
    assert len(calls) == 1 and np.array_equal(a.values, b.values)
