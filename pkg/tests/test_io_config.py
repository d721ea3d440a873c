import json
from pathlib import Path

import numpy as np
import pytest

from rsbridge.config import config_from_dict, load_config, marginal_from_spec, purpose_seed
from rsbridge.errors import ConfigError
from rsbridge.grid import Grid, Marginal
from rsbridge.io import (
    emit_table,
    file_hash,
    read_marginal,
    read_potentials,
    write_convergence,
    write_marginal,
    write_potentials,
)
from rsbridge.model import RegimeSet
from rsbridge.potentials import potential_from_function
from rsbridge.sinkhorn import ConvergenceReport

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = """
[model]
d = 1
T = 1.0
regimes = 2

[model.b.1]
x1 = "0.3"

[model.sigma.1]
s11 = "0.8"

[model.b.2]
x1 = "0.3"

[model.sigma.2]
s11 = "0.8"

[model.Q]
q_12 = "0.5"
q_21 = "0.8"

[grid]
axes = "-4:4:40"

[[marginals.rho0]]
regime = 1
mean = -1.0
var = 0.5
mass = 0.75

[[marginals.rho0]]
regime = 2
shape = "bump"
center = 0.5
radius = 1.0
mass = 0.25

[[marginals.rhoT]]
regime = 2
mean = 1.0
var = 0.4
"""


def write_config(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_marginal_round_trip(tmp_path):
    g = Grid.uniform(-3, 3, 25)
    R = RegimeSet(("calm", "stressed"))
    mass = np.random.default_rng(0).dirichlet(np.ones(50)).reshape(2, 25)
    m = Marginal(g, R, mass)
    write_marginal(m, tmp_path / "m.csv")
    back = read_marginal(tmp_path / "m.csv", g, R)
    np.testing.assert_array_max_ulp(back.mass, m.mass, maxulp=1)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "regime,x1,density"


def test_marginal_weight_column_and_missing_nodes(tmp_path):
    g = Grid.uniform(0, 4, 4)  # nodes 0.5, 1.5, 2.5, 3.5
    (tmp_path / "w.csv").write_text("regime,x1,weight\n1,1.5,0.25\n2,3.5,0.75\n")
    m = read_marginal(tmp_path / "w.csv", g, RegimeSet.of_size(2))
    np.testing.assert_array_equal(m.mass, [[0, 0.25, 0, 0], [0, 0, 0, 0.75]])


@pytest.mark.parametrize(
    "text",
    [
        "regime,x1\n1,0.5\n",
        "regime,x1,density\n1,0.7,1\n",
        "regime,x1,density\n1,9.5,1\n",
        "regime,x1,density\n1,abc,1\n",
        "regime,x1,density\n7,0.5,1\n",
        "",
    ],
)
def test_bad_marginal_files(tmp_path, text):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(ConfigError):
        read_marginal(tmp_path / "bad.csv", Grid.uniform(0, 4, 4), RegimeSet.of_size(2))


def test_potentials_round_trip(tmp_path):
    g = Grid.uniform(-2, 2, 8)
    R = RegimeSet.of_size(2)
    times = [0.0, 0.5, 1.0]
    phi = potential_from_function(g, R, times, lambda t, x, i: np.exp(-(x[:, 0] - i) ** 2 * (1 + t)))
    phihat = potential_from_function(g, R, times, lambda t, x, i: 1 + t + 0 * x[:, 0], kind="phihat")
    write_potentials(phi, phihat, tmp_path / "p.csv")
    a, b = read_potentials(tmp_path / "p.csv", g, R)
    np.testing.assert_array_equal(a.values, phi.values)
    np.testing.assert_array_equal(b.values, phihat.values)
    np.testing.assert_array_equal(a.times, phi.times)


def test_convergence_table(tmp_path):
    rep = ConvergenceReport(3, np.array([1e-2, 1e-6, 1e-11]), "converged")
    write_convergence(rep, tmp_path / "conv.csv")
    lines = (tmp_path / "conv.csv").read_text().splitlines()
    assert lines[0] == "iter,residual"
    assert lines[1:] == ["1,0.01", "2,9.9999999999999995e-07", "3,9.9999999999999994e-12"]
    emit_table(rep, tmp_path / "conv.json", "json")
    assert json.loads((tmp_path / "conv.json").read_text())["iterations"] == 3


def test_emit_table_dispatch(tmp_path):
    g = Grid.uniform(0, 1, 4)
    m = Marginal(g, RegimeSet.of_size(1), np.full((1, 4), 0.25))
    emit_table(m, tmp_path / "m.csv")
    emit_table(m, tmp_path / "m.json", "json")
    assert json.loads((tmp_path / "m.json").read_text())["kind"] == "marginal"
    with pytest.raises(ConfigError):
        emit_table(object(), tmp_path / "x.csv")
    with pytest.raises(ConfigError):
        emit_table(m, tmp_path / "x.xml", "xml")
    with pytest.raises(ConfigError):
        emit_table({"a": 1}, tmp_path / "x.csv")


def test_file_hash_is_sha256(tmp_path):
    (tmp_path / "f").write_bytes(b"abc")
    assert file_hash(tmp_path / "f") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_config_parses_marginal_components(tmp_path):
    cfg = load_config(write_config(tmp_path, BASE))
    assert cfg.model.n_regimes == 2
    assert cfg.rho0.total == pytest.approx(1.0)
    np.testing.assert_allclose(cfg.rho0.regime_mass(), [0.75, 0.25])
    np.testing.assert_allclose(cfg.rhoT.regime_mass(), [0.0, 1.0])
    assert cfg.out == tmp_path / "out"
    assert cfg.solver.tol == 1e-10 and cfg.solver.quadrature == "hat"


def test_config_overrides_and_digest(tmp_path):
    path = write_config(tmp_path, BASE)
    a = load_config(path)
    b = load_config(path, {"grid": {"axes": "-6:6:60"}})
    assert b.grid.size == 60 and b.grid.lower[0] == -6
    assert a.digest() == load_config(path).digest()
    assert a.digest() != b.digest()


def test_config_digest_follows_referenced_files(tmp_path):
    g = Grid.parse("-4:4:40")
    write_marginal(Marginal.from_density(g, RegimeSet.of_size(2), np.ones((2, 40)), normalize=True), tmp_path / "r0.csv")
    text = BASE.split("[[marginals.rho0]]")[0] + 'marginals.rho0 = "r0.csv"\n' + "[[marginals.rhoT]]" + BASE.split("[[marginals.rhoT]]")[1]
    # keep the TOML valid: a dotted key must precede the array-of-tables header
    text = text.replace('[grid]\naxes = "-4:4:40"\n\nmarginals.rho0 = "r0.csv"\n', '[grid]\naxes = "-4:4:40"\n\n[marginals]\nrho0 = "r0.csv"\n')
    path = write_config(tmp_path, text)
    d1 = load_config(path).digest()
    write_marginal(Marginal.from_density(g, RegimeSet.of_size(2), np.ones((2, 40)) * np.arange(40), normalize=True), tmp_path / "r0.csv")
    assert load_config(path).digest() != d1


@pytest.mark.parametrize(
    "patch",
    [
        ('axes = "-4:4:40"', 'axes = "-4:4:1"'),
        ('q_21 = "0.8"', 'q_21 = "0.8"\nq_22 = "1"'),
        ('x1 = "0.3"', 'x1 = "0.3*y"'),
        ("var = 0.5", "var = -0.5"),
        ('mean = 1.0', 'mean = 1.0\nshape = "cauchy"'),
        ("regime = 2\nmean", "regime = 5\nmean"),
        ('[grid]', '[solver]\nquadrature = "simpson"\n[grid]'),
        ('[grid]', '[solver]\nslices = 1\n[grid]'),
        ('[grid]', '[pipeline]\nstages = ["kernel", "dance"]\n[grid]'),
        ('[grid]', '[verify]\nsuites = ["sideways"]\n[grid]'),
        ("T = 1.0", "T = 1.0\nT = 2.0"),
    ],
)
def test_config_errors(tmp_path, patch):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, BASE.replace(*patch, 1)))


def test_missing_config_and_missing_grid(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"d": 1, "regimes": 1}}, tmp_path / "x.toml")


def test_usbp_section_validation(tmp_path):
    text = (CONFIGS / "killing.toml").read_text()
    cfg = load_config(write_config(tmp_path, text))
    assert cfg.usbp.V == "0.5" and cfg.usbp.assembly == "closed"
    for old, new in [('V = "0.5"', 'V = "0.5*x1"'), ('assembly = "closed"', 'assembly = "loose"'), ("x0 = [0.0]", "x0 = [0.0, 1.0]"), ("[[usbp.target.dead]]", "[[usbp.target.ghost]]")]:
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, text.replace(old, new)))


def test_point_component_records_dirac(tmp_path):
    g = Grid.parse("-2:2:8")
    m = marginal_from_spec([{"regime": 1, "shape": "point", "at": 0.25}], g, RegimeSet.of_size(1), tmp_path)
    assert m.dirac == ((0, g.node_of([0.25])),)
    assert m.mass.sum() == 1.0


def test_purpose_seeds_are_distinct_and_stable():
    seeds = {p: purpose_seed(7, p) for p in ("simulate", "kernel", "bridge", "verify", "usbp")}
    assert len(set(seeds.values())) == 5
    assert all(0 <= s < 2**63 for s in seeds.values())
    assert seeds == {p: purpose_seed(7, p) for p in seeds}
    assert purpose_seed(8, "simulate") != seeds["simulate"]


@pytest.mark.parametrize("name", ["gaussian", "switching", "mean_reverting", "killing"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / f"{name}.toml")
    assert cfg.stages
