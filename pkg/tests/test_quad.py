import math

import numpy as np
import pytest

from retrocede import (
    FGM,
    Checkerboard,
    ExpectedValue,
    Exponential,
    ExponentialUtility,
    Frank,
    Independence,
    MarketModel,
    Pareto,
    grid_from_cell_masses,
)
from retrocede.errors import ConfigError, IntegrabilityError, QuadratureError
from retrocede.quad import (
    Discretization,
    QuadratureSpec,
    cond_expect,
    cond_expect_mc,
    integrate_marginal,
    marginal_nodes,
    mc_map,
)

PATTERN = np.array([[1, -1, 0, 0, 0], [-1, 1, 0, 0, 0], [0, 0, -1, 1, 0], [0, 0, 1, -1, 0], [0, 0, 0, 0, 0]], float)
BOARD = Checkerboard(grid_from_cell_masses((1 + 0.8 * PATTERN) / 25))
EV = (ExpectedValue(0.3), ExpectedValue(0.5))
U = ExponentialUtility(1.0)


def market(cop):
    return MarketModel((Exponential(1.0), Pareto(4.0, 5.0)), EV, U, 4.0, cop)


def test_integrate_marginal_examples():
    assert integrate_marginal(lambda x: np.ones_like(x), Exponential(1.0)) == pytest.approx(1.0, abs=1e-9)
    assert integrate_marginal(lambda x: x, Exponential(1.0)) == pytest.approx(1.0, abs=1e-8)
    assert integrate_marginal(lambda x: np.exp(0.5 * x), Exponential(1.0)) == pytest.approx(2.0, abs=1e-6)
    assert integrate_marginal(lambda x: x ** 2, Pareto(4.0, 5.0)) == pytest.approx(16 / 6, rel=1e-7)


def test_integrate_marginal_flags_divergence():
    with pytest.raises(IntegrabilityError):
        integrate_marginal(lambda x: np.exp(1.5 * x), Exponential(1.0), check_tail=True)
    with pytest.raises(QuadratureError), np.errstate(over="ignore"):
        integrate_marginal(lambda x: np.exp(x), Pareto(4.0, 5.0), check_tail=True)


def test_quadrature_spec_validation():
    with pytest.raises(ConfigError):
        QuadratureSpec(mesh_points=8)
    with pytest.raises(ConfigError):
        QuadratureSpec(truncation_prob=0.5)


def test_nodes_cover_breakpoints():
    x, w, tail = marginal_nodes(Exponential(1.0), QuadratureSpec(), (0.2, 0.4))
    assert np.all(np.diff(x) > 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert tail.sum() == QuadratureSpec().tail_points


@pytest.mark.parametrize("cop", [Independence(), Frank(10.0), Frank(-10.0), FGM(1.0), BOARD], ids=repr)
def test_conditional_mass_is_one(cop):
    mm = market(cop)
    for i in range(2):
        for p in np.linspace(0.005, 0.99, 9):
            x = float(mm.marginals[i].quantile(p))
            assert cond_expect(mm, i, x, lambda pts: np.ones(len(pts))) == pytest.approx(1.0, abs=1e-8)


def test_independence_conditional_mean():
    mm = market(Independence())
    assert cond_expect(mm, 0, 3.0, lambda pts: pts[:, 1]) == pytest.approx(1.0, rel=1e-7)
    assert cond_expect(mm, 1, 0.2, lambda pts: pts[:, 0]) == pytest.approx(1.0, rel=1e-7)


def test_positive_dependence_raises_conditional_mean():
    mm = market(Frank(10.0))
    x = float(mm.marginals[0].quantile(0.9))
    assert cond_expect(mm, 0, x, lambda pts: pts[:, 1]) > 1.0


@pytest.mark.parametrize("cop", [Frank(10.0), Frank(-10.0), FGM(0.8), BOARD], ids=repr)
def test_mesh_and_monte_carlo_agree(cop):
    mm = market(cop)
    rng = np.random.default_rng(hash(repr(cop)) % 2**32)
    q = QuadratureSpec(mc_samples=20000)
    funcs = [lambda p: p[:, 1], lambda p: np.minimum(p[:, 1], 2.0), lambda p: np.exp(0.5 * np.minimum(p[:, 0] + p[:, 1], 6))]
    for _ in range(13):
        i = int(rng.integers(2))
        x = float(mm.marginals[i].quantile(rng.uniform(0.02, 0.98)))
        g = funcs[int(rng.integers(3))]
        mesh = cond_expect(mm, i, x, g)
        mc, se = cond_expect_mc(mm, i, x, g, q)
        assert abs(mesh - mc) <= 3 * se + 1e-9


@pytest.mark.parametrize("cop", [Frank(10.0), BOARD], ids=repr)
def test_tower_property(cop):
    mm = market(cop)
    q = QuadratureSpec()
    g = lambda p: -np.expm1(-p[:, 0]) * -np.expm1(-p[:, 1] / 3)  # noqa: E731
    outer = integrate_marginal(lambda xs: np.array([cond_expect(mm, 0, float(x), g, q) for x in np.atleast_1d(xs)]),
                               mm.marginals[0], QuadratureSpec(mesh_points=32), prob_breaks=getattr(cop, "breakpoints", tuple)())
    disc = Discretization(mm, q)
    joint = disc.cond_weights(0) * disc.weights[0][:, None]
    full = float(np.sum(joint * -np.expm1(-disc.nodes[0])[:, None] * -np.expm1(-disc.nodes[1] / 3)[None, :]))
    assert outer == pytest.approx(full, rel=1e-5)


def test_mc_map_is_worker_independent(monkeypatch):
    fn = lambda u: u[:, 0] ** 2 + u[:, 1]  # noqa: E731
    monkeypatch.setenv("RETROCEDE_WORKERS", "1")
    a = mc_map(fn, 10001, 7, True, dim=2)
    monkeypatch.setenv("RETROCEDE_WORKERS", "3")
    b = mc_map(fn, 10001, 7, True, dim=2)
    assert np.array_equal(a, b)
    assert a.mean() == pytest.approx(1 / 3 + 1 / 2, abs=0.01)


def test_discretized_utility_of_full_cession_is_deterministic():
    mm = market(Frank(10.0))
    disc = Discretization(mm)
    zero = [np.zeros_like(x) for x in disc.nodes]
    assert disc.expected_utility(zero, [1.0, 0.5]) == pytest.approx(-math.exp(-(4.0 - 1.5)), rel=1e-12)
    assert disc.expected_utility(zero, [1.0, 0.5], derivative=1) == pytest.approx(math.exp(-2.5), rel=1e-12)


def test_discretized_utility_detects_divergence():
    mm = market(Independence())
    disc = Discretization(mm)
    with pytest.raises(IntegrabilityError):
        disc.expected_utility([disc.nodes[0], disc.nodes[1]], [0.0, 0.0])
