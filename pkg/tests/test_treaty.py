import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from retrocede import (
    ExpectedValue,
    Exponential,
    ExponentialUtility,
    Frank,
    MarketModel,
    Pareto,
    StdDev,
    Strategy,
    TreatyCurve,
)
from retrocede.errors import ConfigError, DomainError
from retrocede.quad import Discretization
from retrocede.treaty import eval_treaty, expected_utility, moments, net_profit


def test_parametric_shortcuts():
    x = np.linspace(0, 20, 41)
    sl = TreatyCurve.stop_loss(1.0, x)
    assert eval_treaty(sl, 0.5) == 0.0
    assert eval_treaty(sl, 2.0) == pytest.approx(1.0)
    assert eval_treaty(TreatyCurve.quota_share(0.3, x), 10.0) == pytest.approx(3.0)
    assert eval_treaty(TreatyCurve.full(x), 7.3) == pytest.approx(7.3)
    assert eval_treaty(TreatyCurve.null(x), 7.3) == 0.0
    # kink inserted even off the grid
    assert eval_treaty(TreatyCurve.stop_loss(1.01, x), 1.01) == 0.0


def test_extrapolation_uses_clamped_last_slope():
    t = TreatyCurve([0.0, 1.0, 2.0], [0.0, 0.5, 1.0])
    assert t(4.0) == pytest.approx(2.0)
    steep = TreatyCurve([0.0, 1.0, 2.0], [0.0, 0.0, 1.0])
    assert steep(5.0) == pytest.approx(4.0)
    assert steep(5.0) <= 5.0


@given(arrays(float, 12, elements=st.floats(0, 1)), st.floats(0.1, 50))
def test_values_stay_between_zero_and_loss(frac, top):
    x = np.linspace(0, top, 12)
    t = TreatyCurve(x, frac * x)
    probe = np.concatenate([0.5 * (x[1:] + x[:-1]), [top * 1.5, top * 10]])
    z = t(probe)
    assert np.all(z >= 0) and np.all(z <= probe + 1e-12)


def test_invalid_curves():
    with pytest.raises(ConfigError):
        TreatyCurve([0.0, 1.0], [0.0, 1.5])
    with pytest.raises(ConfigError):
        TreatyCurve([0.5, 1.0], [0.0, 0.0])
    with pytest.raises(ConfigError):
        TreatyCurve([0.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    with pytest.raises(ConfigError):
        TreatyCurve.quota_share(1.2, [0.0, 1.0])


def test_csv_round_trip(tmp_path):
    x = np.linspace(0, 5, 11)
    t = TreatyCurve.stop_loss(1.3, x)
    path = tmp_path / "t.csv"
    t.to_csv(path)
    back = TreatyCurve.from_csv(path)
    assert np.array_equal(back.x, t.x) and np.array_equal(back.z, t.z)
    header = path.read_text().splitlines()[0]
    assert header == "x,ceded,retained"


def test_moments_of_stop_loss():
    m = Exponential(1.0)
    t = TreatyCurve.stop_loss(1.0, np.linspace(0, 40, 401))
    # the kink sits inside a quadrature panel, so agreement is ~1e-6
    # E (X - M)^+ = e^-M and E ((X - M)^+)^2 = 2 e^-M for unit exponential
    mom = moments(t, m, 2)
    assert mom[0] == pytest.approx(math.exp(-1), abs=2e-6)
    assert mom[1] == pytest.approx(2 * math.exp(-1), abs=2e-6)


def test_market_validation():
    u = ExponentialUtility(1.0)
    with pytest.raises(ConfigError):
        MarketModel((Exponential(1.0),) * 3, (ExpectedValue(0.1),) * 3, u, 4.0, Frank(2.0))
    with pytest.raises(ConfigError):
        MarketModel((Pareto(4.0, 2.0),), (StdDev(0.5),), u, 4.0)
    with pytest.raises(ConfigError):
        MarketModel((), (), u, 4.0)
    with pytest.raises(ConfigError):
        MarketModel((Exponential(1.0),), (ExpectedValue(0.1),), u, float("inf"))


def test_strategy_prices_match_moments():
    mm = MarketModel((Exponential(1.0), Pareto(4.0, 5.0)), (ExpectedValue(0.3), StdDev(0.5)), ExponentialUtility(1.0), 4.0, Frank(10.0))
    disc = Discretization(mm)
    ts = [TreatyCurve.stop_loss(1.0, np.linspace(0, 30, 301)), TreatyCurve.stop_loss(2.0, np.linspace(0, 30, 31))]
    s = Strategy.priced(mm, ts, disc=disc)
    for i, pp in enumerate(mm.principles):
        assert s.premiums[i] == pytest.approx(pp.premium(moments(ts[i], mm.marginals[i], pp.order, disc=disc, i=i)), abs=1e-9)
    u = expected_utility(mm, s, disc=disc)
    assert -1 < u < 0


def test_net_profit():
    mm = MarketModel((Exponential(1.0), Exponential(1.0)), (ExpectedValue(0.3),) * 2, ExponentialUtility(1.0), 4.0)
    x = np.linspace(0, 5, 11)
    s = Strategy((TreatyCurve.stop_loss(1.0, x), TreatyCurve.full(x)), (0.5, 1.3))
    L = net_profit(mm, s, np.array([[3.0, 2.0], [0.5, 0.0]]))
    assert np.allclose(L, [4.0 - 1.8 - 1.0, 4.0 - 1.8 - 0.5])
    with pytest.raises(DomainError):
        net_profit(mm, s, np.array([1.0, 2.0, 3.0]))


def test_full_cession_utility_is_deterministic():
    mm = MarketModel((Exponential(1.0),), (ExpectedValue(0.3),), ExponentialUtility(1.0), 4.0)
    s = Strategy.priced(mm, [TreatyCurve.full(np.linspace(0, 10, 11))])
    assert s.premiums[0] == pytest.approx(1.3, rel=1e-9)
    assert expected_utility(mm, s) == pytest.approx(-math.exp(-(4.0 - 1.3)), rel=1e-9)


def test_unbounded_retention_of_pareto_diverges():
    from retrocede.errors import IntegrabilityError

    mm = MarketModel((Pareto(4.0, 5.0),), (StdDev(0.5),), ExponentialUtility(1.0), 4.0)
    with pytest.raises(IntegrabilityError):
        s = Strategy.priced(mm, [TreatyCurve.quota_share(0.4, np.linspace(0, 30, 31))])
        expected_utility(mm, s)
