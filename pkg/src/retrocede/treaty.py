"""Deterministic treaty curves, strategies and the market they are priced in."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .copula import Copula, Independence
from .errors import ConfigError, DomainError
from .market import PremiumPrinciple, UtilityModel
from .quad import Discretization, QuadratureSpec, marginal_nodes


class TreatyCurve:
    """Piecewise-linear ceded amount ``z = Z(x)`` with ``0 <= Z(x) <= x``.

    Knots must start at 0 and increase strictly.  Beyond the last knot the
    final segment is extended with its slope clamped to [0, 1].
    """

    def __init__(self, x, z, label=""):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if x.ndim != 1 or x.shape != z.shape or x.size < 2:
            raise ConfigError("treaty needs matching 1-D knot and value arrays with >= 2 knots")
        if x[0] != 0 or np.any(np.diff(x) <= 0):
            raise ConfigError("treaty knots must start at 0 and increase strictly")
        if np.any(z < -1e-12) or np.any(z > x + 1e-12 * np.maximum(1.0, x)):
            raise ConfigError("treaty violates 0 <= Z(x) <= x")
        self.x = x
        self.z = np.clip(z, 0.0, x)
        self.label = label
        self._tail_slope = float(np.clip((self.z[-1] - self.z[-2]) / (x[-1] - x[-2]), 0.0, 1.0))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        z = np.interp(x, self.x, self.z)
        beyond = x > self.x[-1]
        if np.any(beyond):
            z = np.where(beyond, self.z[-1] + self._tail_slope * (x - self.x[-1]), z)
        return np.clip(z, 0.0, np.maximum(x, 0.0))

    def retained(self, x):
        x = np.asarray(x, dtype=float)
        return x - self(x)

    @classmethod
    def from_function(cls, fn, x, label=""):
        x = np.asarray(x, dtype=float)
        return cls(x, np.clip(fn(x), 0.0, x), label)

    @classmethod
    def stop_loss(cls, M, x):
        return cls.from_function(lambda s: np.maximum(0.0, s - M), _with_kink(x, M), f"stop_loss({M:g})")

    @classmethod
    def quota_share(cls, q, x):
        if not 0 <= q <= 1:
            raise ConfigError("quota share must lie in [0, 1]")
        return cls.from_function(lambda s: q * s, x, f"quota_share({q:g})")

    @classmethod
    def full(cls, x):
        return cls.from_function(lambda s: s, x, "full")

    @classmethod
    def null(cls, x):
        return cls.from_function(lambda s: np.zeros_like(s), x, "null")

    def to_csv(self, path, x=None):
        x = self.x if x is None else np.asarray(x, dtype=float)
        z = self(x)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "ceded", "retained"])
            for xi, zi in zip(x, z):
                writer.writerow([repr(float(xi)), repr(float(zi)), repr(float(xi - zi))])

    @classmethod
    def from_csv(cls, path):
        data = np.genfromtxt(path, delimiter=",", names=True)
        return cls(np.atleast_1d(data["x"]), np.atleast_1d(data["ceded"]), str(path))


def _with_kink(x, M):
    x = np.asarray(x, dtype=float)
    if 0 < M < x[-1]:
        x = np.union1d(x, [M])
    return x


def default_knots(size=2):
    return np.linspace(0.0, 1.0, size)


@dataclass(frozen=True)
class MarketModel:
    """Portfolio of risks, their dependence, prices and the cedent's utility."""

    marginals: tuple
    principles: tuple
    utility: UtilityModel
    c: float
    copula: Copula = field(default_factory=Independence)

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        object.__setattr__(self, "principles", tuple(self.principles))
        n = len(self.marginals)
        if n < 1:
            raise ConfigError("a market needs at least one risk")
        if len(self.principles) != n:
            raise ConfigError("one premium principle per risk is required")
        if not np.isfinite(self.c):
            raise ConfigError("premium income c must be finite")
        if n > 2 and not self.copula.independent:
            raise ConfigError("dependent copulas are bivariate; use independence for n > 2")
        for m, pp in zip(self.marginals, self.principles):
            if not isinstance(pp, PremiumPrinciple):
                raise ConfigError("premium principle has the wrong type")
            if getattr(m, "kind", "") == "pareto" and m.shape <= pp.order:
                raise ConfigError(f"pareto shape {m.shape} must exceed premium moment order {pp.order}")

    @property
    def n(self):
        return len(self.marginals)

    def with_copula(self, copula):
        return MarketModel(self.marginals, self.principles, self.utility, self.c, copula)


@dataclass(frozen=True)
class Strategy:
    treaties: tuple
    premiums: tuple
    moments: tuple = ()

    @classmethod
    def priced(cls, mm, treaties, q=None, disc=None):
        """Build a strategy whose premiums are computed from quadrature moments."""
        disc = disc or Discretization(mm, q)
        moms = tuple(moments(t, mm.marginals[i], mm.principles[i].order, disc=disc, i=i) for i, t in enumerate(treaties))
        prem = tuple(float(pp.premium(m)) for pp, m in zip(mm.principles, moms))
        return cls(tuple(treaties), prem, moms)


def eval_treaty(t, x):
    return t(x)


def moments(t, marginal, k, q=None, disc=None, i=None):
    """``(E Z, E Z^2, ..., E Z^k)`` of the ceded amount under ``marginal``."""
    for r in range(1, k + 1):
        if marginal.raw_moment(r) <= 0:
            raise DomainError("marginal moment vanishes")
    if disc is not None:
        z = t(disc.nodes[i])
        return disc.moments(i, z, k)
    x, w, _ = marginal_nodes(marginal, q or QuadratureSpec())
    z = t(x)
    return np.array([np.sum(w * z ** r) for r in range(1, k + 1)])


def net_profit(mm, s, x):
    """Net profit ``c - sum_i (P_i + x_i - Z_i(x_i))`` for loss vectors ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mm.n:
        raise DomainError("loss vector length does not match the portfolio")
    retained = sum(x[..., i] - s.treaties[i](x[..., i]) for i in range(mm.n))
    return mm.c - float(np.sum(s.premiums)) - retained


def expected_utility(mm, s, q=None, disc=None):
    """``E U(L)`` under the strategy, on the shared discrete joint law."""
    disc = disc or Discretization(mm, q)
    retained = [x - t(x) for x, t in zip(disc.nodes, s.treaties)]
    return disc.expected_utility(retained, s.premiums)
