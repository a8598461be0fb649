"""Marginal loss distributions.

Every model exposes ``cdf``, ``pdf``, ``quantile`` and ``raw_moment`` working on
scalars or numpy arrays, plus ``from_tail(t)``, the loss whose survival
probability is ``exp(-t)``.  Quadrature meshes are laid out in that tail
exponent, which keeps both light and Pareto tails well resolved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, DomainError, UnsupportedOperation


class Marginal:
    """Common interface for one-dimensional loss models on [0, inf)."""

    kind = "abstract"
    has_density = True

    def cdf(self, x):
        raise NotImplementedError

    def pdf(self, x):
        raise NotImplementedError

    def quantile(self, p):
        raise NotImplementedError

    def raw_moment(self, k):
        raise NotImplementedError

    def from_tail(self, t):
        """Loss level ``x`` with ``P(X > x) = exp(-t)``."""
        return self.quantile(-np.expm1(-np.asarray(t, dtype=float)))

    def truncation(self, p):
        """Upper end of the support kept when discarding mass ``1 - p``."""
        return float(self.quantile(p))

    def sample(self, n, rng):
        return self.quantile(rng.random(n))

    def _check_p(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
            raise DomainError("probability outside [0, 1]")
        if np.any(p >= 1):
            raise DomainError(f"{self.kind} has unbounded support; quantile(1) is infinite")
        return p


@dataclass(frozen=True)
class Exponential(Marginal):
    rate: float = 1.0
    kind = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError("exponential rate must be positive")

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, -np.expm1(-self.rate * np.maximum(x, 0.0)), 0.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, self.rate * np.exp(-self.rate * np.maximum(x, 0.0)), 0.0)

    def quantile(self, p):
        p = self._check_p(p)
        return -np.log1p(-p) / self.rate

    def from_tail(self, t):
        return np.asarray(t, dtype=float) / self.rate

    def raw_moment(self, k):
        if k < 1:
            raise DomainError("moment order must be >= 1")
        return math.factorial(int(k)) / self.rate ** k


@dataclass(frozen=True)
class Pareto(Marginal):
    """Lomax form ``F(x) = 1 - (scale / (scale + x)) ** shape``."""

    scale: float = 4.0
    shape: float = 5.0
    kind = "pareto"

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("pareto scale must be positive")
        if not self.shape > 1:
            raise ConfigError("pareto shape must exceed 1 (finite mean)")

    def cdf(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return -np.expm1(-self.shape * np.log1p(x / self.scale))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        xx = np.maximum(x, 0.0)
        dens = self.shape / self.scale * np.exp(-(self.shape + 1) * np.log1p(xx / self.scale))
        return np.where(x >= 0, dens, 0.0)

    def quantile(self, p):
        p = self._check_p(p)
        return self.scale * np.expm1(-np.log1p(-p) / self.shape)

    def from_tail(self, t):
        return self.scale * np.expm1(np.asarray(t, dtype=float) / self.shape)

    def raw_moment(self, k):
        if k < 1:
            raise DomainError("moment order must be >= 1")
        if k >= self.shape:
            raise DomainError(f"moment of order {k} does not exist for shape {self.shape}")
        return float(self.scale ** k * np.exp(gammaln(k + 1) + gammaln(self.shape - k) - gammaln(self.shape)))


@dataclass(frozen=True)
class Empirical(Marginal):
    """Empirical law of a loss sample; usable for moments, not by the solver."""

    sample_values: tuple = field(default=())
    kind = "empirical"
    has_density = False

    def __post_init__(self):
        data = np.sort(np.asarray(self.sample_values, dtype=float))
        if data.size == 0:
            raise ConfigError("empirical sample is empty")
        if np.any(data < 0) or not np.all(np.isfinite(data)):
            raise ConfigError("empirical losses must be finite and nonnegative")
        object.__setattr__(self, "sample_values", tuple(data.tolist()))

    @property
    def data(self):
        return np.asarray(self.sample_values)

    def cdf(self, x):
        return np.searchsorted(self.data, np.asarray(x, dtype=float), side="right") / self.data.size

    def pdf(self, x):
        raise UnsupportedOperation("empirical marginal has no density")

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p > 1)):
            raise DomainError("probability outside [0, 1]")
        data = self.data
        idx = np.clip(np.ceil(p * data.size).astype(int) - 1, 0, data.size - 1)
        return np.where(p <= 0, 0.0, data[idx])

    def from_tail(self, t):
        return self.quantile(np.minimum(-np.expm1(-np.asarray(t, dtype=float)), 1.0))

    def raw_moment(self, k):
        if k < 1:
            raise DomainError("moment order must be >= 1")
        return float(np.mean(self.data ** k))


def cdf(model, x):
    return model.cdf(x)


def pdf(model, x):
    return model.pdf(x)


def quantile(model, p):
    return model.quantile(p)


def raw_moment(model, k):
    return model.raw_moment(k)
