"""Premium principles priced on moment vectors, and utility functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, InvalidMoments

MOMENT_TOL = 1e-9
VARIANCE_FLOOR = 1e-12


def check_moments(m, tol=MOMENT_TOL):
    """Raise InvalidMoments unless ``m`` lies in the closure of the ordered set
    ``0 <= m1 <= m2**(1/2) <= ... <= mk**(1/k)``."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(m)):
        raise InvalidMoments("moment vector is not finite")
    if np.any(m < -tol):
        raise InvalidMoments(f"negative moment in {m.tolist()}")
    means = np.maximum(m, 0.0) ** (1.0 / np.arange(1, m.size + 1))
    gaps = means[:-1] - means[1:]
    if np.any(gaps > tol * np.maximum(1.0, means[1:])):
        raise InvalidMoments(f"power means not ordered for {m.tolist()}")
    return m


class PremiumPrinciple:
    """Premium ``Psi(E Z, E Z^2, ..., E Z^k)`` of a ceded risk."""

    order = 1
    kind = "abstract"

    def premium(self, m):
        raise NotImplementedError

    def gradient(self, m):
        raise NotImplementedError

    def hessian(self, m):
        raise NotImplementedError

    def __call__(self, m):
        return self.premium(m)


@dataclass(frozen=True)
class ExpectedValue(PremiumPrinciple):
    theta: float = 0.0
    kind = "expected_value"
    order = 1

    def __post_init__(self):
        if not self.theta >= 0:
            raise ConfigError("loading theta must be >= 0")

    def premium(self, m):
        m = check_moments(m)
        return (1.0 + self.theta) * float(m[0])

    def gradient(self, m):
        return np.array([1.0 + self.theta])

    def hessian(self, m):
        return np.zeros((1, 1))


@dataclass(frozen=True)
class StdDev(PremiumPrinciple):
    """``E Z + theta * sd(Z)``."""

    theta: float = 0.0
    kind = "std_dev"
    order = 2

    def __post_init__(self):
        if not self.theta >= 0:
            raise ConfigError("loading theta must be >= 0")

    def premium(self, m):
        m = check_moments(m)
        return float(m[0] + self.theta * np.sqrt(max(m[1] - m[0] ** 2, 0.0)))

    def _sd(self, m):
        m = check_moments(m)
        var = m[1] - m[0] ** 2
        if var < VARIANCE_FLOOR:
            raise DomainError("standard deviation principle is not differentiable at zero variance")
        return m, np.sqrt(var)

    def gradient(self, m):
        m, sd = self._sd(m)
        return np.array([1.0 - self.theta * m[0] / sd, 0.5 * self.theta / sd])

    def hessian(self, m):
        m, sd = self._sd(m)
        var = sd * sd
        t = self.theta
        h11 = -t / sd - t * m[0] ** 2 / (sd * var)
        h12 = 0.5 * t * m[0] / (sd * var)
        h22 = -0.25 * t / (sd * var)
        return np.array([[h11, h12], [h12, h22]])


@dataclass(frozen=True)
class Variance(PremiumPrinciple):
    """``E Z + g(Var Z)`` for an increasing loading function ``g``."""

    g: Callable[[float], float]
    dg: Callable[[float], float]
    d2g: Callable[[float], float]
    kind = "variance"
    order = 2

    @classmethod
    def linear(cls, theta):
        if not theta >= 0:
            raise ConfigError("loading theta must be >= 0")
        return cls(lambda v: theta * v, lambda v: theta, lambda v: 0.0)

    def premium(self, m):
        m = check_moments(m)
        return float(m[0] + self.g(max(m[1] - m[0] ** 2, 0.0)))

    def gradient(self, m):
        m = check_moments(m)
        d = self.dg(max(m[1] - m[0] ** 2, 0.0))
        return np.array([1.0 - 2.0 * m[0] * d, d])

    def hessian(self, m):
        m = check_moments(m)
        var = max(m[1] - m[0] ** 2, 0.0)
        d, dd = self.dg(var), self.d2g(var)
        return np.array([[-2.0 * d + 4.0 * m[0] ** 2 * dd, -2.0 * m[0] * dd], [-2.0 * m[0] * dd, dd]])


@dataclass(frozen=True)
class GeneralMoment(PremiumPrinciple):
    """User-supplied premium of the first ``order`` moments."""

    psi: Callable
    grad: Callable
    hess: Callable
    order: int = 1
    kind = "general"

    def premium(self, m):
        return float(self.psi(check_moments(m)))

    def gradient(self, m):
        return np.asarray(self.grad(check_moments(m)), dtype=float)

    def hessian(self, m):
        return np.asarray(self.hess(check_moments(m)), dtype=float)


def premium(pp, m):
    return pp.premium(m)


def premium_gradient(pp, m):
    return pp.gradient(m)


class UtilityModel:
    kind = "abstract"
    bound = np.inf

    def value(self, x):
        raise NotImplementedError

    def prime(self, x):
        raise NotImplementedError

    def double_prime(self, x):
        raise NotImplementedError


@dataclass(frozen=True)
class ExponentialUtility(UtilityModel):
    """``U(x) = -exp(-R x)``; constant absolute risk aversion ``R``.

    Overflow returns the infinite sentinel instead of a warning.
    """

    R: float = 1.0
    kind = "exponential"

    def __post_init__(self):
        if not self.R > 0:
            raise ConfigError("risk aversion R must be positive")

    def _e(self, x):
        with np.errstate(over="ignore"):
            return np.exp(-self.R * np.asarray(x, dtype=float))

    def value(self, x):
        return -self._e(x)

    def prime(self, x):
        return self.R * self._e(x)

    def double_prime(self, x):
        return -self.R * self.R * self._e(x)


@dataclass(frozen=True)
class GeneralConcave(UtilityModel):
    """Concave utility defined on ``(-inf, bound]`` with explicit derivatives."""

    U: Callable
    dU: Callable
    d2U: Callable
    bound: float = np.inf
    kind = "general"

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x > self.bound + 1e-12):
            raise DomainError("wealth exceeds the utility's domain bound")
        return x

    def value(self, x):
        return np.asarray(self.U(self._check(x)), dtype=float)

    def prime(self, x):
        return np.asarray(self.dU(self._check(x)), dtype=float)

    def double_prime(self, x):
        return np.asarray(self.d2U(self._check(x)), dtype=float)


def utility(u, x):
    return u.value(x)


def utility_prime(u, x):
    return u.prime(x)


def utility_double_prime(u, x):
    return u.double_prime(x)
