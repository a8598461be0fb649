"""Bivariate copulas: cdf, density, h-function and its inverse.

The h-function ``cond_cdf(u, v)`` is dC/du, the law of V given U = u.  Its
inverse drives conditional sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, UnsupportedOperation

_COND_MAX_ITER = 200


class Copula:
    kind = "abstract"
    independent = False

    def cdf(self, u, v):
        raise NotImplementedError

    def density(self, u, v):
        raise NotImplementedError

    def cond_cdf(self, u, v):
        raise NotImplementedError

    def cond_quantile(self, u, p, tol=1e-12):
        """Invert ``cond_cdf(u, .)`` by a bracketed Newton iteration.

        Newton steps use the density as derivative; steps leaving the current
        bracket are replaced by bisection, so monotonicity alone guarantees
        convergence.
        """
        u, p = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(p, dtype=float))
        lo = np.zeros(u.shape)
        hi = np.ones(u.shape)
        v = p.copy()
        for _ in range(_COND_MAX_ITER):
            f = self.cond_cdf(u, v) - p
            lo = np.where(f < 0, v, lo)
            hi = np.where(f > 0, v, hi)
            if np.all((np.abs(f) <= tol) | (hi - lo <= 1e-15)):
                return v
            with np.errstate(divide="ignore", invalid="ignore"):
                step = v - f / self.density(u, np.clip(v, 1e-300, 1.0))
            ok = np.isfinite(step) & (step > lo) & (step < hi)
            v = np.where(ok, step, 0.5 * (lo + hi))
        raise NumericError("conditional quantile did not converge")

    def sample(self, n, rng):
        """Draw ``n`` pairs (u, v) using an externally owned generator."""
        u = rng.random(n)
        v = self.cond_quantile(u, rng.random(n))
        return u, v


@dataclass(frozen=True)
class Independence(Copula):
    kind = "independence"
    independent = True

    def cdf(self, u, v):
        return np.asarray(u, dtype=float) * np.asarray(v, dtype=float)

    def density(self, u, v):
        return np.ones(np.broadcast(np.asarray(u), np.asarray(v)).shape)

    def cond_cdf(self, u, v):
        return np.broadcast_arrays(np.asarray(v, dtype=float), np.asarray(u, dtype=float))[0].copy()

    def cond_quantile(self, u, p, tol=1e-12):
        return np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(u, dtype=float))[0].copy()


@dataclass(frozen=True)
class Frank(Copula):
    """Frank copula.

    Negative ``alpha`` is handled by reflecting ``v -> 1 - v`` onto the
    positive case.  For ``alpha > 0`` everything is written in terms of

        D(u, v) = e^(-a u) (1 - e^(-a v)) + e^(-a v) (1 - e^(-a (1 - v))),

    a sum of nonnegative terms, so no cancellation occurs even for large
    ``|alpha|`` near the corners of the square.
    """

    alpha: float = 10.0
    kind = "frank"

    def __post_init__(self):
        if self.alpha == 0 or not np.isfinite(self.alpha):
            raise ConfigError("frank alpha must be finite and nonzero")
        if abs(self.alpha) > 700:
            raise ConfigError("frank |alpha| above 700 overflows double precision")

    def _pos(self, u, v):
        a = abs(self.alpha)
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        eu, ev = np.exp(-a * u), np.exp(-a * v)
        D = eu * -np.expm1(-a * v) + ev * -np.expm1(-a * (1.0 - v))
        return a, u, v, eu, ev, D

    def _reflect(self, v):
        return v if self.alpha > 0 else 1.0 - np.asarray(v, dtype=float)

    def _cdf_pos(self, u, v):
        a, u, v, eu, ev, D = self._pos(u, v)
        if a < 1:
            d = np.expm1(-a)
            return -np.log1p(np.expm1(-a * u) * np.expm1(-a * v) / d) / a
        with np.errstate(divide="ignore"):
            return -(np.log(D) - np.log(-np.expm1(-a))) / a

    def cdf(self, u, v):
        if self.alpha > 0:
            return self._cdf_pos(u, v)
        u = np.asarray(u, dtype=float)
        return u - self._cdf_pos(u, 1.0 - np.asarray(v, dtype=float))

    def density(self, u, v):
        a, u, v, eu, ev, D = self._pos(u, self._reflect(v))
        return a * -np.expm1(-a) * eu * ev / (D * D)

    def cond_cdf(self, u, v):
        a, u, w, eu, ew, D = self._pos(u, self._reflect(v))
        h = eu * -np.expm1(-a * w) / D
        return h if self.alpha > 0 else 1.0 - h

    def cond_quantile(self, u, p, tol=1e-12):
        a = abs(self.alpha)
        eu = np.exp(-a * np.asarray(u, dtype=float))
        p = np.asarray(p, dtype=float)
        if self.alpha < 0:
            p = 1.0 - p
        v = -np.log1p(p * np.expm1(-a) / (eu * (1.0 - p) + p)) / a
        v = np.clip(v, 0.0, 1.0)
        return v if self.alpha > 0 else 1.0 - v


@dataclass(frozen=True)
class FGM(Copula):
    """Farlie-Gumbel-Morgenstern copula ``uv(1 + alpha(1-u)(1-v))``."""

    alpha: float = 1.0
    kind = "fgm"

    def __post_init__(self):
        if not -1.0 <= self.alpha <= 1.0:
            raise ConfigError("fgm alpha must lie in [-1, 1]")

    def cdf(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return u * v * (1.0 + (u - 1.0) * (v - 1.0) * self.alpha)

    def density(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return 1.0 + self.alpha * (2.0 * u - 1.0) * (2.0 * v - 1.0)

    def cond_cdf(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return v + self.alpha * v * (v - 1.0) * (2.0 * u - 1.0)

    def cond_quantile(self, u, p, tol=1e-12):
        # h = v (1 - k) + k v^2 with k = alpha (2u - 1)
        k = self.alpha * (2.0 * np.asarray(u, dtype=float) - 1.0)
        p = np.asarray(p, dtype=float)
        k, p = np.broadcast_arrays(k, p)
        disc = np.sqrt((1.0 - k) ** 2 + 4.0 * k * p)
        with np.errstate(divide="ignore", invalid="ignore"):
            # rationalised root, stable as k -> 0
            v = 2.0 * p / ((1.0 - k) + disc)
        return np.clip(v, 0.0, 1.0)

    def d3(self, u, v):
        """Third mixed derivative d^3 C / du^2 dv = 2 (2v - 1) alpha."""
        v = np.asarray(v, dtype=float)
        return np.broadcast_arrays(2.0 * (2.0 * v - 1.0) * self.alpha, np.asarray(u, dtype=float))[0].copy()


class Checkerboard(Copula):
    """Copula given by its values on a uniform (G+1) x (G+1) grid, with
    constant density inside every cell (cell-wise independence).

    Points on an interior grid line belong to the cell on their right/top.
    """

    kind = "checkerboard"

    def __init__(self, grid, tol=1e-12):
        grid = np.asarray(grid, dtype=float)
        if grid.ndim == 1:
            side = int(round(np.sqrt(grid.size)))
            if side * side != grid.size:
                raise ConfigError(f"checkerboard needs a square number of values, got {grid.size}")
            grid = grid.reshape(side, side)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1] or grid.shape[0] < 2:
            raise ConfigError("checkerboard grid must be a square matrix with at least 2 rows")
        validate_grid(grid, tol)
        self.grid = grid
        self.cells = grid.shape[0] - 1
        g = self.cells
        inc = grid[1:, 1:] - grid[:-1, 1:] - grid[1:, :-1] + grid[:-1, :-1]
        self.cell_density = np.maximum(inc, 0.0) * g * g

    def __repr__(self):
        return f"Checkerboard(cells={self.cells})"

    def _cell(self, w):
        g = self.cells
        w = np.asarray(w, dtype=float)
        idx = np.clip(np.floor(w * g).astype(int), 0, g - 1)
        return idx, w * g - idx

    def breakpoints(self):
        return np.arange(1, self.cells) / self.cells

    def _line(self, i, v):
        # C(i/G, v), linear in v between grid nodes
        j, fv = self._cell(v)
        return self.grid[i, j] * (1 - fv) + self.grid[i, j + 1] * fv

    def cdf(self, u, v):
        i, fu = self._cell(u)
        return self._line(i, v) * (1 - fu) + self._line(i + 1, v) * fu

    def density(self, u, v):
        i, _ = self._cell(u)
        j, _ = self._cell(v)
        return self.cell_density[i, j]

    def cond_cdf(self, u, v):
        i, _ = self._cell(u)
        return (self._line(i + 1, v) - self._line(i, v)) * self.cells


def validate_grid(grid, tol=1e-12):
    """Check groundedness, uniform margins and 2-increasingness of grid values.

    Raises ConfigError naming the first failing node or rectangle.
    """
    g = grid.shape[0] - 1
    pts = np.arange(g + 1) / g
    if np.any(np.abs(grid[0, :]) > tol) or np.any(np.abs(grid[:, 0]) > tol):
        raise ConfigError("checkerboard grid is not grounded: C(0, v) and C(u, 0) must vanish")
    bad = np.flatnonzero(np.abs(grid[:, g] - pts) > tol)
    if bad.size:
        raise ConfigError(f"checkerboard margin violated: C(u, 1) != u at row {bad[0]}")
    bad = np.flatnonzero(np.abs(grid[g, :] - pts) > tol)
    if bad.size:
        raise ConfigError(f"checkerboard margin violated: C(1, v) != v at column {bad[0]}")
    inc = grid[1:, 1:] - grid[:-1, 1:] - grid[1:, :-1] + grid[:-1, :-1]
    bad = np.argwhere(inc < -tol)
    if bad.size:
        i, j = bad[0]
        raise ConfigError(
            f"checkerboard grid not 2-increasing on rectangle [{pts[i]:.4g},{pts[i + 1]:.4g}]"
            f" x [{pts[j]:.4g},{pts[j + 1]:.4g}] (increment {inc[i, j]:.3g})"
        )


def grid_from_cell_masses(masses):
    """Cumulate a G x G table of cell probabilities into copula grid values."""
    masses = np.asarray(masses, dtype=float)
    g = masses.shape[0]
    grid = np.zeros((g + 1, g + 1))
    grid[1:, 1:] = np.cumsum(np.cumsum(masses, axis=0), axis=1)
    return grid


def fgm_d3(cop, u, v):
    if not isinstance(cop, FGM):
        raise UnsupportedOperation("third mixed derivative is only available for the FGM copula")
    return cop.d3(u, v)


def copula_cdf(cop, u, v):
    return cop.cdf(u, v)


def density(cop, u, v):
    return cop.density(u, v)


def cond_cdf(cop, u, v):
    return cop.cond_cdf(u, v)


def cond_quantile(cop, u, p):
    return cop.cond_quantile(u, p)
