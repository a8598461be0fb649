"""Quadrature engines.

One-dimensional expectations are computed in the tail exponent
``t = -log(1 - F(x))``: composite Gauss-Legendre panels cover ``[0, T]`` with
``T = -log(1 - truncation_prob)`` and a Gauss-Laguerre panel carries the
remaining mass ``exp(-T)``.  Under that map every marginal becomes an
exponential law, so panels are equally informative for light and heavy tails.

For two dependent risks the joint law is the tensor grid of both node sets
weighted by the copula density.  Conditional layers can alternatively be
estimated by Monte Carlo with antithetic pairs.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, IntegrabilityError, QuadratureError, UnsupportedOperation

WORKERS_ENV = "RETROCEDE_WORKERS"
MC_CHUNK = 4096
TAIL_SHARE_LIMIT = 1e-3


@dataclass(frozen=True)
class QuadratureSpec:
    mesh_points: int = 256
    order: int = 16
    tail_points: int = 16
    mc_samples: int = 20000
    rng_seed: int = 20240601
    truncation_prob: float = 1.0 - 1e-10
    cond_layer: str = "mesh"
    antithetic: bool = True

    def __post_init__(self):
        if self.mesh_points < 16 or self.mc_samples < 16:
            raise ConfigError("mesh_points and mc_samples must be >= 16")
        if not 0.9 < self.truncation_prob < 1.0:
            raise ConfigError("truncation_prob must lie in (0.9, 1)")
        if self.order < 1 or self.tail_points < 1:
            raise ConfigError("quadrature orders must be positive")
        if self.cond_layer not in ("mesh", "mc"):
            raise ConfigError("cond_layer must be 'mesh' or 'mc'")

    @property
    def horizon(self):
        return -np.log1p(-self.truncation_prob)

    def refined(self):
        return QuadratureSpec(**{**self.__dict__, "mesh_points": 2 * self.mesh_points})


@lru_cache(maxsize=64)
def _tail_rule(mesh_points, order, tail_points, horizon, breaks):
    gx, gw = np.polynomial.legendre.leggauss(order)
    edges = np.union1d(np.linspace(0.0, horizon, mesh_points + 1), [b for b in breaks if 0 < b < horizon])
    a, b = edges[:-1, None], edges[1:, None]
    t = (0.5 * (b - a) * gx + 0.5 * (a + b)).ravel()
    w = (0.5 * (b - a) * gw).ravel() * np.exp(-t)
    lx, lw = np.polynomial.laguerre.laggauss(tail_points)
    t = np.concatenate([t, horizon + lx])
    w = np.concatenate([w, np.exp(-horizon) * lw])
    tail = np.zeros(t.size, dtype=bool)
    tail[-tail_points:] = True
    t.flags.writeable = w.flags.writeable = tail.flags.writeable = False
    return t, w, tail


def tail_rule(q, breaks=()):
    """Nodes ``t`` and weights for expectations under the unit exponential law."""
    return _tail_rule(q.mesh_points, q.order, q.tail_points, float(q.horizon), tuple(float(b) for b in breaks))


def marginal_nodes(marginal, q, prob_breaks=()):
    """Quadrature nodes and weights for ``E g(X)`` under ``marginal``.

    ``prob_breaks`` are probability levels where the integrand may jump; panel
    edges are inserted at the matching tail exponents.
    """
    if not marginal.has_density:
        x = np.asarray(marginal.data, dtype=float)
        w = np.full(x.size, 1.0 / x.size)
        return x, w, np.zeros(x.size, dtype=bool)
    breaks = [-np.log1p(-p) for p in prob_breaks if 0 < p < 1]
    t, w, tail = tail_rule(q, breaks)
    return np.asarray(marginal.from_tail(t), dtype=float), np.asarray(w), tail


def _tail_share(values, w, tail):
    total = np.sum(w * values)
    if not np.isfinite(total):
        return np.inf
    if total == 0:
        return 0.0
    return abs(np.sum((w * values)[tail])) / abs(total)


def integrate_marginal(f, marginal, q=None, rtol=1e-7, check_tail=False, prob_breaks=()):
    """``E f(X)`` with a mesh-doubling convergence guard.

    ``prob_breaks`` lists probability levels where ``f`` may jump; they are
    made panel boundaries.

    Raises QuadratureError when doubling the panel count moves the result by
    more than ``rtol`` (relative), and IntegrabilityError when ``check_tail``
    is set and the tail panel carries more than 0.1% of the result.
    """
    q = q or QuadratureSpec()
    x, w, tail = marginal_nodes(marginal, q, prob_breaks)
    vals = np.asarray(f(x), dtype=float) * np.ones_like(x)
    coarse = float(np.sum(w * vals))
    if not np.isfinite(coarse):
        raise IntegrabilityError("integrand is not finite on the quadrature nodes")
    if check_tail and _tail_share(vals, w, tail) > TAIL_SHARE_LIMIT:
        raise IntegrabilityError("expectation does not converge: tail panel dominates")
    if not marginal.has_density:
        return coarse
    x2, w2, _ = marginal_nodes(marginal, q.refined(), prob_breaks)
    fine = float(np.sum(w2 * np.asarray(f(x2), dtype=float) * np.ones_like(x2)))
    if abs(fine - coarse) > rtol * max(abs(fine), 1e-300):
        raise QuadratureError(
            f"mesh doubling changed the integral from {coarse:.12g} to {fine:.12g}"
            f" (relative {abs(fine - coarse) / max(abs(fine), 1e-300):.2e} > {rtol:.1e})"
        )
    return fine


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def mc_map(fn, n, seed, antithetic=True, dim=1):
    """Evaluate ``fn`` on ``n`` uniform draws of dimension ``dim``.

    Draws are generated in fixed chunks, each from its own spawned substream,
    and results are concatenated in chunk order; the output depends only on
    ``seed`` and ``n``, never on the worker count.  With ``antithetic`` each
    chunk holds pairs ``(U, 1 - U)``.
    """
    n_chunks = max(1, -(-n // MC_CHUNK))
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [min(MC_CHUNK, n - k * MC_CHUNK) for k in range(n_chunks)]

    def run(k):
        rng = np.random.default_rng(streams[k])
        size = sizes[k]
        if antithetic:
            half = rng.random(((size + 1) // 2, dim))
            u = np.concatenate([half, 1.0 - half])[:size]
        else:
            u = rng.random((size, dim))
        return np.asarray(fn(u))

    workers = _workers()
    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(n_chunks)))
    else:
        parts = [run(k) for k in range(n_chunks)]
    return np.concatenate(parts)


def _copula_breaks(copula):
    return tuple(copula.breakpoints()) if hasattr(copula, "breakpoints") else ()


def _oriented_density(copula, i, ui, uj):
    """Copula density with risk ``i`` conditioned on; rows follow ``ui``."""
    if i == 0:
        return copula.density(ui[:, None], uj[None, :])
    return copula.density(uj[None, :], ui[:, None])


def _cond_quantile_oriented(copula, i, ui, p):
    if i == 0:
        return copula.cond_quantile(ui, p)
    # V = U_1 given U_2: swap roles, valid for exchangeable and grid copulas alike
    if copula.independent:
        return p
    if hasattr(copula, "grid"):
        from .copula import Checkerboard

        return Checkerboard(copula.grid.T).cond_quantile(ui, p)
    return copula.cond_quantile(ui, p)


def cond_expect(mm, i, x, g, q=None, method=None):
    """``E[g(X) | X_i = x]`` for a loss-vector function ``g``.

    ``g`` receives an array of shape ``(K, n)`` of loss vectors and returns
    ``K`` values.  Two dependent risks use mesh quadrature against the
    conditional density ``c(F_i(x), F_j(y)) f_j(y)``; independent portfolios
    of any size and the ``"mc"`` method use conditional sampling.
    """
    q = q or QuadratureSpec()
    method = method or q.cond_layer
    if method == "mc":
        return cond_expect_mc(mm, i, x, g, q)[0]
    n = len(mm.marginals)
    if n == 1:
        return float(np.asarray(g(np.array([[float(x)]]))).ravel()[0])
    if n > 2:
        if not mm.copula.independent:
            raise UnsupportedOperation("dependent portfolios are limited to two risks")
        return cond_expect_mc(mm, i, x, g, q)[0]
    j = 1 - i
    y, w, _ = marginal_nodes(mm.marginals[j], q, _copula_breaks(mm.copula))
    ui = np.atleast_1d(mm.marginals[i].cdf(x))
    dens = _oriented_density(mm.copula, i, ui, mm.marginals[j].cdf(y))[0]
    pts = np.empty((y.size, 2))
    pts[:, i] = x
    pts[:, j] = y
    return float(np.sum(w * dens * np.asarray(g(pts), dtype=float)))


def cond_expect_mc(mm, i, x, g, q=None):
    """Monte Carlo estimate of ``E[g(X) | X_i = x]`` and its standard error.

    The standard error treats each antithetic pair as one draw.
    """
    q = q or QuadratureSpec()
    n = len(mm.marginals)
    others = [j for j in range(n) if j != i]
    if n > 2 and not mm.copula.independent:
        raise UnsupportedOperation("dependent portfolios are limited to two risks")
    ui = float(mm.marginals[i].cdf(x))

    def draw(u):
        pts = np.empty((u.shape[0], n))
        pts[:, i] = x
        for col, j in enumerate(others):
            p = u[:, col]
            v = p if (n > 2 or mm.copula.independent) else _cond_quantile_oriented(mm.copula, i, np.full(p.shape, ui), p)
            pts[:, j] = mm.marginals[j].quantile(np.clip(v, 0.0, 1.0 - 1e-16))
        return np.asarray(g(pts), dtype=float)

    vals = mc_map(draw, q.mc_samples, q.rng_seed, q.antithetic, dim=max(1, len(others)))
    mean = float(np.mean(vals))
    if q.antithetic:
        pairs = _antithetic_pairs(vals)
        se = float(np.std(pairs, ddof=1) / np.sqrt(pairs.size))
    else:
        se = float(np.std(vals, ddof=1) / np.sqrt(vals.size))
    return mean, se


def _antithetic_pairs(vals):
    out = []
    for start in range(0, vals.size, MC_CHUNK):
        chunk = vals[start:start + MC_CHUNK]
        half = (chunk.size + 1) // 2
        a, b = chunk[:half], chunk[half:]
        m = min(a.size, b.size)
        out.append(0.5 * (a[:m] + b[:m]))
    return np.concatenate(out)


class Discretization:
    """Fixed node sets for every risk and, for two dependent risks, the copula
    density on their tensor grid.

    All expectations of the solver and of the reporting code go through one
    instance, so that values compared across cycles use one and the same
    discrete measure.
    """

    def __init__(self, mm, q=None):
        self.mm = mm
        self.q = q or QuadratureSpec()
        self.n = len(mm.marginals)
        breaks = _copula_breaks(mm.copula)
        self.nodes, self.weights, self.tail = [], [], []
        for m in mm.marginals:
            x, w, tail = marginal_nodes(m, self.q, breaks)
            self.nodes.append(x)
            self.weights.append(w)
            self.tail.append(tail)
        self.u = [np.asarray(m.cdf(x)) for m, x in zip(mm.marginals, self.nodes)]
        self.dependent = self.n == 2 and not mm.copula.independent
        self.density = _oriented_density(mm.copula, 0, self.u[0], self.u[1]) if self.dependent else None
        self._mc_cache = {}

    def cond_weights(self, i, x=None):
        """Weights of the other risk's nodes given ``X_i = x`` (rows follow x).

        Only defined for two risks; shape ``(len(x), N_j)``.
        """
        j = 1 - i
        wj = self.weights[j]
        if x is None:
            if not self.dependent:
                return np.broadcast_to(wj, (self.nodes[i].size, wj.size))
            dens = self.density if i == 0 else self.density.T
            return dens * wj[None, :]
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not self.dependent:
            return np.broadcast_to(wj, (x.size, wj.size))
        ui = np.asarray(self.mm.marginals[i].cdf(x))
        return _oriented_density(self.mm.copula, i, ui, self.u[j]) * wj[None, :]

    def mc_others(self, i):
        """Uniform-weight Monte Carlo draws of all risks other than ``i``.

        Used for independent portfolios of three or more risks under a general
        utility; cached per risk so that repeated evaluations share draws.
        """
        if i not in self._mc_cache:
            others = [j for j in range(self.n) if j != i]

            def draw(u):
                return np.column_stack([self.mm.marginals[j].quantile(np.clip(u[:, c], 0, 1 - 1e-16)) for c, j in enumerate(others)])

            pts = mc_map(draw, self.q.mc_samples, self.q.rng_seed + 7919 * (i + 1), self.q.antithetic, dim=len(others))
            self._mc_cache[i] = (others, pts)
        return self._mc_cache[i]

    def moments(self, i, z, k):
        w = self.weights[i]
        return np.array([np.sum(w * z ** r) for r in range(1, k + 1)])

    def expected_utility(self, retained, premiums, derivative=0):
        """``E U^(d)(L)`` for retained losses given at every risk's nodes.

        ``derivative`` selects U (0), U' (1) or U'' (2).
        """
        mm = self.mm
        wealth0 = mm.c - float(np.sum(premiums))
        util = mm.utility
        if util.kind == "exponential":
            log_e = self._log_mean_exp(retained, util.R)
            base = -util.R * wealth0 + log_e
            sign, scale = {0: (-1.0, 1.0), 1: (1.0, util.R), 2: (-1.0, util.R ** 2)}[derivative]
            with np.errstate(over="ignore"):
                return sign * scale * float(np.exp(base))
        fn = {0: util.value, 1: util.prime, 2: util.double_prime}[derivative]
        if self.n == 1:
            vals = fn(wealth0 - retained[0])
            return self._checked(np.sum(self.weights[0] * vals), vals, self.weights[0], self.tail[0])
        if self.n == 2:
            wealth = wealth0 - retained[0][:, None] - retained[1][None, :]
            joint = self.cond_weights(0) * self.weights[0][:, None]
            vals = fn(wealth)
            total = float(np.sum(joint * vals))
            self._checked(total, np.sum(self.cond_weights(0) * vals, axis=1), self.weights[0], self.tail[0])
            return total
        # independent, n >= 3: nodes of risk 0, Monte Carlo for the rest
        others, pts = self.mc_others(0)
        rest = np.zeros(pts.shape[0])
        for c, j in enumerate(others):
            rest += np.interp(pts[:, c], self.nodes[j], retained[j])
        vals = fn(wealth0 - retained[0][:, None] - rest[None, :])
        return float(np.sum(self.weights[0][:, None] * vals) / rest.size)

    @staticmethod
    def _checked(total, vals, w, tail):
        if not np.isfinite(total) or _tail_share(vals, w, tail) > TAIL_SHARE_LIMIT:
            raise IntegrabilityError("expected utility diverges: retained risk is not integrable")
        return float(total)

    def _log_mean_exp(self, retained, R):
        """log E exp(R * sum_i retained_i) with overflow-safe scaling."""
        if self.n == 2 and self.dependent:
            a = R * retained[0]
            b = R * retained[1]
            sa, sb = a.max(), b.max()
            ea, eb = np.exp(a - sa), np.exp(b - sb)
            inner = self.density @ (self.weights[1] * eb)
            contrib = self.weights[0] * ea * inner
            self._check_tail_exp(contrib, self.tail[0])
            self._check_tail_exp(self.weights[1] * eb * (self.density.T @ (self.weights[0] * ea)), self.tail[1])
            return float(np.log(np.sum(contrib)) + sa + sb)
        total = 0.0
        for i in range(self.n):
            a = R * retained[i]
            s = a.max()
            contrib = self.weights[i] * np.exp(a - s)
            self._check_tail_exp(contrib, self.tail[i])
            total += float(np.log(np.sum(contrib)) + s)
        return total

    @staticmethod
    def _check_tail_exp(contrib, tail):
        total = np.sum(contrib)
        if not np.isfinite(total) or total <= 0:
            raise IntegrabilityError("expected utility is not finite")
        if np.sum(contrib[tail]) > TAIL_SHARE_LIMIT * total:
            raise IntegrabilityError("expected utility diverges: tail panel dominates the exponential moment")
