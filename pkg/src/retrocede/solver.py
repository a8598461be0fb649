"""Fixed-point computation of optimal deterministic treaties.

For risk ``i`` with the other treaties frozen, the conditional marginal
utility kernel is

    Lambda(x, w) = E[ U'(c - sum_{j != i}(X_j + P_j - Z_j(X_j)) - x + w) | X_i = x ]

and the ceded amount at loss ``x`` is the zero in ``[0, x]`` of the strictly
decreasing

    G(x, z) = Lambda(x, z - Psi(m_i)) - m0 * sum_r dPsi/du_r(m_i) r z^(r-1),

clamped to the interval ends when ``G`` does not change sign.  A barrier
``beta_eps`` keeps the zero strictly inside and makes the induced map

    Upsilon(m0, m_i) = E( Lambda(X_i, Z(X_i) - Psi(m_i)), Z, Z^2, ..., Z^k )

smooth, so its fixed point can be found by Newton's method with an analytic
Jacobian.  ``optimize`` cycles over risks (Gauss-Seidel) while annealing
``eps`` and stops once expected utility no longer improves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, InvalidMoments, NumericError, RetrocedeError, SolverStall
from .quad import Discretization, QuadratureSpec
from .treaty import Strategy, TreatyCurve

logger = logging.getLogger(__name__)

_ROOT_MAX_ITER = 300


@dataclass(frozen=True)
class SolverConfig:
    eps_schedule: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    barrier_alpha: float = 0.25
    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    newton_damping: float = 0.5
    newton_max_halvings: int = 20
    fallback_max_iter: int = 2000
    outer_tol: float = 1e-9
    outer_max_cycles: int = 100
    root_tol: float = 1e-12
    grid_points: int = 401
    grid_prob: float = 1.0 - 1e-6
    init: str = "full"
    polish: bool = True
    polish_tol: float = 1e-10
    polish_max_cycles: int = 60

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_schedule)
        object.__setattr__(self, "eps_schedule", eps)
        if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps_schedule must be a nonempty strictly decreasing list of positive values")
        for name in ("barrier_alpha", "newton_tol", "outer_tol", "root_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.newton_damping < 1:
            raise ConfigError("newton_damping must lie in (0, 1)")
        if self.grid_points < 2 or not 0.5 < self.grid_prob < 1:
            raise ConfigError("invalid treaty grid settings")
        if self.init not in ("full", "null", "stop_loss_median"):
            raise ConfigError("init must be 'full', 'null' or 'stop_loss_median'")


@dataclass
class MomentState:
    """Fixed-point variables: marginal-utility level and per-risk moments."""

    m0: float
    moments: list

    def check(self):
        if not self.m0 > 0:
            raise DomainError("m0 must be positive")
        return self


# -- conditional kernel ------------------------------------------------------


class Kernel:
    """``Lambda`` and its ``U''`` analogue at fixed loss points ``x``.

    ``s`` holds the wealth contributed by everything except risk ``i`` at the
    other risks' quadrature points and ``weights`` their conditional weights
    (shape ``(K,)`` or ``(len(x), K)``).  Exponential utility factorises, so
    the conditional layer collapses to one log-moment per loss point.
    """

    def __init__(self, utility, x, s=None, weights=None, log_kappa=None):
        self.utility = utility
        self.x = np.asarray(x, dtype=float)
        self.exponential = utility.kind == "exponential"
        if self.exponential:
            R = utility.R
            if log_kappa is None:
                s = np.asarray(s, dtype=float)
                weights = np.asarray(weights, dtype=float)
                if weights.ndim == 1:
                    log_kappa = np.full(self.x.shape, float(logsumexp(-R * s, b=weights)))
                else:
                    shift = float(np.max(-R * s))
                    with np.errstate(divide="ignore"):
                        log_kappa = np.log(weights @ np.exp(-R * s - shift)) + shift
            self.log_kappa = np.broadcast_to(np.asarray(log_kappa, dtype=float), self.x.shape)
        else:
            self.s = np.asarray(s, dtype=float)
            self.weights = np.asarray(weights, dtype=float)

    def log_lam(self, w):
        R = self.utility.R
        return math.log(R) + self.log_kappa + R * (self.x - w)

    def _general(self, fn, w):
        wealth = self.s[None, :] - self.x[:, None] + np.asarray(w, dtype=float)[:, None]
        wts = self.weights if self.weights.ndim == 2 else self.weights[None, :]
        return np.sum(wts * fn(wealth), axis=1)

    def lam(self, w):
        if self.exponential:
            with np.errstate(over="ignore"):
                return np.exp(self.log_lam(w))
        return self._general(self.utility.prime, w)

    def dlam(self, w):
        if self.exponential:
            return -self.utility.R * self.lam(w)
        return self._general(self.utility.double_prime, w)


def build_kernel(disc, i, premiums, node_values, x=None):
    """Kernel for risk ``i`` given every other risk's premium and its ceded
    values at its own quadrature nodes."""
    mm = disc.mm
    x = disc.nodes[i] if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    others = [j for j in range(mm.n) if j != i]
    base = mm.c - sum(float(premiums[j]) for j in others)
    util = mm.utility
    if mm.n == 1:
        return Kernel(util, x, np.array([base]), np.array([1.0]))
    if mm.n == 2:
        j = others[0]
        s = base - (disc.nodes[j] - node_values[j])
        weights = disc.cond_weights(i) if x is disc.nodes[i] else disc.cond_weights(i, x)
        return Kernel(util, x, s, weights)
    if util.kind == "exponential":
        R = util.R
        log_k = -R * base
        for j in others:
            log_k += float(logsumexp(R * (disc.nodes[j] - node_values[j]), b=disc.weights[j]))
        return Kernel(util, x, log_kappa=log_k)
    cols, pts = disc.mc_others(i)
    rest = np.zeros(pts.shape[0])
    for c, j in enumerate(cols):
        rest += pts[:, c] - np.interp(pts[:, c], disc.nodes[j], node_values[j])
    return Kernel(util, x, base - rest, np.full(rest.size, 1.0 / rest.size))


# -- barrier and implicit ceded amount --------------------------------------


def barrier(x, z, eps, alpha=1.0):
    """Smooth penalty ``eps * x^(a+1)/(1+x^(a+1)) * (z^-a - (x-z)^-a)``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        scale = 1.0 / (1.0 + x ** (-(alpha + 1.0)))
        return eps * scale * (z ** -alpha - (x - z) ** -alpha)


def barrier_dz(x, z, eps, alpha=1.0):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        scale = 1.0 / (1.0 + x ** (-(alpha + 1.0)))
        return -eps * scale * alpha * (z ** (-alpha - 1.0) + (x - z) ** (-alpha - 1.0))


def _price_terms(psi, z):
    """``sum_r psi_r r z^(r-1)`` and its z-derivative."""
    k = psi.size
    d = np.zeros_like(z)
    dd = np.zeros_like(z)
    for r in range(1, k + 1):
        d += psi[r - 1] * r * z ** (r - 1)
        if r >= 2:
            dd += psi[r - 1] * r * (r - 1) * z ** (r - 2)
    return d, dd


def g_values(kernel, psi, premium, m0, z):
    """``G(x, z)`` at the kernel's loss points (vectorised in ``z``)."""
    d, _ = _price_terms(psi, np.asarray(z, dtype=float))
    return kernel.lam(z - premium) - m0 * d


def _phi(kernel, psi, premium, m0, z, eps, alpha):
    d, dd = _price_terms(psi, z)
    lam = kernel.lam(z - premium)
    dlam = kernel.dlam(z - premium)
    f = lam - m0 * d
    df = dlam - m0 * dd
    if eps > 0:
        f = f + barrier(kernel.x, z, eps, alpha)
        df = df + barrier_dz(kernel.x, z, eps, alpha)
    return f, df


def solve_implicit(kernel, psi, premium, m0, eps, alpha=1.0, root_tol=1e-12, z0=None):
    """Ceded amounts solving ``G + beta_eps = 0`` (or the clamped rule at eps=0).

    A Newton iteration inside a shrinking bracket, with bisection whenever the
    Newton step leaves the bracket or is not finite.
    """
    x = kernel.x
    z = np.zeros_like(x)
    pos = x > 0
    if not np.any(pos):
        return z
    xs = x[pos]
    sub = _SubKernel(kernel, pos)
    lo = np.zeros_like(xs)
    hi = xs.copy()
    active = np.ones(xs.shape, dtype=bool)
    out = np.empty_like(xs)
    if eps == 0:
        g0 = g_values(sub, psi, premium, m0, np.zeros_like(xs))
        gx = g_values(sub, psi, premium, m0, xs)
        at0 = g0 <= 0
        atx = (gx >= 0) & ~at0
        out[at0] = 0.0
        out[atx] = xs[atx]
        active = ~(at0 | atx)
    if z0 is None:
        zc = 0.5 * xs
    else:
        zc = np.clip(np.asarray(z0, dtype=float)[pos], 0.0, xs)
        edge = (zc <= 0) | (zc >= xs)
        zc = np.where(edge, 0.5 * xs, zc)
    tol = root_tol * (1.0 + abs(m0))
    dx_old = xs.copy()
    for _ in range(_ROOT_MAX_ITER):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        sub.select(idx)
        zi = zc[idx]
        f, df = _phi(sub, psi, premium, m0, zi, eps, alpha)
        f = np.where(np.isnan(f), np.inf, f)
        with np.errstate(invalid="ignore"):
            lo[idx] = np.where(f > 0, zi, lo[idx])
            hi[idx] = np.where(f < 0, zi, hi[idx])
            done = (np.abs(f) <= tol) | (hi[idx] - lo[idx] <= 4.4e-16 * np.maximum(hi[idx], 1e-300))
        out[idx[done]] = zi[done]
        active[idx[done]] = False
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = zi - f / df
        # bisect when Newton leaves the bracket or its steps stop halving
        ok = np.isfinite(step) & (step > lo[idx]) & (step < hi[idx]) & (np.abs(step - zi) <= 0.5 * dx_old[idx])
        new = np.where(ok, step, 0.5 * (lo[idx] + hi[idx]))
        dx_old[idx] = np.where(ok, np.abs(step - zi), 0.5 * (hi[idx] - lo[idx]))
        zc[idx] = new
        sub.select(None)
    else:
        raise NumericError("implicit ceded-amount solve did not converge")
    z[pos] = out
    return z


class _SubKernel:
    """View of a kernel restricted to a subset of its loss points."""

    def __init__(self, kernel, mask):
        self.base = kernel
        self.mask_idx = np.flatnonzero(mask)
        self.sel = self.mask_idx
        self.x = kernel.x[self.sel]

    def select(self, idx):
        self.sel = self.mask_idx if idx is None else self.mask_idx[idx]
        self.x = self.base.x[self.sel]

    def _restricted(self):
        k = self.base
        if k.exponential:
            return Kernel(k.utility, self.x, log_kappa=k.log_kappa[self.sel])
        w = k.weights if k.weights.ndim == 1 else k.weights[self.sel]
        return Kernel(k.utility, self.x, k.s, w)

    def lam(self, w):
        return self._restricted().lam(w)

    def dlam(self, w):
        return self._restricted().dlam(w)


# -- the fixed-point map -----------------------------------------------------


@dataclass
class UpsilonEval:
    value: np.ndarray
    z: np.ndarray
    jacobian: np.ndarray | None = None


def upsilon_eval(kernel, weights, pp, m0, mi, eps, alpha=1.0, root_tol=1e-12, z0=None, jacobian=True):
    """Evaluate ``Upsilon(m0, m_i)`` and, for eps > 0, its analytic Jacobian."""
    mi = np.atleast_1d(np.asarray(mi, dtype=float))
    k = pp.order
    premium = pp.premium(mi)
    psi = pp.gradient(mi)
    z = solve_implicit(kernel, psi, premium, m0, eps, alpha, root_tol, z0)
    w = weights
    lam = kernel.lam(z - premium)
    value = np.empty(k + 1)
    value[0] = np.sum(w * lam)
    for r in range(1, k + 1):
        value[r] = np.sum(w * z ** r)
    if not jacobian:
        return UpsilonEval(value, z)
    if eps <= 0:
        raise DomainError("the Jacobian needs eps > 0 (clamped map is not differentiable)")
    hess = pp.hessian(mi)
    dlam = kernel.dlam(z - premium)
    d, dd = _price_terms(psi, z)
    fz = dlam - m0 * dd + barrier_dz(kernel.x, z, eps, alpha)
    pos = kernel.x > 0
    inv = np.where(pos, 1.0 / np.where(pos, fz, 1.0), 0.0)
    # implicit differentiation of G + beta = 0
    dz = np.empty((k + 1, z.size))
    dz[0] = d * inv
    for l in range(k):
        h = np.zeros_like(z)
        for r in range(1, k + 1):
            h += hess[l, r - 1] * r * z ** (r - 1)
        dz[1 + l] = (dlam * psi[l] + m0 * h) * inv
    jac = np.empty((k + 1, k + 1))
    jac[0, 0] = np.sum(w * dlam * dz[0])
    for l in range(k):
        jac[0, 1 + l] = np.sum(w * dlam * (dz[1 + l] - psi[l]))
    for r in range(1, k + 1):
        zr = r * z ** (r - 1)
        for col in range(k + 1):
            jac[r, col] = np.sum(w * zr * dz[col])
    return UpsilonEval(value, z, jac)


def _residual_norm(m, value):
    r = value - m
    scale = np.concatenate([[abs(m[0])], 1.0 + np.abs(m[1:])])
    return float(np.max(np.abs(r) / scale))


def _valid(pp, m):
    if not (np.all(np.isfinite(m)) and m[0] > 0):
        return False
    try:
        pp.gradient(m[1:])
        pp.hessian(m[1:])
    except (InvalidMoments, DomainError):
        return False
    return True


@dataclass
class FixedPoint:
    m0: float
    mi: np.ndarray
    z: np.ndarray
    iterations: int
    residual: float
    method: str
    jacobian: np.ndarray | None = None
    history: list = field(default_factory=list)


def newton_fixed_point(kernel, weights, pp, m0, mi, eps, cfg=None, z0=None):
    """Fixed point of ``Upsilon`` by damped Newton on ``Upsilon(m) - m``.

    Steps that leave the admissible set or fail to reduce the residual are
    halved.  If Newton stalls, damped fixed-point iteration takes over; if that
    stalls too, SolverStall is raised.
    """
    cfg = cfg or SolverConfig()
    if eps <= 0:
        raise DomainError("newton_fixed_point needs eps > 0")
    m = np.concatenate([[m0], np.atleast_1d(np.asarray(mi, dtype=float))])
    if not _valid(pp, m):
        raise DomainError(f"initial moment state {m.tolist()} is not admissible")
    args = (cfg.barrier_alpha, cfg.root_tol)
    ev = upsilon_eval(kernel, weights, pp, m[0], m[1:], eps, *args, z0=z0)
    res = _residual_norm(m, ev.value)
    history = [res]
    it = 0
    while res > cfg.newton_tol and it < cfg.newton_max_iter:
        it += 1
        try:
            step = np.linalg.solve(ev.jacobian - np.eye(m.size), -(ev.value - m))
        except np.linalg.LinAlgError:
            break
        t = 1.0
        accepted = False
        for _ in range(cfg.newton_max_halvings + 1):
            trial = m + t * step
            if _valid(pp, trial):
                try:
                    ev_t = upsilon_eval(kernel, weights, pp, trial[0], trial[1:], eps, *args, z0=ev.z)
                except (InvalidMoments, DomainError):
                    ev_t = None
                if ev_t is not None:
                    res_t = _residual_norm(trial, ev_t.value)
                    if res_t < (1.0 - 1e-4 * t) * res or res_t <= cfg.newton_tol:
                        accepted = True
                        break
            t *= cfg.newton_damping
        if not accepted:
            break
        m, ev, res = trial, ev_t, res_t
        history.append(res)
    if res <= cfg.newton_tol:
        return FixedPoint(m[0], m[1:], ev.z, it, res, "newton", ev.jacobian, history)
    logger.info("newton stalled at residual %.3e; switching to damped iteration", res)
    tau = 0.5
    for k in range(cfg.fallback_max_iter):
        trial = (1 - tau) * m + tau * ev.value
        if not _valid(pp, trial):
            raise SolverStall("damped iteration left the admissible set", {"residual": res, "state": m.tolist()})
        m = trial
        ev = upsilon_eval(kernel, weights, pp, m[0], m[1:], eps, *args, z0=ev.z)
        res = _residual_norm(m, ev.value)
        history.append(res)
        if res <= cfg.newton_tol:
            return FixedPoint(m[0], m[1:], ev.z, it + k + 1, res, "damped", ev.jacobian, history)
    raise SolverStall("fixed-point iteration stalled", {"residual": res, "state": m.tolist(), "eps": eps})


def polish_clamped(kernel, weights, pp, fp, eps_ref, cfg=None, max_iter=30):
    """Move a smoothed fixed point onto the fixed point of the clamped map.

    Uses the Jacobian of the smoothed map at ``eps_ref`` as an approximate
    Jacobian of the (piecewise smooth) clamped map.  Returns the clamped
    ceded values with the best residual seen.
    """
    cfg = cfg or SolverConfig()
    args = (cfg.barrier_alpha, cfg.root_tol)
    m = np.concatenate([[fp.m0], fp.mi])
    ev0 = upsilon_eval(kernel, weights, pp, m[0], m[1:], 0.0, *args, z0=fp.z, jacobian=False)
    best = (_residual_norm(m, ev0.value), m, ev0.z)
    for _ in range(max_iter):
        if best[0] <= cfg.newton_tol:
            break
        m = best[1]
        ev0 = upsilon_eval(kernel, weights, pp, m[0], m[1:], 0.0, *args, z0=best[2], jacobian=False)
        jac = upsilon_eval(kernel, weights, pp, m[0], m[1:], eps_ref, *args, z0=best[2]).jacobian
        try:
            step = np.linalg.solve(jac - np.eye(m.size), -(ev0.value - m))
        except np.linalg.LinAlgError:
            break
        improved = False
        t = 1.0
        for _ in range(cfg.newton_max_halvings + 1):
            trial = m + t * step
            if _valid(pp, trial):
                ev_t = upsilon_eval(kernel, weights, pp, trial[0], trial[1:], 0.0, *args, z0=ev0.z, jacobian=False)
                res_t = _residual_norm(trial, ev_t.value)
                if res_t < best[0]:
                    best = (res_t, trial, ev_t.z)
                    improved = True
                    break
            t *= cfg.newton_damping
        if not improved:
            break
    res, m, z = best
    return FixedPoint(m[0], m[1:], z, 0, res, "clamped")


# -- public single-point operations -----------------------------------------


def lambda_fn(disc, i, premiums, node_values, x, z):
    """``Lambda_i(x, z)`` for the strategy given by ``node_values``."""
    kernel = build_kernel(disc, i, premiums, node_values, x)
    return kernel.lam(np.broadcast_to(np.asarray(z, dtype=float), kernel.x.shape))


def g_fn(disc, i, state, premiums, node_values, x, z):
    pp = disc.mm.principles[i]
    kernel = build_kernel(disc, i, premiums, node_values, x)
    mi = state.moments[i]
    z = np.broadcast_to(np.asarray(z, dtype=float), kernel.x.shape)
    return g_values(kernel, pp.gradient(mi), pp.premium(mi), state.m0, z)


def solve_ceded(disc, i, state, premiums, node_values, x, eps, cfg=None):
    cfg = cfg or SolverConfig()
    pp = disc.mm.principles[i]
    kernel = build_kernel(disc, i, premiums, node_values, x)
    mi = state.moments[i]
    return solve_implicit(kernel, pp.gradient(mi), pp.premium(mi), state.m0, eps, cfg.barrier_alpha, cfg.root_tol)


def upsilon(disc, i, state, premiums, node_values, eps, cfg=None):
    cfg = cfg or SolverConfig()
    kernel = build_kernel(disc, i, premiums, node_values)
    ev = upsilon_eval(kernel, disc.weights[i], disc.mm.principles[i], state.m0, state.moments[i], eps,
                      cfg.barrier_alpha, cfg.root_tol, jacobian=False)
    return ev.value


def upsilon_jacobian(disc, i, state, premiums, node_values, eps, cfg=None):
    cfg = cfg or SolverConfig()
    kernel = build_kernel(disc, i, premiums, node_values)
    ev = upsilon_eval(kernel, disc.weights[i], disc.mm.principles[i], state.m0, state.moments[i], eps,
                      cfg.barrier_alpha, cfg.root_tol)
    return ev.jacobian


# -- main loop ---------------------------------------------------------------


def treaty_grid(marginal, cfg):
    return np.linspace(0.0, float(marginal.quantile(cfg.grid_prob)), cfg.grid_points)


def _regime_switches(disc, i, premiums, values, pp, mi, m0, x, z):
    """Loss levels where the clamped solution leaves or reaches a bound.

    Between adjacent knots whose ceded amounts sit in different regimes
    (at 0, interior, at x) the switching point is a zero of ``G(x, 0)`` or
    ``G(x, x)``; adding it as a knot keeps kinks exact under linear
    interpolation.
    """
    psi, premium = pp.gradient(mi), pp.premium(mi)

    def g_at(xv, full):
        kernel = build_kernel(disc, i, premiums, values, np.array([xv]))
        zv = np.array([xv if full else 0.0])
        return float(g_values(kernel, psi, premium, m0, zv)[0])

    regime = np.where(z <= 0.0, 0, np.where(z >= x, 2, 1))
    pts = []
    for k in np.flatnonzero(regime[:-1] != regime[1:]):
        a, b = x[k], x[k + 1]
        if a <= 0:
            continue
        for full in (False, True):
            if (2 if full else 0) not in (regime[k], regime[k + 1]):
                continue
            ga, gb = g_at(a, full), g_at(b, full)
            if np.isfinite(ga) and np.isfinite(gb) and ga * gb < 0:
                r = brentq(g_at, a, b, args=(full,), xtol=1e-14, rtol=1e-15)
                pts.append((r, r if full else 0.0))
    return pts


def _merge_curve(grid, zg, nodes, zn, label, extra=()):
    x = np.concatenate([grid, nodes, [p[0] for p in extra]])
    z = np.concatenate([zg, zn, [p[1] for p in extra]])
    x, idx = np.unique(x, return_index=True)
    return TreatyCurve(x, z[idx], label)


@dataclass
class OptimizationResult:
    strategy: Strategy
    state: MomentState
    node_values: list
    grids: list
    report: dict
    disc: Discretization


def _initial_values(disc, cfg, init):
    vals = []
    for i, (m, x) in enumerate(zip(disc.mm.marginals, disc.nodes)):
        kind = init if isinstance(init, str) else None
        if kind is None:
            vals.append(np.clip(init[i](x), 0.0, x))
        elif kind == "full":
            vals.append(x.copy())
        elif kind == "null":
            vals.append(np.zeros_like(x))
        else:
            vals.append(np.maximum(0.0, x - float(m.quantile(0.5))))
    return vals


def _quadrature_noise(disc):
    errs = []
    for i, m in enumerate(disc.mm.marginals):
        if not m.has_density:
            continue
        from .quad import marginal_nodes

        x2, w2, _ = marginal_nodes(m, disc.q.refined())
        errs.append(abs(np.sum(disc.weights[i] * disc.nodes[i]) - np.sum(w2 * x2)) / m.raw_moment(1))
    return max(errs, default=0.0)


def optimize(mm, cfg=None, q=None, init=None, disc=None):
    """Cyclic best-response search for the optimal strategy.

    Returns an OptimizationResult whose ``report`` lists, per cycle, the
    barrier level, expected utility, moment state, premiums and Newton
    statistics.  Raises SolverStall (with the cycle attached) when a fixed
    point cannot be found or the cycle budget runs out.
    """
    cfg = cfg or SolverConfig()
    disc = disc or Discretization(mm, q)
    for m in mm.marginals:
        if not m.has_density:
            raise ConfigError("the solver needs marginals with densities (empirical data is not supported)")
    n = mm.n
    pps = mm.principles
    grids = [treaty_grid(m, cfg) for m in mm.marginals]
    values = _initial_values(disc, cfg, init or cfg.init)
    grid_values = [np.interp(g, x, v) for g, x, v in zip(grids, disc.nodes, values)]
    moments = [disc.moments(i, values[i], pps[i].order) for i in range(n)]
    premiums = [pps[i].premium(moments[i]) for i in range(n)]
    retained = [x - v for x, v in zip(disc.nodes, values)]
    m0 = disc.expected_utility(retained, premiums, derivative=1)
    utility = disc.expected_utility(retained, premiums)
    noise = _quadrature_noise(disc) * abs(utility)
    if cfg.outer_tol < 10 * noise:
        logger.warning("outer_tol %.1e is below 10x the estimated quadrature error %.1e", cfg.outer_tol, noise)
    cycles = [_cycle_record(0, None, utility, m0, moments, premiums, [])]
    last_fp = [None] * n
    converged = False

    def step(i, eps, cycle, polish=False):
        nonlocal m0
        kernel = build_kernel(disc, i, premiums, values)
        gkernel = build_kernel(disc, i, premiums, values, grids[i])
        try:
            fp = newton_fixed_point(kernel, disc.weights[i], pps[i], m0, moments[i], eps, cfg, z0=values[i])
            spec = max(abs(np.linalg.eigvals(fp.jacobian))) if fp.jacobian is not None else float("nan")
            if polish:
                fp = polish_clamped(kernel, disc.weights[i], pps[i], fp, eps, cfg)
        except SolverStall as exc:
            exc.diagnostics.update({"cycle": cycle, "risk": i})
            raise
        except RetrocedeError as exc:
            raise SolverStall(f"risk {i} failed in cycle {cycle}: {exc}", {"cycle": cycle, "risk": i}) from exc
        used_eps = 0.0 if polish else eps
        zg = solve_implicit(gkernel, pps[i].gradient(fp.mi), pps[i].premium(fp.mi), fp.m0, used_eps,
                            cfg.barrier_alpha, cfg.root_tol)
        m0 = float(fp.m0)
        moments[i] = np.asarray(fp.mi, dtype=float)
        premiums[i] = pps[i].premium(moments[i])
        values[i] = fp.z
        grid_values[i] = zg
        last_fp[i] = fp
        return {"risk": i, "iterations": fp.iterations, "residual": fp.residual, "method": fp.method,
                "spectral_radius": float(spec)}

    schedule = cfg.eps_schedule
    for cycle in range(1, cfg.outer_max_cycles + 1):
        eps = schedule[min(cycle - 1, len(schedule) - 1)]
        stats = [step(i, eps, cycle) for i in range(n)]
        actual = _actual(disc, pps, values)
        new_u = disc.expected_utility([x - v for x, v in zip(disc.nodes, values)], actual[1])
        cycles.append(_cycle_record(cycle, eps, new_u, m0, moments, actual[1], stats))
        improvement = new_u - utility
        utility = new_u
        if cycle >= len(schedule) and improvement < cfg.outer_tol:
            converged = True
            break
    if not converged:
        raise SolverStall("outer loop did not settle within outer_max_cycles", {"cycle": cfg.outer_max_cycles})
    if cfg.polish:
        # clamped sweeps until no moment moves any more
        for _ in range(cfg.polish_max_cycles):
            before = [np.array(m, dtype=float) for m in moments]
            stats = [step(i, schedule[-1], "polish", polish=True) for i in range(n)]
            actual = _actual(disc, pps, values)
            new_u = disc.expected_utility([x - v for x, v in zip(disc.nodes, values)], actual[1])
            cycles.append(_cycle_record(len(cycles), 0.0, new_u, m0, moments, actual[1], stats))
            shift = max(float(np.max(np.abs(a - b) / (1.0 + np.abs(b)))) for a, b in zip(moments, before))
            if shift <= cfg.polish_tol:
                break
        else:
            logger.warning("clamped sweeps stopped with moment shift %.2e", shift)
    actual_m, actual_p = _actual(disc, pps, values)
    treaties = []
    for i in range(n):
        extra = ()
        if cfg.polish:
            xs = np.concatenate([grids[i], disc.nodes[i]])
            zs = np.concatenate([grid_values[i], values[i]])
            order = np.argsort(xs, kind="stable")
            extra = _regime_switches(disc, i, actual_p, values, pps[i], moments[i], m0, xs[order], zs[order])
        treaties.append(_merge_curve(grids[i], grid_values[i], disc.nodes[i], values[i], f"risk{i + 1}", extra))
    treaties = tuple(treaties)
    strategy = Strategy(treaties, tuple(actual_p), tuple(actual_m))
    report = {
        "converged": converged,
        "cycles": cycles,
        "final_utility": cycles[-1]["utility"],
        "m0": m0,
        "premiums": [float(p) for p in actual_p],
        "moments": [np.asarray(m).tolist() for m in actual_m],
        "rng_seed": disc.q.rng_seed,
        "quadrature_noise": noise,
    }
    return OptimizationResult(strategy, MomentState(m0, list(moments)), values, grids, report, disc)


def _actual(disc, pps, values):
    moms = [disc.moments(i, values[i], pps[i].order) for i in range(len(pps))]
    return moms, [pps[i].premium(moms[i]) for i in range(len(pps))]


def _cycle_record(cycle, eps, utility, m0, moments, premiums, stats):
    return {
        "cycle": cycle,
        "eps": eps,
        "utility": float(utility),
        "m0": float(m0),
        "moments": [np.asarray(m).tolist() for m in moments],
        "premiums": [float(p) for p in premiums],
        "newton": stats,
    }
