"""Independent checks of computed treaties and of the supporting formulas.

``optimality_residual`` measures how far a strategy is from satisfying the
first-order conditions of the optimization problem.  ``stoploss_diagnostic``
and ``concavity_probe`` evaluate two closed-form constructions used to argue
that stop-loss treaties are not optimal under FGM dependence and that the
utility criterion is neither concave nor convex over randomized strategies.
``brute_force_oracle`` is a slow but transparent grid search against which
the solver can be compared.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import integrate

from .copula import copula_cdf
from .errors import DomainError, OracleRefused
from .quad import Discretization
from .solver import SolverConfig, build_kernel, treaty_grid
from .treaty import Strategy, TreatyCurve

BOUND_TOL = 1e-6
ORACLE_MAX_GRID = 64


# -- first-order conditions -------------------------------------------------


@dataclass
class RiskResidual:
    x: np.ndarray
    z: np.ndarray
    side: np.ndarray  # "zero", "interior" or "full"
    lhs: np.ndarray
    rhs: np.ndarray
    violation: np.ndarray

    def rows(self):
        for row in zip(self.x, self.z, self.side, self.lhs, self.rhs, self.violation):
            yield row


@dataclass
class ResidualReport:
    risks: list
    m0: float
    max_violation: float = field(init=False)

    def __post_init__(self):
        self.max_violation = max((float(np.max(r.violation)) for r in self.risks), default=0.0)

    @property
    def relative(self):
        return self.max_violation / self.m0

    def to_dict(self):
        return {
            "m0": self.m0,
            "max_violation": self.max_violation,
            "relative_violation": self.relative,
            "per_risk": [
                {
                    "max_violation": float(np.max(r.violation)),
                    "points": {s: int(np.sum(r.side == s)) for s in ("zero", "interior", "full")},
                }
                for r in self.risks
            ],
        }

    def to_csv(self, i, path):
        with open(path, "w") as fh:
            fh.write("x,ceded,side,lhs,rhs,violation\n")
            for x, z, side, lhs, rhs, v in self.risks[i].rows():
                fh.write(f"{x!r},{z!r},{side},{lhs!r},{rhs!r},{v!r}\n")


def optimality_residual(mm, s, q=None, disc=None, grids=None):
    """Check the first-order conditions of ``s`` on each risk's treaty grid.

    At every grid loss ``x`` the conditional expected marginal utility
    ``E[U'(L) | X_i = x]`` (``lhs``) is compared with the marginal price of
    ceding, ``E U'(L) * sum_r dPsi/du_r r z^(r-1)`` (``rhs``).  Depending on
    whether ``Z_i(x)`` sits at 0, strictly inside, or at ``x``, optimality
    requires ``lhs <= rhs``, ``lhs == rhs`` or ``lhs >= rhs``.
    """
    disc = disc or Discretization(mm, q)
    grids = grids or [treaty_grid(m, SolverConfig()) for m in mm.marginals]
    values = [np.asarray(t(x), dtype=float) for t, x in zip(s.treaties, disc.nodes)]
    pps = mm.principles
    moms = [disc.moments(i, values[i], pps[i].order) for i in range(mm.n)]
    prem = [pps[i].premium(moms[i]) for i in range(mm.n)]
    m0 = disc.expected_utility([x - v for x, v in zip(disc.nodes, values)], prem, derivative=1)
    risks = []
    for i in range(mm.n):
        x = np.asarray(grids[i], dtype=float)
        z = np.asarray(s.treaties[i](x), dtype=float)
        kernel = build_kernel(disc, i, prem, values, x)
        lhs = kernel.lam(z - prem[i])
        psi = pps[i].gradient(moms[i])
        rhs = m0 * sum(psi[r - 1] * r * z ** (r - 1) for r in range(1, psi.size + 1))
        at0 = z <= BOUND_TOL * x
        atx = (z >= x - BOUND_TOL * x) & ~at0
        side = np.where(at0, "zero", np.where(atx, "full", "interior"))
        viol = np.where(at0, np.maximum(0.0, lhs - rhs), np.where(atx, np.maximum(0.0, rhs - lhs), np.abs(lhs - rhs)))
        viol = np.where(x > 0, viol, 0.0)
        risks.append(RiskResidual(x, z, side, lhs, rhs, viol))
    return ResidualReport(risks, float(m0))


# -- stop-loss non-optimality under FGM ---------------------------------------


@dataclass(frozen=True)
class StopLossDiagnostic:
    lhs: float
    d_analytic: float
    d_numeric: float


def _stoploss_lhs(f2, alpha, R, M2):
    if M2 <= 0:
        return 0.0

    def integrand(x):
        return (math.exp(R * M2) - math.exp(R * x)) * 2.0 * (2.0 * float(f2.cdf(x)) - 1.0) * alpha * float(f2.pdf(x))

    with warnings.catch_warnings():
        # roundoff near the requested epsrel is reported but harmless here
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(integrand, 0.0, M2, epsabs=0.0, epsrel=1e-13, limit=200)
    return val


def stoploss_diagnostic(f2, alpha, R, M2, u=None):
    """Expression that must stay constant in ``M2`` for a stop-loss treaty on
    the second risk to be optimal under FGM dependence, with its derivative.

    The third mixed copula derivative of FGM does not depend on ``u``, so
    ``u`` is accepted for interface symmetry and ignored.
    """
    if not 0 < alpha <= 1:
        raise DomainError("alpha must lie in (0, 1]")
    if M2 < 0:
        raise DomainError("M2 must be nonnegative")
    lhs = _stoploss_lhs(f2, alpha, R, M2)
    F = float(f2.cdf(M2))
    d_an = R * math.exp(R * M2) * 2.0 * alpha * F * (F - 1.0)
    if M2 == 0:
        d_num = 0.0
    else:
        h = min(1e-4 * (1.0 + M2), 0.5 * M2)
        d_num = (_stoploss_lhs(f2, alpha, R, M2 + h) - _stoploss_lhs(f2, alpha, R, M2 - h)) / (2 * h)
    return StopLossDiagnostic(lhs, d_an, d_num)


# -- non-concavity over randomized strategies -------------------------------


@dataclass(frozen=True)
class ConcavityProbe:
    A: float
    B: float
    C: float
    m: float
    sign_expr: float
    B_quad: float
    C_quad: float
    t: np.ndarray
    d2_analytic: np.ndarray
    d2_numeric: np.ndarray


def _expected_exp_retained(lam, R, pieces):
    """``E exp(R * retained)`` for an exponential loss, retained given on
    consecutive intervals as ``(lo, hi, fn)``; ``hi`` may be ``inf``."""
    total = 0.0
    for lo, hi, fn in pieces:
        val, _ = integrate.quad(lambda x: lam * math.exp(-lam * x + R * fn(x)), lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)
        total += val
    return total


def concavity_probe(lambda_rate, R, theta, a, b, eps_shift, t=None):
    """Closed forms for mixing a stop-loss with a two-layer treaty.

    With ``Z(x) = (x-m)^+`` and ``Z~(x) = x 1{x<=a} + (x-b)^+`` and
    ``eps_shift = E Z~ - E Z``, expected utility along the mixture
    ``(1-t) Z + t Z~`` is proportional to ``-exp(A t)(B + (C-B) t)``.  The sign
    of ``A(AB + 2(C-B))`` decides the local curvature.
    """
    lam = float(lambda_rate)
    if R == lam:
        raise DomainError("R must differ from the exponential rate")
    if not 0 < a < b:
        raise DomainError("need 0 < a < b")
    S = math.exp(-lam * a) * (math.expm1(lam * a) - lam * a) + math.exp(-lam * b)
    arg = S - lam * eps_shift
    if arg <= 0 or arg > 1:
        raise DomainError("eps_shift leaves no admissible retention m > 0")
    m = -math.log(arg) / lam
    A = R * (1.0 + theta) * (S - arg) / lam
    k = R - lam
    B = R / k * math.exp(k * m) - lam / k
    C = 1.0 - math.exp(-lam * a) - lam / k * math.exp(k * a) + R / k * math.exp(k * b)
    B_quad = _expected_exp_retained(lam, R, [(0.0, m, lambda x: x), (m, math.inf, lambda x: m)])
    C_quad = _expected_exp_retained(lam, R, [(0.0, a, lambda x: 0.0), (a, b, lambda x: x), (b, math.inf, lambda x: b)])
    t = np.linspace(0.0, 1.0, 11) if t is None else np.asarray(t, dtype=float)
    d2_an = np.exp(A * t) * A * (A * B + 2 * (C - B) + A * (C - B) * t)
    with mpmath.workdps(50):
        Am, Bm, Cm = mpmath.mpf(A), mpmath.mpf(B), mpmath.mpf(C)
        f = lambda s: mpmath.exp(Am * s) * (Bm + (Cm - Bm) * s)  # noqa: E731
        h = mpmath.mpf("1e-12")
        d2_num = np.array([float((f(ti + h) - 2 * f(ti) + f(ti - h)) / h ** 2) for ti in map(mpmath.mpf, t.tolist())])
    return ConcavityProbe(A, B, C, m, A * (A * B + 2 * (C - B)), B_quad, C_quad, t, d2_an, d2_num)


# -- brute-force oracle ------------------------------------------------------


@dataclass
class DiscreteModel:
    """Two risks on equal-probability atoms with exact joint cell masses."""

    mm: object
    atoms: list
    joint: np.ndarray

    @classmethod
    def build(cls, mm, size):
        if mm.n != 2:
            raise DomainError("the discrete model covers two risks")
        u = (np.arange(size) + 0.5) / size
        atoms = [np.asarray(m.quantile(u), dtype=float) for m in mm.marginals]
        edges = np.linspace(0.0, 1.0, size + 1)
        C = np.array([[float(copula_cdf(mm.copula, s, t)) for t in edges] for s in edges])
        joint = C[1:, 1:] - C[:-1, 1:] - C[1:, :-1] + C[:-1, :-1]
        joint = np.clip(joint, 0.0, None)
        return cls(mm, atoms, joint / joint.sum())

    def premiums(self, ceded):
        out = []
        for i, z in enumerate(ceded):
            pp = self.mm.principles[i]
            out.append(pp.premium(np.array([np.mean(z ** r) for r in range(1, pp.order + 1)])))
        return out

    def expected_utility(self, ceded):
        prem = self.premiums(ceded)
        r0 = self.atoms[0] - ceded[0]
        r1 = self.atoms[1] - ceded[1]
        wealth = self.mm.c - sum(prem) - r0[:, None] - r1[None, :]
        return float(np.sum(self.joint * self.mm.utility.value(wealth)))


@dataclass
class OracleResult:
    strategy: Strategy
    value: float
    ceded: list
    model: DiscreteModel
    sweeps: int


def _curve(atoms, z, label):
    x = np.concatenate([[0.0], atoms])
    return TreatyCurve(x, np.concatenate([[0.0], z]), label)


def brute_force_oracle(mm, x_grid_size, z_grid_size, max_sweeps=500, init="full"):
    """Coordinate search over ceded levels on a discretised two-risk model.

    Each risk is replaced by ``x_grid_size`` equal-probability atoms and each
    ceded amount may take ``z_grid_size`` equally spaced levels in ``[0, x]``.
    Sweeps visit every atom and pick its best level with all premiums
    recomputed from the discrete moments, until a sweep changes nothing.
    """
    if max(x_grid_size, z_grid_size) > ORACLE_MAX_GRID:
        raise OracleRefused(f"grid sizes above {ORACLE_MAX_GRID} are too costly for the oracle")
    if min(x_grid_size, z_grid_size) < 2:
        raise DomainError("grids need at least two points")
    model = DiscreteModel.build(mm, x_grid_size)
    frac = np.linspace(0.0, 1.0, z_grid_size)
    level = [np.full(x_grid_size, z_grid_size - 1 if init == "full" else 0) for _ in range(2)]

    def ceded(lv):
        return [model.atoms[i] * frac[lv[i]] for i in range(2)]

    best = model.expected_utility(ceded(level))
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        changed = False
        for i in range(2):
            for k in range(x_grid_size):
                current = level[i][k]
                vals = np.empty(z_grid_size)
                for l in range(z_grid_size):
                    level[i][k] = l
                    vals[l] = model.expected_utility(ceded(level))
                l_best = int(np.argmax(vals))
                if vals[l_best] > best + 1e-15 * abs(best) and l_best != current:
                    level[i][k] = l_best
                    best = float(vals[l_best])
                    changed = True
                else:
                    level[i][k] = current
        if not changed:
            break
    z = ceded(level)
    curves = tuple(_curve(model.atoms[i], z[i], f"oracle{i + 1}") for i in range(2))
    prem = model.premiums(z)
    moms = tuple(np.array([np.mean(z[i] ** r) for r in range(1, mm.principles[i].order + 1)]) for i in range(2))
    return OracleResult(Strategy(curves, tuple(prem), moms), best, z, model, sweeps)
