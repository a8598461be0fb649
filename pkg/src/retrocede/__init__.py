"""Optimal deterministic reinsurance treaties for dependent risks."""

from .copula import FGM, Checkerboard, Frank, Independence, grid_from_cell_masses
from .dist import Empirical, Exponential, Pareto
from .errors import (
    ConfigError,
    DomainError,
    IntegrabilityError,
    InvalidMoments,
    NumericError,
    OracleRefused,
    QuadratureError,
    RetrocedeError,
    SolverStall,
    UnsupportedOperation,
)
from .market import ExpectedValue, ExponentialUtility, GeneralConcave, GeneralMoment, StdDev, Variance
from .quad import Discretization, QuadratureSpec
from .solver import SolverConfig, optimize
from .treaty import MarketModel, Strategy, TreatyCurve

__version__ = "0.1.0"
