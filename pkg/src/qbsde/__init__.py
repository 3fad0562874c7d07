"""Numerical solver and verifier for quadratic BSDEs in constrained utility maximization."""
from __future__ import annotations

from .bsde import BsdeSolution, PolynomialBasis, bmo_estimate, lsmc_standard_error, solve_deterministic, solve_lsmc
from .constraints import (
    Ball,
    Box,
    FinitePointSet,
    FullSpace,
    HalfSpace,
    Polytope,
    TimeDependent,
    UnionOfConvex,
    project,
    project_many,
    scale,
)
from .drivers import UtilityProblem, h_exponential, h_log, make_driver
from .errors import ConfigError, QbsdeError, SolverError
from .market import MarketModel, risk_premium, sample_brownian, uniform_grid
from .strategy import Strategy, optimal_strategy, simulate
from .verify import analytic_value, expected_utility_mc, merton_oracle, r_process, supermartingale_test

__version__ = "0.1.0"
