from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest

from qbsde import MarketModel, UtilityProblem


def scenario_path(name: str) -> Path:
    return Path(str(resources.files("qbsde") / "scenarios" / name))


@pytest.fixture
def market_abs():
    """mu = 0.05, sigma = 0.2, r = 0: risk premium 0.25, absolute income."""
    return MarketModel(n=1, m=1, T=1.0, r=0.0, mu=0.05, sigma=0.2)


@pytest.fixture
def market_rel():
    return MarketModel(n=1, m=1, T=1.0, r=0.0, mu=0.05, sigma=0.2, income_mode="relative")


@pytest.fixture
def exp_problem():
    return UtilityProblem("exponential", gamma=1.0)


@pytest.fixture
def log_problem():
    return UtilityProblem("log")
