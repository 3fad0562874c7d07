from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbsde.errors import BadGrid, CoefficientBoundViolation, ShapeMismatch, SingularVolatility
from qbsde.market import (
    CHUNK_PATHS,
    CoefficientBounds,
    MarketModel,
    StateFunction,
    Tabulated,
    check_grid,
    girsanov_drift_adjust,
    risk_premium,
    sample_brownian,
    uniform_grid,
)


def test_risk_premium_scalar(market_abs):
    assert np.allclose(risk_premium(market_abs, 0.0), [0.25])


def test_risk_premium_with_rate():
    model = MarketModel(n=1, m=1, T=1.0, r=0.01, mu=0.05, sigma=0.2)
    assert np.allclose(risk_premium(model, 0.5), [0.2])


def test_risk_premium_incomplete_market_is_minimal_norm():
    # one stock on two Brownian motions: theta = sigma^T (mu - r) / |sigma|^2
    model = MarketModel(n=2, m=1, T=1.0, r=0.0, mu=[0.06], sigma=[[0.3, 0.4]])
    theta = risk_premium(model, 0.0)
    assert np.allclose(theta, np.array([0.3, 0.4]) * 0.06 / 0.25)
    assert np.allclose(model.sigma_at(0.0) @ theta, [0.06])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(0, 10_000))
def test_risk_premium_solves_market_equation(m, seed):
    rng = np.random.default_rng(seed)
    n = m + int(rng.integers(0, 2))
    sigma = rng.normal(size=(m, n)) + 2 * np.eye(m, n)
    mu = rng.normal(size=m) * 0.1
    model = MarketModel(n=n, m=m, T=1.0, r=0.01, mu=mu, sigma=sigma)
    theta = risk_premium(model, 0.3)
    assert np.allclose(sigma @ theta, mu - 0.01, atol=1e-10)
    # theta lies in the row space of sigma
    proj = sigma.T @ np.linalg.pinv(sigma.T)
    assert np.allclose(proj @ theta, theta, atol=1e-10)


def test_singular_volatility():
    model = MarketModel(n=2, m=2, T=1.0, r=0.0, mu=[0.05, 0.05], sigma=[[0.2, 0.0], [0.2, 0.0]])
    with pytest.raises(SingularVolatility):
        risk_premium(model, 0.0)


def test_state_dependent_premium_shape():
    model = MarketModel(n=1, m=1, T=1.0, r=0.0, mu=StateFunction(lambda t, w: 0.05 + 0.01 * w[:, 0]), sigma=0.2)
    w = np.array([[0.0], [1.0], [-1.0]])
    theta = risk_premium(model, 0.5, w)
    assert theta.shape == (3, 1)
    assert np.allclose(theta[:, 0], (0.05 + 0.01 * w[:, 0]) / 0.2)
    assert not model.is_deterministic


def test_tabulated_interpolates():
    mu = Tabulated([0.0, 1.0], [0.04, 0.06])
    model = MarketModel(n=1, m=1, T=1.0, r=0.0, mu=mu, sigma=0.2)
    assert model.is_deterministic and not model.is_constant
    assert np.allclose(model.theta(0.5), [0.25])


def test_bad_sigma_shape():
    with pytest.raises(ShapeMismatch):
        MarketModel(n=2, m=1, T=1.0, r=0.0, mu=[0.05], sigma=[0.2, 0.1, 0.3])


def test_bounds_check():
    model = MarketModel(n=1, m=1, T=1.0, r=0.0, mu=0.05, sigma=0.2, bounds=CoefficientBounds(theta=0.2))
    with pytest.raises(CoefficientBoundViolation):
        model.check_bounds(0.0)


def test_grid_validation():
    assert np.allclose(uniform_grid(2.0, 4), [0, 0.5, 1.0, 1.5, 2.0])
    with pytest.raises(BadGrid):
        uniform_grid(1.0, 0)
    with pytest.raises(BadGrid):
        check_grid([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(BadGrid):
        check_grid([0.1, 1.0])
    with pytest.raises(BadGrid):
        check_grid([0.0, 0.9], T=1.0)


def test_brownian_moments(market_abs):
    grid = uniform_grid(1.0, 8)
    batch = sample_brownian(market_abs, grid, 50_000, 11)
    assert batch.increments.shape == (50_000, 8, 1)
    w_T = batch.paths()[:, -1, 0]
    assert abs(w_T.mean()) < 4 / np.sqrt(50_000)
    assert abs(w_T.var() - 1.0) < 0.03


def test_brownian_reproducible_and_prefix_consistent(market_abs):
    grid = uniform_grid(1.0, 4)
    a = sample_brownian(market_abs, grid, CHUNK_PATHS + 100, 5)
    b = sample_brownian(market_abs, grid, CHUNK_PATHS + 100, 5)
    c = sample_brownian(market_abs, grid, 50, 5)
    d = sample_brownian(market_abs, grid, 50, 6)
    assert np.array_equal(a.increments, b.increments)
    assert np.array_equal(a.increments[:50], c.increments)
    assert not np.array_equal(c.increments, d.increments)


def test_girsanov_shift(market_abs):
    grid = uniform_grid(1.0, 4)
    batch = sample_brownian(market_abs, grid, 10, 1)
    shifted = girsanov_drift_adjust(batch, np.full((4, 1), 0.25))
    assert np.allclose(shifted.increments - batch.increments, 0.25 * 0.25)
    with pytest.raises(ShapeMismatch):
        girsanov_drift_adjust(batch, np.zeros((3, 1)))
