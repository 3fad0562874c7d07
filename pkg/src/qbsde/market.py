"""Market coefficients, risk premium and Brownian path batches.

Coefficients are constants, deterministic functions of time, or functions of
``(t, W_t)``.  The last kind gives the backward solver a Markov state to
regress on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import BadGrid, CoefficientBoundViolation, ShapeMismatch, SingularVolatility

EIG_MIN = 1e-10
CHUNK_PATHS = 4096
_BOUND_SLACK = 1e-12


class TimeFunction:
    """Deterministic coefficient ``t -> value``."""

    def __init__(self, fn: Callable[[float], Any]):
        self.fn = fn

    def __call__(self, t):
        return np.asarray(self.fn(t), dtype=float)


class Tabulated(TimeFunction):
    """Piecewise-linear interpolation of values tabulated on a time grid."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[0] != self.times.shape[0]:
            raise ShapeMismatch("tabulated values must have one row per time point")
        if np.any(np.diff(self.times) <= 0):
            raise BadGrid("tabulation times must be strictly increasing")
        super().__init__(self._interp)

    def _interp(self, t):
        flat = self.values.reshape(len(self.times), -1)
        out = np.array([np.interp(t, self.times, flat[:, j]) for j in range(flat.shape[1])])
        return out.reshape(self.values.shape[1:])


class StateFunction:
    """Coefficient depending on ``(t, w)`` where ``w`` has shape ``(paths, n)``."""

    def __init__(self, fn: Callable[[float, np.ndarray], Any]):
        self.fn = fn

    def __call__(self, t, w):
        return np.asarray(self.fn(t, w), dtype=float)


def _is_state(coef) -> bool:
    return isinstance(coef, StateFunction)


def _evaluate(coef, t, w, n):
    if isinstance(coef, StateFunction):
        if w is None:
            return coef(t, np.zeros((1, n)))[0]
        return coef(t, np.atleast_2d(w))
    if callable(coef):
        return np.asarray(coef(t), dtype=float)
    return np.asarray(coef, dtype=float)


@dataclass(frozen=True)
class CoefficientBounds:
    """Declared sup-norm bounds; ``None`` means undeclared."""

    mu: float | None = None
    sigma: float | None = None
    theta: float | None = None
    income: float | None = None
    endowment: float | None = None


@dataclass(frozen=True)
class MarketModel:
    n: int
    m: int
    T: float
    r: float
    mu: Any
    sigma: Any
    income: Any = 0.0
    income_mode: str = "absolute"  # "absolute" (e_t) or "relative" (e_t / X_t)
    endowment: Any = 0.0
    bounds: CoefficientBounds = field(default_factory=CoefficientBounds)
    eig_min: float = EIG_MIN

    def __post_init__(self):
        if self.m > self.n or self.m < 1:
            raise ShapeMismatch(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if self.T <= 0:
            raise BadGrid("horizon T must be positive")
        if self.r < 0:
            raise ValueError("interest rate must be non-negative")
        if self.income_mode not in ("absolute", "relative"):
            raise ValueError(f"unknown income_mode {self.income_mode!r}")
        if not callable(self.sigma):
            if np.asarray(self.sigma, dtype=float).size != self.m * self.n:
                raise ShapeMismatch(f"sigma must be {self.m}x{self.n}")

    @property
    def is_deterministic(self) -> bool:
        return not any(_is_state(c) for c in (self.mu, self.sigma, self.income, self.endowment))

    @property
    def is_constant(self) -> bool:
        return not any(callable(c) for c in (self.mu, self.sigma, self.income, self.endowment))

    def _stateful(self, coef, w) -> bool:
        return w is not None and _is_state(coef)

    def mu_at(self, t, w=None):
        mu = _evaluate(self.mu, t, w, self.n)
        if self._stateful(self.mu, w):
            return mu.reshape(len(np.atleast_2d(w)), self.m)
        return mu.reshape(self.m)

    def sigma_at(self, t, w=None):
        sig = _evaluate(self.sigma, t, w, self.n)
        if self._stateful(self.sigma, w):
            return sig.reshape(len(np.atleast_2d(w)), self.m, self.n)
        return sig.reshape(self.m, self.n)

    def income_at(self, t, w=None):
        return _evaluate(self.income, t, w, self.n)

    def endowment_at(self, w=None):
        return _evaluate(self.endowment, self.T, w, self.n)

    def theta(self, t, w=None):
        return risk_premium(self, t, w)

    def check_bounds(self, t, w=None, theta=None):
        """Assert every declared coefficient bound at ``(t, w)``."""
        b = self.bounds
        checks = []
        if b.mu is not None:
            checks.append(("mu", np.max(np.abs(self.mu_at(t, w))), b.mu))
        if b.sigma is not None:
            checks.append(("sigma", np.max(np.abs(self.sigma_at(t, w))), b.sigma))
        if b.theta is not None:
            th = self.theta(t, w) if theta is None else theta
            checks.append(("theta", np.max(np.linalg.norm(np.atleast_1d(th), axis=-1)), b.theta))
        if b.income is not None:
            checks.append(("income", np.max(np.abs(self.income_at(t, w))), b.income))
        for name, value, bound in checks:
            if value > bound + _BOUND_SLACK:
                raise CoefficientBoundViolation(f"|{name}| = {value:.6g} exceeds declared bound {bound} at t={t}")


def risk_premium(model: MarketModel, t: float, w=None) -> np.ndarray:
    """Market price of risk ``sigma^T (sigma sigma^T)^{-1} (mu - r 1)``.

    Returns shape ``(n,)`` or ``(paths, n)`` when a state is passed for a
    state-dependent model.
    """
    sig = model.sigma_at(t, w)
    excess = model.mu_at(t, w) - model.r
    if excess.ndim == 2 and sig.ndim == 2:
        sig = np.broadcast_to(sig, (len(excess),) + sig.shape)
    gram = sig @ np.swapaxes(sig, -1, -2)
    eig = np.linalg.eigvalsh(gram)
    if np.min(eig) < model.eig_min:
        raise SingularVolatility(f"smallest eigenvalue of sigma sigma^T is {np.min(eig):.3g} at t={t}")
    excess = np.broadcast_to(excess, gram.shape[:-1])
    sol = np.linalg.solve(gram, excess[..., None])
    return (np.swapaxes(sig, -1, -2) @ sol)[..., 0]


def uniform_grid(T: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise BadGrid("need at least one time step")
    return np.linspace(0.0, T, steps + 1)


def check_grid(grid, T=None) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise BadGrid("grid must be a 1-d array with at least two points")
    if grid[0] != 0.0:
        raise BadGrid("grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise BadGrid("grid must be strictly increasing")
    if T is not None and not np.isclose(grid[-1], T, rtol=0, atol=1e-12):
        raise BadGrid(f"grid must end at T={T}, ends at {grid[-1]}")
    return grid


@dataclass(frozen=True)
class BrownianBatch:
    """Gaussian increments with shape ``(paths, steps, n)``."""

    grid: np.ndarray
    increments: np.ndarray
    path_count: int
    seed: int | None

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def steps(self) -> int:
        return len(self.grid) - 1

    @property
    def n(self) -> int:
        return self.increments.shape[2]

    def paths(self) -> np.ndarray:
        """Brownian paths ``W`` of shape ``(paths, steps + 1, n)`` with ``W_0 = 0``."""
        out = np.zeros((self.path_count, self.steps + 1, self.n))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def subset(self, index) -> "BrownianBatch":
        inc = self.increments[index]
        return BrownianBatch(self.grid, inc, inc.shape[0], self.seed)


def _chunk_normals(seed: int, chunk: int, steps: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(chunk,))
    rng = np.random.Generator(np.random.Philox(ss))
    return rng.standard_normal((CHUNK_PATHS, steps, n))


def sample_brownian(model: MarketModel, grid, path_count: int, seed: int) -> BrownianBatch:
    """Draw ``path_count`` Brownian increment paths on ``grid``.

    Paths are generated in fixed blocks of ``CHUNK_PATHS``, each from a
    counter-based Philox stream keyed by ``(seed, block)``.  Path ``i`` therefore
    depends only on ``(seed, i)``: batches are prefix-consistent across path
    counts and blocks may be produced in any order.
    """
    grid = check_grid(grid, model.T)
    if path_count < 0:
        raise ValueError("path_count must be non-negative")
    steps, n = len(grid) - 1, model.n
    out = np.empty((path_count, steps, n))
    for chunk in range(-(-path_count // CHUNK_PATHS)):
        lo = chunk * CHUNK_PATHS
        hi = min(lo + CHUNK_PATHS, path_count)
        out[lo:hi] = _chunk_normals(seed, chunk, steps, n)[: hi - lo]
    out *= np.sqrt(np.diff(grid))[None, :, None]
    return BrownianBatch(grid, out, path_count, seed)


def girsanov_drift_adjust(batch: BrownianBatch, theta_path) -> BrownianBatch:
    """Increments of ``W^Q_t = W_t + int_0^t theta_s ds``: ``dW_k + theta_k dt_k``.

    ``theta_path`` has shape ``(steps, n)`` (or ``(steps + 1, n)``, last row
    ignored) for deterministic premia, or ``(paths, steps, n)``.
    """
    theta = np.asarray(theta_path, dtype=float)
    steps, n = batch.steps, batch.n
    if theta.ndim == 1 and n == 1:
        theta = theta[:, None]
    if theta.ndim == 2:
        if theta.shape[0] == steps + 1:
            theta = theta[:-1]
        if theta.shape != (steps, n):
            raise ShapeMismatch(f"theta path shape {theta.shape} does not match ({steps}, {n})")
        drift = theta[None] * batch.dt[None, :, None]
    elif theta.ndim == 3:
        if theta.shape[1] == steps + 1:
            theta = theta[:, :-1]
        if theta.shape != batch.increments.shape:
            raise ShapeMismatch(f"theta path shape {theta.shape} does not match {batch.increments.shape}")
        drift = theta * batch.dt[None, :, None]
    else:
        raise ShapeMismatch(f"theta path must be 2-d or 3-d, got {theta.ndim}-d")
    return BrownianBatch(batch.grid, batch.increments + drift, batch.path_count, batch.seed)
