"""Horizon functions ``h`` and the three BSDE drivers.

Conventions: ``z`` and ``theta`` are row vectors of length ``n``; batched
inputs carry a leading path axis (``y`` of shape ``(k,)``, ``z`` of shape
``(k, n)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import exprel

from .constraints import (
    ConstraintSet,
    FullSpace,
    argmax_consumption_log,
    argmax_consumption_power,
    project_many,
    scale,
)
from .errors import NegativeBeta, OutOfRange

FAMILIES = ("exponential", "log", "power")
_T_SLACK = 1e-12


def _check_time(t, T):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < -_T_SLACK) or np.any(t_arr > T + _T_SLACK):
        raise OutOfRange(f"t={t} outside [0, {T}]")
    return np.clip(t_arr, 0.0, T)


def h_exponential(t, r: float, T: float):
    """Solution of ``h' = h (h - r)``, ``h(T) = 1``."""
    s = T - _check_time(t, T)
    # r / (1 - (1 - r) e^{-rs}) = 1 / (e^{-rs} + s exprel(-rs)); reduces to 1 / (1 + s) at r = 0
    out = 1.0 / (np.exp(-r * s) + s * exprel(-r * s))
    return float(out) if np.ndim(out) == 0 else out


def h_log(t, alpha: float, beta: float, T: float):
    """Solution of ``h' = beta h - alpha``, ``h(T) = 1`` (``beta >= 0`` only)."""
    if beta < 0:
        raise NegativeBeta("the log-utility horizon function is only defined for beta >= 0")
    s = T - _check_time(t, T)
    # alpha/beta (1 - e^{-beta s}) + e^{-beta s}; reduces to 1 + alpha s at beta = 0
    out = alpha * s * exprel(-beta * s) + np.exp(-beta * s)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class UtilityProblem:
    """Utility family with weights, initial wealth and the constraint sets.

    ``investment_set`` is the set ``P`` already expressed in Brownian
    coordinates (``p = pi sigma``).  For CRRA families both sets hold
    *relative* controls (fractions of wealth).
    """

    family: str
    alpha: float = 1.0
    beta: float = 0.0
    x: float = 1.0
    gamma: float | None = None
    consumption_set: ConstraintSet = field(default_factory=lambda: FullSpace(1))
    investment_set: ConstraintSet = field(default_factory=lambda: FullSpace(1))

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown utility family {self.family!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.family == "exponential":
            if self.gamma is None or not self.gamma > 0:
                raise ValueError("exponential utility needs gamma > 0")
            if not isinstance(self.consumption_set, FullSpace):
                raise ValueError("consumption is unconstrained for exponential utility")
        elif self.family == "log":
            if self.beta < 0:
                raise NegativeBeta("log utility requires beta >= 0")
        else:
            if self.gamma is None or self.gamma == 0 or self.gamma >= 1:
                raise ValueError("power utility needs gamma in (-inf, 0) or (0, 1)")
        if self.family != "exponential" and not self.x > 0:
            raise ValueError("CRRA utility needs strictly positive initial wealth")
        if self.consumption_set.dim != 1:
            raise ValueError("consumption sets are one-dimensional")

    def h(self, t, model):
        if self.family == "exponential":
            return h_exponential(t, model.r, model.T)
        if self.family == "log":
            return h_log(t, self.alpha, self.beta, model.T)
        return None

    def utility(self, c):
        """``u(c)`` with ``-inf`` outside the natural domain."""
        c = np.asarray(c, dtype=float)
        if self.family == "exponential":
            return -np.exp(-self.gamma * c)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family == "log":
                return np.where(c > 0, np.log(np.where(c > 0, c, 1.0)), -np.inf)
            g = self.gamma
            safe = np.where(c > 0, c, 1.0)
            val = np.power(safe, g) / g
            if g > 0:
                return np.where(c > 0, val, np.where(c == 0, 0.0, -np.inf))
            return np.where(c > 0, val, -np.inf)


@dataclass(frozen=True)
class DriverEvaluation:
    f_value: object
    dist_term: object
    consumption_term: object


def _finish(*arrays):
    return tuple(float(a) if np.ndim(a) == 0 else a for a in arrays)


def _batch(y, z, n=None):
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z.reshape(1)
    if z.ndim == 1 and y.ndim == 1 and y.size > 1 and z.size == y.size and n == 1:
        z = z[:, None]
    return y, z


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def driver_exponential(t, y, z, *, theta, e, h, gamma, alpha, beta, investment_set) -> DriverEvaluation:
    """Exponential-utility driver with the squared distance to ``h P``."""
    y, z = _batch(y, z, np.size(theta))
    theta = np.asarray(theta, dtype=float)
    q = z + theta / gamma
    hP = scale(investment_set.at(t), h)
    dist = project_many(np.atleast_2d(q).reshape(-1, hP.dim), hP)[1].reshape(q.shape[:-1])
    f = (
        -0.5 * gamma * dist**2
        + _dot(z, theta)
        + _dot(theta, theta) / (2 * gamma)
        + h * (e - y)
        + (h / gamma) * (math.log(h / alpha) - 1.0)
        + beta / gamma
    )
    return DriverEvaluation(*_finish(f, dist, np.zeros_like(f)))


def driver_log(t, y, *, theta, e_rel, h, r, alpha, investment_set, consumption_set, consumption_max=None):
    """Log-utility driver (independent of ``z``)."""
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    dist = project_many(np.atleast_2d(theta).reshape(-1, investment_set.dim), investment_set, t)[1]
    dist = dist.reshape(theta.shape[:-1])
    if consumption_max is None:
        consumption_max = argmax_consumption_log(consumption_set, alpha / h, t)[1]
    f = 0.5 * dist**2 - 0.5 * _dot(theta, theta) - alpha * y / h - consumption_max - r - e_rel
    f = f + np.zeros_like(y)
    return DriverEvaluation(*_finish(f, dist + np.zeros_like(f), consumption_max + np.zeros_like(f)))


def driver_power(t, y, z, *, theta, e_rel, r, alpha, beta, gamma, investment_set, consumption_set):
    """Power-utility driver; the consumption maximum depends on ``y``."""
    y, z = _batch(y, z, np.size(theta))
    theta = np.asarray(theta, dtype=float)
    delta = 1.0 - gamma
    q = (z + theta) / delta
    dist = project_many(np.atleast_2d(q).reshape(-1, investment_set.dim), investment_set, t)[1]
    dist = dist.reshape(q.shape[:-1])
    cmax = argmax_consumption_power(consumption_set, alpha, gamma, y, t)[1]
    zt = z + theta
    f = gamma * (
        0.5 * delta * dist**2
        - _dot(zt, zt) / (2 * delta)
        - _dot(z, z) / (2 * gamma)
        - cmax
        - r
        - e_rel
        + beta / gamma
    )
    return DriverEvaluation(*_finish(f, dist + np.zeros_like(f), cmax + np.zeros_like(f)))


class BsdeDriver:
    """Driver bound to a market and a utility problem.

    Calling ``driver(t, y, z, w)`` evaluates ``f`` on a batch: ``y`` has shape
    ``(k,)``, ``z`` shape ``(k, n)``; ``w`` is the Brownian state ``(k, n)``
    and is only needed for state-dependent coefficients.
    """

    def __init__(self, model, problem: UtilityProblem):
        expected = "absolute" if problem.family == "exponential" else "relative"
        if model.income_mode != expected:
            raise ValueError(f"{problem.family} utility needs income_mode={expected!r}")
        if problem.investment_set.dim != model.n:
            raise ValueError(f"investment set has dimension {problem.investment_set.dim}, market has n={model.n}")
        self.model = model
        self.problem = problem
        self.n = model.n
        self.deterministic = model.is_deterministic

    def terminal(self, w_T=None):
        if self.problem.family == "exponential":
            return self.model.endowment_at(w_T)
        return 0.0

    def evaluate(self, t, y, z, w=None) -> DriverEvaluation:
        model, pb = self.model, self.problem
        theta = model.theta(t, w)
        income = model.income_at(t, w)
        if pb.family == "exponential":
            return driver_exponential(
                t, y, z, theta=theta, e=income, h=h_exponential(t, model.r, model.T),
                gamma=pb.gamma, alpha=pb.alpha, beta=pb.beta, investment_set=pb.investment_set,
            )
        if pb.family == "log":
            h = h_log(t, pb.alpha, pb.beta, model.T)
            return driver_log(
                t, y, theta=theta, e_rel=income, h=h, r=model.r, alpha=pb.alpha,
                investment_set=pb.investment_set, consumption_set=pb.consumption_set,
                consumption_max=self._log_consumption_max(float(t)),
            )
        return driver_power(
            t, y, z, theta=theta, e_rel=income, r=model.r, alpha=pb.alpha, beta=pb.beta,
            gamma=pb.gamma, investment_set=pb.investment_set, consumption_set=pb.consumption_set,
        )

    @lru_cache(maxsize=65536)
    def _log_consumption_max(self, t):
        h = h_log(t, self.problem.alpha, self.problem.beta, self.model.T)
        return argmax_consumption_log(self.problem.consumption_set, self.problem.alpha / h, t)[1]

    def __call__(self, t, y, z, w=None):
        return self.evaluate(t, y, z, w).f_value

    def y_bound(self, samples: int = 257):
        """A-priori bound ``(sup|xi| + K0 T) exp(K1 T)`` on ``|Y|``, or ``None``.

        ``K0 = sup_t |f(t, 0, 0)|`` and ``K1`` the Lipschitz constant in ``y``
        (``h`` or ``alpha/h``), sampled on a time grid.  Only the exponential
        and log drivers are Lipschitz in ``y``, and only deterministic inputs
        are sampled.
        """
        model, pb = self.model, self.problem
        if pb.family == "power" or not self.deterministic:
            return None
        ts = np.linspace(0.0, model.T, samples)
        z0 = np.zeros((1, self.n))
        k0 = max(abs(float(np.asarray(self(t, np.zeros(1), z0)).ravel()[0])) for t in ts)
        h = np.atleast_1d(pb.h(ts, model))
        k1 = float(np.max(h if pb.family == "exponential" else pb.alpha / h))
        xi = abs(float(np.max(np.abs(self.terminal()))))
        return (xi + k0 * model.T) * math.exp(k1 * model.T)


def make_driver(model, problem: UtilityProblem) -> BsdeDriver:
    return BsdeDriver(model, problem)


def exponential_driver_constants(model, problem: UtilityProblem) -> dict:
    """Growth and local-Lipschitz constants of the exponential driver from declared bounds.

    ``|f| <= K (1 + |y| + |z|^2)`` and
    ``|f(y1,z1) - f(y2,z2)| <= K (|y1-y2| + (1+|z1|+|z2|)|z1-z2|)``.
    """
    b = model.bounds
    if b.theta is None or b.income is None:
        raise ValueError("declared theta and income bounds are required")
    g, a = problem.gamma, problem.alpha
    ts = np.linspace(0.0, model.T, 2001)
    hs = np.atleast_1d(h_exponential(ts, model.r, model.T))
    hmax = float(hs.max())
    pbar = float(np.linalg.norm(problem.investment_set.bounded_member()))
    c0 = b.theta / g + hmax * pbar
    const = (
        g * c0**2
        + 0.5 * b.theta
        + b.theta**2 / (2 * g)
        + hmax * b.income
        + float(np.max(np.abs(hs / g * (np.log(hs / a) - 1.0))))
        + abs(problem.beta) / g
    )
    growth = max(const, hmax, g + 0.5 * b.theta)
    lipschitz = max(hmax, b.theta + g * c0, 0.5 * g)
    return {"growth": growth, "lipschitz": lipschitz, "pbar_norm": pbar, "h_max": hmax}
