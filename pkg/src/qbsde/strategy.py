"""Optimal feedback rules and wealth simulation.

Exponential utility works with absolute amounts ``(c, p)``; the CRRA
families work with fractions of wealth ``(c~, p~)``.  ``p`` is always
expressed in Brownian coordinates, ``p = pi sigma``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bsde import BsdeSolution
from .constraints import (
    FinitePointSet,
    UnionOfConvex,
    argmax_consumption_log,
    argmax_consumption_power,
    project_many,
)
from .drivers import UtilityProblem, h_exponential
from .errors import ShapeMismatch
from .market import BrownianBatch, MarketModel, girsanov_drift_adjust


@dataclass(frozen=True)
class Strategy:
    """Feedback rules derived from a BSDE solution, with optional perturbation.

    The applied controls are ``c_scale * c + c_shift`` and either
    ``p_scale * p + p_shift`` or the constant ``p_override``.  ``p_branch``
    replaces the investment set by one convex piece of it.  Perturbed
    controls are projected back onto the constraint sets so every strategy
    tested stays admissible.
    """

    kind: str
    problem: UtilityProblem
    model: MarketModel
    solution: BsdeSolution
    source: str = "optimal"
    c_scale: float = 1.0
    c_shift: float = 0.0
    p_scale: float = 1.0
    p_shift: object = 0.0
    p_override: object = None
    p_branch: object = None
    label: str = "optimal"

    def _h(self, t):
        return self.problem.h(t, self.model)

    def consumption(self, t, x, y, w=None):
        """Consumption at ``t``: absolute ``c`` (exponential) or relative ``c~`` (CRRA)."""
        pb = self.problem
        x = np.asarray(x, dtype=float)
        y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
        if self.kind == "exponential":
            h = self._h(t)
            c = h * x + y - math.log(h / pb.alpha) / pb.gamma
        elif self.kind == "log":
            c = np.full(x.shape, argmax_consumption_log(pb.consumption_set, pb.alpha / self._h(t), t)[0])
        else:
            c = np.asarray(argmax_consumption_power(pb.consumption_set, pb.alpha, pb.gamma, y, t)[0])
        if self.c_scale == 1.0 and self.c_shift == 0.0:
            return c
        c = self.c_scale * c + self.c_shift
        if self.kind == "exponential":
            return c
        return project_many(c.reshape(-1, 1), pb.consumption_set, t)[0].reshape(c.shape)

    def target(self, t, z, w=None):
        """Point whose projection onto the investment set is the optimal control."""
        pb = self.problem
        theta = self.model.theta(t, w)
        if self.kind == "exponential":
            return (z + theta / pb.gamma) / self._h(t)
        if self.kind == "log":
            return np.broadcast_to(theta, np.shape(z)).copy()
        return (z + theta) / (1.0 - pb.gamma)

    def investment(self, t, y, z, w=None):
        """Investment ``p`` (exponential) or ``p~`` (CRRA) for a batch ``z`` of shape ``(k, n)``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        P = self.problem.investment_set
        if self.p_override is not None:
            p = np.broadcast_to(np.asarray(self.p_override, dtype=float), z.shape).copy()
        else:
            p = project_many(self.target(t, z, w), P if self.p_branch is None else self.p_branch, t)[0]
            if self.p_scale == 1.0 and not np.any(self.p_shift):
                return p
            p = self.p_scale * p + np.asarray(self.p_shift, dtype=float)
        return project_many(p, P, t)[0]

    def perturbed(self, label, **changes) -> "Strategy":
        return replace(self, source="perturbation", label=label, **changes)


def convex_pieces(cset) -> list:
    """Convex pieces of a nonconvex set (points or union members); empty for convex sets."""
    if cset.is_convex:
        return []
    if isinstance(cset, FinitePointSet):
        return [FinitePointSet(pt[None, :]) for pt in cset.points]
    if isinstance(cset, UnionOfConvex):
        return list(cset.members)
    return []


def perturbation_battery(strategy: Strategy) -> list:
    """Standard perturbations: ``p x 0``, ``p x 2``, a consumption change, and every branch piece."""
    kind = strategy.kind
    out = [
        strategy.perturbed("p_x0", p_scale=0.0),
        strategy.perturbed("p_x2", p_scale=2.0),
        strategy.perturbed("c_plus_0.5", c_shift=0.5) if kind == "exponential"
        else strategy.perturbed("c_x1.5", c_scale=1.5),
    ]
    for i, piece in enumerate(convex_pieces(strategy.problem.investment_set)):
        out.append(strategy.perturbed(f"branch_{i}", p_branch=piece))
    return out


def optimal_strategy(model: MarketModel, problem: UtilityProblem, solution: BsdeSolution) -> Strategy:
    return Strategy(problem.family, problem, model, solution)


@dataclass
class WealthPaths:
    """Simulated wealth and applied controls, all shaped ``(paths, N+1[, n])``.

    ``c`` is absolute consumption; ``c_rel`` the relative rate (CRRA only).
    ``p`` is absolute (exponential) or relative (CRRA) investment.
    """

    kind: str
    grid: np.ndarray
    x: np.ndarray
    c: np.ndarray
    p: np.ndarray
    y: np.ndarray
    c_rel: np.ndarray | None = None
    label: str = "optimal"
    positivity_violations: int = 0
    bound_violations: int = 0

    @property
    def path_count(self) -> int:
        return self.x.shape[0]

    def to_csv(self, path, max_paths: int = 100) -> None:
        """Long-format export ``path, t, X, c, p_1..p_n`` for the first ``max_paths`` paths."""
        n = self.p.shape[2]
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path", "t", "X", "c"] + [f"p{i + 1}" for i in range(n)])
            for i in range(min(max_paths, self.path_count)):
                for k, t in enumerate(self.grid):
                    wr.writerow([i, repr(float(t)), repr(float(self.x[i, k])), repr(float(self.c[i, k]))]
                                + [repr(float(v)) for v in self.p[i, k]])


def _check_alignment(strategy: Strategy, batch: BrownianBatch):
    grid = strategy.solution.grid
    if len(grid) != len(batch.grid) or not np.allclose(grid, batch.grid, rtol=0, atol=1e-12):
        raise ShapeMismatch("solution grid and Brownian batch grid differ")


def _pl_bound(strategy: Strategy):
    """Constant ``L`` in ``|p*| <= L (1 + |Z|)`` from the declared theta bound, or ``None``."""
    b = strategy.model.bounds
    if b.theta is None:
        return None
    pb = strategy.problem
    pbar = float(np.linalg.norm(pb.investment_set.bounded_member()))
    if strategy.kind == "exponential":
        hmin = h_exponential(np.linspace(0, strategy.model.T, 2001), strategy.model.r, strategy.model.T).min()
        return (2.0 / hmin) * (1.0 + b.theta / pb.gamma) + 2 * pbar
    if strategy.kind == "log":
        return 2 * b.theta + 2 * pbar
    return 2.0 * (1.0 + b.theta) / (1.0 - pb.gamma) + 2 * pbar


def _time_major(batch: BrownianBatch):
    """Brownian states ``(N+1, paths, n)`` and increments ``(N, paths, n)``, contiguous per time step."""
    dW = np.ascontiguousarray(batch.increments.transpose(1, 0, 2))
    W = np.zeros((batch.steps + 1,) + dW.shape[1:])
    np.cumsum(dW, axis=0, out=W[1:])
    return W, dW


def simulate_wealth_additive(strategy: Strategy, model: MarketModel, batch: BrownianBatch, x: float) -> WealthPaths:
    """Euler scheme for ``dX = X r dt + p (dW + theta dt) + (e - c) dt`` (exponential utility)."""
    if strategy.kind != "exponential":
        raise ValueError("additive simulation is for exponential utility")
    _check_alignment(strategy, batch)
    sol, N, M = strategy.solution, batch.steps, batch.path_count
    W, dW = _time_major(batch)
    X = np.empty((N + 1, M))
    C = np.empty((N + 1, M))
    P = np.zeros((N + 1, M, model.n))
    Y = np.empty((N + 1, M))
    X[0] = x
    L = _pl_bound(strategy) if strategy.p_override is None and strategy.p_scale == 1.0 else None
    bound_viol = 0
    for k in range(N + 1):
        t, wk = batch.grid[k], W[k]
        theta = model.theta(t, wk)
        model.check_bounds(t, wk, theta)
        y = np.broadcast_to(sol.y_at(k, wk), (M,))
        z = np.broadcast_to(sol.z_at(k, wk), (M, model.n))
        Y[k] = y
        C[k] = strategy.consumption(t, X[k], y, wk)
        P[k] = strategy.investment(t, y, z, wk)
        if L is not None:
            bound_viol += int(np.sum(np.linalg.norm(P[k], axis=1) > L * (1 + np.linalg.norm(z, axis=1))))
        if k == N:
            break
        dt = batch.dt[k]
        e = model.income_at(t, wk)
        gain = np.sum(P[k] * (dW[k] + theta * dt), axis=1)
        X[k + 1] = X[k] + X[k] * model.r * dt + gain + (e - C[k]) * dt
    X, C, Y, P = X.T, C.T, Y.T, P.transpose(1, 0, 2)
    return WealthPaths("exponential", batch.grid, X, C, P, Y, label=strategy.label, bound_violations=bound_viol)


def simulate_wealth_multiplicative(strategy: Strategy, model: MarketModel, batch: BrownianBatch, x: float) -> WealthPaths:
    """Exact-positivity scheme for CRRA wealth.

    ``X_{k+1} = X_k exp(p~ dW^Q - |p~|^2 dt / 2 + (r + e~ - c~) dt)`` with
    ``dW^Q = dW + theta dt``; controls are frozen at ``t_k``.
    """
    if strategy.kind not in ("log", "power"):
        raise ValueError("multiplicative simulation is for CRRA utility")
    if not x > 0:
        raise ValueError("CRRA wealth needs x > 0")
    _check_alignment(strategy, batch)
    sol, N, M, n = strategy.solution, batch.steps, batch.path_count, model.n
    W, _ = _time_major(batch)
    if model.is_deterministic:
        theta_path = np.stack([np.broadcast_to(model.theta(t), (n,)) for t in batch.grid[:-1]])
    else:
        theta_path = np.stack([model.theta(t, W[k]) for k, t in enumerate(batch.grid[:-1])], axis=1)
    dWQ = np.ascontiguousarray(girsanov_drift_adjust(batch, theta_path).increments.transpose(1, 0, 2))
    logX = np.empty((N + 1, M))
    CR = np.empty((N + 1, M))
    P = np.zeros((N + 1, M, n))
    Y = np.empty((N + 1, M))
    logX[0] = math.log(x)
    L = _pl_bound(strategy) if strategy.p_override is None and strategy.p_scale == 1.0 else None
    bound_viol = 0
    ones = np.ones(M)
    for k in range(N + 1):
        t, wk = batch.grid[k], W[k]
        model.check_bounds(t, wk)
        y = np.broadcast_to(sol.y_at(k, wk), (M,))
        z = np.broadcast_to(sol.z_at(k, wk), (M, n))
        Y[k] = y
        CR[k] = strategy.consumption(t, ones, y, wk)
        P[k] = strategy.investment(t, y, z, wk)
        if L is not None:
            bound_viol += int(np.sum(np.linalg.norm(P[k], axis=1) > L * (1 + np.linalg.norm(z, axis=1))))
        if k == N:
            break
        dt = batch.dt[k]
        e = model.income_at(t, wk)
        p = P[k]
        logX[k + 1] = logX[k] + np.sum(p * dWQ[k], axis=1) + (model.r + e - CR[k] - 0.5 * np.sum(p * p, axis=1)) * dt
    logX, CR, Y, P = logX.T, CR.T, Y.T, P.transpose(1, 0, 2)
    X = np.exp(logX)
    C = CR * X
    positivity = int(np.sum(X <= 0))
    if strategy.kind == "log" or strategy.problem.gamma < 0:
        positivity += int(np.sum(C <= 0))
    else:
        positivity += int(np.sum(C < 0))
    return WealthPaths(strategy.kind, batch.grid, X, C, P, Y, c_rel=CR, label=strategy.label,
                       positivity_violations=positivity, bound_violations=bound_viol)


def simulate(strategy: Strategy, batch: BrownianBatch) -> WealthPaths:
    x = strategy.problem.x
    if strategy.kind == "exponential":
        return simulate_wealth_additive(strategy, strategy.model, batch, x)
    return simulate_wealth_multiplicative(strategy, strategy.model, batch, x)

