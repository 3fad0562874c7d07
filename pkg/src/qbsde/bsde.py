"""Backward solvers for ``Y_t = xi + int_t^T f(s, Y_s, Z_s) ds + int_t^T Z_s dW_s``.

Sign convention: ``Z`` enters with a plus sign in front of the stochastic
integral, so it is the *negative* of the usual martingale-representation
integrand.  For ``xi = W_T`` and ``f = 0`` the solution is ``Y = W``, ``Z = -1``.

Two modes:

* ``solve_deterministic``: all driver inputs deterministic in ``t``.  Then
  ``Z = 0`` and ``Y`` solves ``Y' = -f(t, Y, 0)``, integrated backward by
  classical RK4 on each grid interval with step-doubling refinement.
* ``solve_lsmc``: least-squares Monte Carlo.  Conditional expectations are
  regressions on polynomials of the Brownian state.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .errors import FixedPointDivergence, RegressionSingular, StiffnessFailure
from .market import BrownianBatch, check_grid

MAX_REFINE_DEPTH = 24
BMO_STATE_RADIUS = 3.0  # sup over paths with |W_t / sqrt(t)| <= radius, where the fit has support


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials of total degree ``<= degree`` in the standardized state ``W_t / sqrt(t)``."""

    dim: int
    degree: int = 3

    @property
    def exponents(self):
        out = [()]
        for d in range(1, self.degree + 1):
            out.extend(combinations_with_replacement(range(self.dim), d))
        return out

    @property
    def size(self) -> int:
        return len(self.exponents)

    def design(self, w, t: float) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(-1, self.dim)
        if t <= 0:
            out = np.zeros((len(w), self.size))
            out[:, 0] = 1.0
            return out
        s = w / np.sqrt(t)
        cols = [np.ones(len(w))]
        for combo in self.exponents[1:]:
            col = np.ones(len(w))
            for i in combo:
                col = col * s[:, i]
            cols.append(col)
        return np.stack(cols, axis=1)


@dataclass
class BsdeSolution:
    """Solution on a time grid.

    ``mode == "deterministic"``: ``y`` has shape ``(N+1,)`` and ``z`` is zero.
    ``mode == "regression"``: ``y`` holds basis coefficients ``(N+1, nb)`` and
    ``z`` coefficients ``(N+1, nb, n)``; the last ``z`` row is unused.
    """

    grid: np.ndarray
    mode: str
    y: np.ndarray
    z: np.ndarray
    terminal: object
    n: int = 1
    basis: PolynomialBasis | None = None
    z_cap: float = np.inf
    diagnostics: dict = field(default_factory=dict)

    @property
    def y0(self) -> float:
        return float(self.y[0]) if self.mode == "deterministic" else float(self.y[0, 0])

    @property
    def steps(self) -> int:
        return len(self.grid) - 1

    def y_at(self, k: int, w=None):
        """``Y`` at grid index ``k``; exact terminal value at the last index."""
        k = k % len(self.grid)
        if k == self.steps:
            if callable(self.terminal):
                return np.asarray(self.terminal(w), dtype=float)
            return np.asarray(self.terminal, dtype=float)
        if self.mode == "deterministic":
            return self.y[k]
        phi = self.basis.design(w, self.grid[k])
        return phi @ self.y[k]

    def z_at(self, k: int, w=None):
        k = k % len(self.grid)
        if self.mode == "deterministic" or k == self.steps:
            return np.zeros(self.n) if w is None else np.zeros((len(np.atleast_2d(w)), self.n))
        phi = self.basis.design(w, self.grid[k])
        return _cap(phi @ self.z[k], self.z_cap)

    def to_csv(self, path) -> None:
        """Write ``t, Y, Z_1..Z_n`` (deterministic) or coefficient rows (regression)."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            if self.mode == "deterministic":
                wr.writerow(["t", "Y"] + [f"Z{i + 1}" for i in range(self.n)])
                for k, t in enumerate(self.grid):
                    wr.writerow([repr(float(t)), repr(float(self.y[k]))] + ["0.0"] * self.n)
            else:
                nb = self.basis.size
                head = ["t", "Y0_mean", "R2"] + [f"y_coef{j}" for j in range(nb)]
                head += [f"z{i + 1}_coef{j}" for i in range(self.n) for j in range(nb)]
                wr.writerow(head)
                r2 = self.diagnostics.get("r2", [np.nan] * len(self.grid))
                for k, t in enumerate(self.grid):
                    row = [repr(float(t)), repr(float(self.y[k, 0])), repr(float(r2[k]))]
                    row += [repr(float(v)) for v in self.y[k]]
                    row += [repr(float(self.z[k, j, i])) for i in range(self.n) for j in range(nb)]
                    wr.writerow(row)


def _cap(z, z_cap):
    if not np.isfinite(z_cap):
        return z
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norm > z_cap, z_cap / norm, 1.0)
    return z * factor


def _rk4_step(f, t, y, h, z0):
    # integrates Y' = -f(t, Y, 0) from t to t + h (h < 0 goes backward)
    def g(s, v):
        return -np.atleast_1d(f(s, np.atleast_1d(v), z0))[0]

    k1 = g(t, y)
    k2 = g(t + h / 2, y + h * k1 / 2)
    k3 = g(t + h / 2, y + h * k2 / 2)
    k4 = g(t + h, y + h * k3)
    return y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6


def _interval(f, t1, t0, y1, z0, tol, depth):
    h = t0 - t1
    full = _rk4_step(f, t1, y1, h, z0)
    if tol is None:
        if not np.isfinite(full):
            raise StiffnessFailure(f"non-finite value at t={t0}")
        return full
    mid = _rk4_step(f, t1, y1, h / 2, z0)
    half = _rk4_step(f, t1 + h / 2, mid, h / 2, z0)
    if not (np.isfinite(full) and np.isfinite(half)):
        if depth >= MAX_REFINE_DEPTH:
            raise StiffnessFailure(f"non-finite value near t={t0}")
    elif abs(half - full) <= tol * (1.0 + abs(half)):
        return half
    if depth >= MAX_REFINE_DEPTH:
        raise StiffnessFailure(f"step size underflow near t={t0}")
    tm = t1 + h / 2
    ym = _interval(f, t1, tm, y1, z0, tol, depth + 1)
    return _interval(f, tm, t0, ym, z0, tol, depth + 1)


def solve_deterministic(driver, terminal: float, grid, tol: float | None = 1e-12) -> BsdeSolution:
    """Backward ODE ``Y' = -f(t, Y, 0)``, ``Y_T = terminal``, with ``Z = 0``.

    Each grid interval gets one RK4 step checked against two half steps; an
    interval whose discrepancy exceeds ``tol * (1 + |Y|)`` is bisected.
    ``tol=None`` disables refinement (plain fixed-step RK4, used for
    convergence studies).
    """
    grid = check_grid(grid)
    n = getattr(driver, "n", 1)
    z0 = np.zeros((1, n))
    y = np.empty(len(grid))
    y[-1] = float(terminal)
    for k in range(len(grid) - 2, -1, -1):
        y[k] = _interval(driver, grid[k + 1], grid[k], y[k + 1], z0, tol, 0)
    return BsdeSolution(
        grid=grid, mode="deterministic", y=y, z=np.zeros((len(grid), n)), terminal=float(terminal), n=n,
        diagnostics={"y_max_abs": float(np.max(np.abs(y)))},
    )


def _lstsq(phi, target, k):
    coef, _, rank, _ = np.linalg.lstsq(phi, target, rcond=None)
    if rank < phi.shape[1]:
        raise RegressionSingular(f"regression basis is rank deficient at step {k} (rank {rank} < {phi.shape[1]})")
    return coef


def _fit(phi, target, k, t):
    if t <= 0:
        # all paths share W_0 = 0: the conditional expectation is the sample mean
        coef = np.zeros((phi.shape[1],) + target.shape[1:])
        coef[0] = target.mean(axis=0)
        return coef
    return _lstsq(phi, target, k)


def solve_lsmc(
    driver,
    terminal,
    batch: BrownianBatch,
    basis: PolynomialBasis | None = None,
    z_cap: float | None = None,
    max_iter: int = 50,
    tol: float = 1e-10,
) -> BsdeSolution:
    """Least-squares Monte Carlo backward induction.

    At step ``k``::

        Z_k = -(1/dt) E[Y_{k+1} dW_k | W_k]
        Y_k = E[Y_{k+1} | W_k] + f(t_k, Y_k, Z_k) dt      (fixed point in Y_k)

    ``terminal`` is a scalar, an array over paths, or a callable of ``W_T``.
    ``z_cap`` truncates ``|Z|`` before it enters the driver.
    """
    n = batch.n
    basis = basis or PolynomialBasis(n, 3)
    if batch.path_count < 10 * basis.size:
        raise ValueError(f"need at least {10 * basis.size} paths for a basis of size {basis.size}")
    z_cap = np.inf if z_cap is None else float(z_cap)
    grid = batch.grid
    N = batch.steps
    W = batch.paths()
    if callable(terminal):
        y_next = np.broadcast_to(np.asarray(terminal(W[:, N]), dtype=float), (batch.path_count,)).copy()
    else:
        y_next = np.broadcast_to(np.asarray(terminal, dtype=float), (batch.path_count,)).copy()
    nb = basis.size
    y_coef = np.zeros((N + 1, nb))
    z_coef = np.zeros((N + 1, nb, n))
    r2 = np.full(N + 1, np.nan)
    iters = np.zeros(N + 1, dtype=int)
    y_coef[N] = _fit(basis.design(W[:, N], grid[N]), y_next, N, grid[N])
    y_max = float(np.max(np.abs(y_next))) if y_next.size else 0.0
    for k in range(N - 1, -1, -1):
        t, dt = grid[k], grid[k + 1] - grid[k]
        wk = W[:, k]
        phi = basis.design(wk, t)
        ce_coef = _fit(phi, y_next, k, t)
        cond = phi @ ce_coef
        zc = -_fit(phi, y_next[:, None] * batch.increments[:, k, :], k, t) / dt
        z = _cap(phi @ zc, z_cap)
        resid = y_next - cond
        var = np.var(y_next)
        r2[k] = 1.0 - np.var(resid) / var if var > 0 else 1.0
        y = cond.copy()
        for it in range(1, max_iter + 1):
            y_new = cond + dt * np.asarray(driver(t, y, z, wk), dtype=float)
            if not np.all(np.isfinite(y_new)):
                raise FixedPointDivergence(f"non-finite iterate at t={t}")
            err = float(np.max(np.abs(y_new - y)))
            y = y_new
            if err <= tol:
                break
        else:
            raise FixedPointDivergence(f"fixed point did not converge at t={t} (last change {err:.3g})")
        iters[k] = it
        y_coef[k] = _fit(phi, y, k, t)
        z_coef[k] = zc
        y_next = y
        y_max = max(y_max, float(np.max(np.abs(y))))
    if callable(terminal) or np.ndim(terminal) == 0:
        term = terminal
    else:
        # pathwise terminal values: keep the regression representation at T
        term = _TerminalFit(basis, y_coef[N], grid[N])
    return BsdeSolution(
        grid=grid, mode="regression", y=y_coef, z=z_coef, terminal=term, n=n, basis=basis, z_cap=z_cap,
        diagnostics={"r2": r2, "iterations": iters, "y_max_abs": y_max, "path_count": batch.path_count},
    )


class _TerminalFit:
    def __init__(self, basis, coef, t):
        self.basis, self.coef, self.t = basis, coef, t

    def __call__(self, w):
        return self.basis.design(w, self.t) @ self.coef


def lsmc_standard_error(driver, terminal, batch: BrownianBatch, groups: int = 10, **kwargs):
    """Spread of ``Y_0`` over disjoint path groups: returns ``(mean, standard error)``."""
    idx = np.array_split(np.arange(batch.path_count), groups)
    y0 = np.array([solve_lsmc(driver, terminal, batch.subset(i), **kwargs).y0 for i in idx])
    return float(y0.mean()), float(y0.std(ddof=1) / np.sqrt(groups))


@dataclass(frozen=True)
class BmoDiagnostic:
    estimate: float
    per_time: np.ndarray
    threshold: float = np.inf

    @property
    def exceeds(self) -> bool:
        return self.estimate > self.threshold


def bmo_estimate(solution: BsdeSolution, batch: BrownianBatch, threshold: float = np.inf) -> BmoDiagnostic:
    """Grid-time proxy for ``sup_tau ess sup E[int_tau^T |Z|^2 dt | F_tau]``.

    The tail integral is accumulated pathwise (left-point rule), regressed on
    the state at each grid time, and the largest fitted value is reported.
    The sup only runs over paths whose standardized state lies within
    ``BMO_STATE_RADIUS``: a polynomial fit extrapolated to the few extreme
    paths would otherwise dominate.  Diagnostic only.
    """
    N = solution.steps
    if solution.mode == "deterministic":
        return BmoDiagnostic(0.0, np.zeros(N + 1), threshold)
    W = batch.paths()
    dt = np.diff(solution.grid)
    zsq = np.stack([np.sum(solution.z_at(k, W[:, k]) ** 2, axis=1) for k in range(N)], axis=1)
    tail = np.zeros((batch.path_count, N + 1))
    tail[:, :N] = np.cumsum((zsq * dt)[:, ::-1], axis=1)[:, ::-1]
    per_time = np.zeros(N + 1)
    for k in range(N):
        phi = solution.basis.design(W[:, k], solution.grid[k])
        fitted = phi @ _fit(phi, tail[:, k], k, solution.grid[k])
        t = solution.grid[k]
        if t > 0:
            inside = np.all(np.abs(W[:, k]) <= BMO_STATE_RADIUS * np.sqrt(t), axis=1)
            fitted = fitted[inside] if inside.any() else fitted
        per_time[k] = max(float(np.max(fitted)), 0.0)
    return BmoDiagnostic(float(per_time.max()), per_time, threshold)
