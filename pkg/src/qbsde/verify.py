"""Statistical verification of optimality.

For any strategy the value process

    R_t = e^{-beta t} V(t, X_t, Y_t) + int_0^t alpha e^{-beta s} u(c_s) ds

starts at the analytic optimal value and ends at the realized utility.  It is
a supermartingale for every admissible strategy and a martingale for the
optimal one, so Monte Carlo utility must sit at or below the analytic value,
and match it for the optimal strategy.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from .bsde import BsdeSolution
from .constraints import FullSpace
from .drivers import UtilityProblem, h_exponential, h_log
from .errors import PreconditionViolated
from .market import MarketModel
from .strategy import WealthPaths

BAND_SIGMAS = 3.0
VIOLATION_SIGMAS = 4.0
ROUNDING_FLOOR = 1e-12  # relative slack so zero-variance runs are not judged on rounding noise


def analytic_value(problem: UtilityProblem, solution: BsdeSolution | float, model: MarketModel) -> float:
    """Optimal value from ``Y_0``: exponential, log and power closed forms."""
    y0 = solution if isinstance(solution, (int, float)) else solution.y0
    x = problem.x
    if problem.family == "exponential":
        return -math.exp(-problem.gamma * (h_exponential(0.0, model.r, model.T) * x + y0))
    if problem.family == "log":
        return h_log(0.0, problem.alpha, problem.beta, model.T) * (math.log(x) - y0)
    g = problem.gamma
    return x**g * math.exp(-y0) / g


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    se: float
    violations: int = 0
    path_count: int = 0


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    m = len(values)
    if m == 0:
        return float("nan"), float("inf")
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(m)) if m > 1 else float("inf")
    return mean, se


def _trapezoid_cumulative(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    dt = np.diff(grid)
    out = np.zeros_like(values)
    out[:, 1:] = np.cumsum(0.5 * (values[:, 1:] + values[:, :-1]) * dt, axis=1)
    return out


def _discount(problem, grid):
    return np.exp(-problem.beta * grid)


def _terminal_wealth(problem, paths: WealthPaths, model: MarketModel, W_T=None):
    if problem.family == "exponential":
        return paths.x[:, -1] + paths.y[:, -1]  # Y_T is the endowment E
    return paths.x[:, -1]


def pathwise_utility(problem: UtilityProblem, paths: WealthPaths, model: MarketModel) -> np.ndarray:
    """Realized utility per path: trapezoidal consumption integral plus terminal term."""
    disc = _discount(problem, paths.grid)
    with np.errstate(invalid="ignore"):
        running = problem.alpha * disc[None, :] * problem.utility(paths.c)
        integral = _trapezoid_cumulative(running, paths.grid)[:, -1]
    terminal = disc[-1] * problem.utility(_terminal_wealth(problem, paths, model))
    return integral + terminal


def expected_utility_mc(problem: UtilityProblem, paths: WealthPaths, model: MarketModel) -> MonteCarloEstimate:
    values = pathwise_utility(problem, paths, model)
    bad = int(np.sum(~np.isfinite(values)))
    if bad:
        return MonteCarloEstimate(float("-inf"), float("inf"), bad, len(values))
    mean, se = _mean_se(values)
    return MonteCarloEstimate(mean, se, 0, len(values))


def r_process(problem: UtilityProblem, solution: BsdeSolution, paths: WealthPaths, model: MarketModel) -> np.ndarray:
    """Value process ``R`` per path and grid time, shape ``(paths, N+1)``.

    ``paths.y`` holds the ``Y`` values seen along each path, so ``R_0`` is the
    analytic value and ``R_T`` the realized utility.
    """
    grid = paths.grid
    disc = _discount(problem, grid)[None, :]
    X, Y = paths.x, paths.y
    with np.errstate(invalid="ignore", divide="ignore"):
        if problem.family == "exponential":
            h = np.asarray(h_exponential(grid, model.r, model.T))[None, :]
            level = -np.exp(-problem.gamma * (h * X + Y))
        elif problem.family == "log":
            h = np.asarray(h_log(grid, problem.alpha, problem.beta, model.T))[None, :]
            level = h * (np.log(X) - Y)
        else:
            g = problem.gamma
            level = np.power(X, g) * np.exp(-Y) / g
        running = problem.alpha * disc * problem.utility(paths.c)
    return disc * level + _trapezoid_cumulative(running, grid)


@dataclass(frozen=True)
class SupermartingaleStats:
    mean_increment: np.ndarray
    se: np.ndarray
    flagged: np.ndarray
    total_drift: float
    total_se: float
    sigmas: float = VIOLATION_SIGMAS

    @property
    def violation(self) -> bool:
        return bool(np.any(self.flagged))

    @property
    def trend(self) -> str:
        if not np.isfinite(self.total_se):
            return "undetermined"
        if self.total_drift < -BAND_SIGMAS * self.total_se:
            return "decreasing"
        if self.total_drift > BAND_SIGMAS * self.total_se:
            return "increasing"
        return "flat"


def supermartingale_test(r_values, sigmas: float = VIOLATION_SIGMAS) -> SupermartingaleStats:
    """Per-interval mean increments of ``R``; an interval is flagged when its mean exceeds ``+sigmas * se``."""
    r = np.atleast_2d(np.asarray(r_values, dtype=float))
    if r.shape[1] < 2:
        raise ValueError("need at least two grid times")
    inc = np.diff(r, axis=1)
    m = r.shape[0]
    mean = inc.mean(axis=0)
    if m > 1:
        se = inc.std(axis=0, ddof=1) / math.sqrt(m)
    else:
        se = np.full(inc.shape[1], np.inf)
    scale = max(1.0, float(np.max(np.abs(r))))
    flagged = mean > sigmas * se + ROUNDING_FLOOR * scale
    if m == 1:
        flagged[:] = False
    total = r[:, -1] - r[:, 0]
    total_mean, total_se = _mean_se(total)
    return SupermartingaleStats(mean, se, flagged, total_mean, total_se, sigmas)


@dataclass
class VerificationReport:
    label: str
    analytic_value: float
    mc_value: float
    mc_se: float
    supermartingale: SupermartingaleStats
    optimal: bool
    violations: int = 0
    positivity_violations: int = 0
    bound_violations: int = 0
    band: float = BAND_SIGMAS
    notes: list = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.analytic_value - self.mc_value

    @property
    def _slack(self) -> float:
        return self.band * self.mc_se + ROUNDING_FLOOR * max(1.0, abs(self.analytic_value))

    @property
    def within_band(self) -> bool:
        if not np.isfinite(self.mc_se):
            return True
        return abs(self.gap) <= self._slack

    @property
    def dominated(self) -> bool:
        """Strictly below the analytic value by more than the band."""
        if not np.isfinite(self.mc_se):
            return False
        return self.gap > self._slack

    @property
    def above_value(self) -> bool:
        """Breaks ``E[R_T] <= R_0`` beyond noise."""
        if not np.isfinite(self.mc_se):
            return False
        return -self.gap > self._slack

    @property
    def martingale_flag(self) -> bool:
        sm = self.supermartingale
        flat = not np.isfinite(sm.total_se) or abs(sm.total_drift) <= (
            self.band * sm.total_se + ROUNDING_FLOOR * max(1.0, abs(self.analytic_value)))
        return flat and not sm.violation

    @property
    def status(self) -> str:
        if self.optimal:
            return "martingale" if (self.martingale_flag and self.within_band) else "VIOLATION"
        if self.above_value or self.supermartingale.violation:
            return "VIOLATION"
        return "dominated" if self.dominated else "within-noise"

    @property
    def invariant_violation(self) -> bool:
        return self.status == "VIOLATION" or self.positivity_violations > 0 or self.violations > 0

    def row(self) -> dict:
        return {
            "label": self.label,
            "optimal": self.optimal,
            "analytic_value": self.analytic_value,
            "mc_value": self.mc_value,
            "mc_se": self.mc_se,
            "gap": self.gap,
            "martingale_flag": self.martingale_flag,
            "flagged_intervals": int(np.sum(self.supermartingale.flagged)),
            "total_drift": self.supermartingale.total_drift,
            "total_drift_se": self.supermartingale.total_se,
            "positivity_violations": self.positivity_violations,
            "bound_violations": self.bound_violations,
            "status": self.status,
        }


def verify_paths(problem, solution, paths: WealthPaths, model, optimal: bool,
                 band: float = BAND_SIGMAS) -> VerificationReport:
    est = expected_utility_mc(problem, paths, model)
    R = r_process(problem, solution, paths, model)
    sm = supermartingale_test(R)
    return VerificationReport(
        label=paths.label,
        analytic_value=analytic_value(problem, solution, model),
        mc_value=est.mean,
        mc_se=est.se,
        supermartingale=sm,
        optimal=optimal,
        violations=est.violations,
        positivity_violations=paths.positivity_violations,
        bound_violations=paths.bound_violations,
        band=band,
    )


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_reports_csv(reports, path) -> None:
    rows = [r.row() for r in reports]
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(list(rows[0]))
        for row in rows:
            wr.writerow([_fmt(v) for v in row.values()])


def write_supermartingale_csv(report: VerificationReport, grid, path) -> None:
    sm = report.supermartingale
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t_start", "t_end", "mean_increment", "se", "flagged"])
        for k in range(len(sm.mean_increment)):
            wr.writerow([_fmt(float(grid[k])), _fmt(float(grid[k + 1])), _fmt(float(sm.mean_increment[k])),
                         _fmt(float(sm.se[k])), _fmt(bool(sm.flagged[k]))])


def summary_text(reports) -> str:
    lines = []
    for r in reports:
        lines.append(
            f"{r.label:<24} analytic={r.analytic_value:.8g} mc={r.mc_value:.8g} se={r.mc_se:.3g} "
            f"gap={r.gap:.3g} drift={r.supermartingale.total_drift:.3g} status={r.status}"
        )
    return "\n".join(lines) + "\n"


# --- closed-form benchmark ---------------------------------------------------


@dataclass(frozen=True)
class MertonBenchmark:
    y0: float
    value: float
    investment: object  # callable t -> p (absolute for exponential, relative for CRRA)
    consumption: object  # callable (t, x) -> c (absolute for exponential, relative for CRRA)


def _require(cond, msg):
    if not cond:
        raise PreconditionViolated(msg)


def merton_oracle(model: MarketModel, problem: UtilityProblem) -> MertonBenchmark:
    """Unconstrained constant-coefficient benchmark computed by direct quadrature.

    With constant coefficients all three backward equations reduce to scalar
    ODEs that are linear after a change of variable (``u = exp(-Y/(1-gamma))``
    for power utility), so ``Y_0`` is one integral of known functions.
    """
    _require(model.is_constant, "merton_oracle needs constant coefficients")
    _require(isinstance(problem.investment_set, FullSpace), "merton_oracle needs an unconstrained investment set")
    _require(isinstance(problem.consumption_set, FullSpace), "merton_oracle needs unconstrained consumption")
    _require(problem.alpha > 0, "alpha must be positive")
    theta = np.atleast_1d(model.theta(0.0))
    th2 = float(theta @ theta)
    r, T, a, b, x = model.r, model.T, problem.alpha, problem.beta, problem.x
    e = float(model.income_at(0.0))
    quad = dict(epsabs=1e-14, epsrel=1e-13, limit=200)

    if problem.family == "exponential":
        g = problem.gamma
        E = float(model.endowment_at())

        def hx(s):
            return h_exponential(s, r, T)

        def a_fn(s):
            h = hx(s)
            return th2 / (2 * g) + h * e + (h / g) * (math.log(h / a) - 1.0) + b / g

        h0 = hx(0.0)
        integral = integrate.quad(lambda s: math.exp(-r * s) * a_fn(s) / hx(s), 0.0, T, **quad)[0]
        y0 = h0 * integral + h0 * math.exp(-r * T) * E
        value = -math.exp(-g * (h0 * x + y0))
        return MertonBenchmark(y0, value, lambda t: theta / (g * hx(t)), None)

    _require(float(np.max(np.abs(model.endowment_at()))) == 0.0, "CRRA utility needs a zero endowment")
    if problem.family == "log":
        def hl(s):
            return h_log(s, a, b, T)

        def g_fn(s):
            h = hl(s)
            return -0.5 * th2 - (a / h) * (math.log(a / h) - 1.0) - r - e

        h0 = hl(0.0)
        y0 = integrate.quad(lambda s: math.exp(-b * s) * hl(s) * g_fn(s), 0.0, T, **quad)[0] / h0
        value = h0 * (math.log(x) - y0)
        return MertonBenchmark(y0, value, lambda t: theta.copy(), lambda t, xx: a / hl(t))

    g = problem.gamma
    _require(g < 1 and g != 0, "power utility needs gamma in (-inf, 0) or (0, 1)")
    d = 1.0 - g
    k = -th2 / (2 * d) - r - e + b / g
    kappa = g * k / d
    ad = a ** (1.0 / d)

    def u(t):
        tail = integrate.quad(lambda s: math.exp(-kappa * (s - t)), t, T, **quad)[0]
        return math.exp(-kappa * (T - t)) + ad * tail

    y0 = -d * math.log(u(0.0))
    value = x**g * math.exp(-y0) / g

    def consumption(t, xx=None):
        y = -d * math.log(u(t))
        return ad * math.exp(y / d)

    return MertonBenchmark(y0, value, lambda t: theta / d, consumption)
