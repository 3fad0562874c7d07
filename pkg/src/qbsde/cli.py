"""Scenario-file driven command line: ``solve``, ``verify`` and ``sweep``.

A scenario is a YAML file with five blocks::

    market:        # coefficients; constants or {times: [...], values: [...]} tables
      n: 1
      m: 1
      T: 1.0       # years
      r: 0.0       # continuously compounded, per year
      mu: [0.05]   # per year
      sigma: [[0.2]]
      income: 0.0      # absolute rate (exponential) or fraction of wealth (log, power)
      endowment: 0.0   # terminal lump sum, exponential utility only
    utility:
      family: log      # exponential | log | power
      gamma: null
      alpha: 1.0
      beta: 0.0        # per year
      x: 1.0
    constraints:
      investment: {type: box, lower: [0.0], upper: [0.1]}   # Brownian coordinates
      consumption: {type: full}
    numerics:
      steps: 256
      paths: 100000
      seed: 20240101
    outputs:
      directory: out

Every omitted numeric field takes its value from ``DEFAULTS``.  The run
manifest written next to the outputs is itself a valid scenario file, so
rerunning it reproduces every CSV bit for bit.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bsde import PolynomialBasis, bmo_estimate, solve_deterministic, solve_lsmc
from .constraints import Ball, Box, FinitePointSet, FullSpace, HalfSpace, Polytope, TimeDependent, UnionOfConvex
from .drivers import UtilityProblem, make_driver
from .errors import ConfigError, QbsdeError
from .market import CoefficientBounds, MarketModel, Tabulated, sample_brownian, uniform_grid
from .strategy import optimal_strategy, perturbation_battery, simulate
from .verify import (
    BAND_SIGMAS,
    analytic_value,
    summary_text,
    verify_paths,
    write_reports_csv,
    write_supermartingale_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VIOLATION = 0, 2, 3, 4

# Single source for every numeric default.
DEFAULTS = {
    "market": {
        "n": 1,
        "m": 1,
        "T": 1.0,
        "r": 0.0,
        "income": 0.0,
        "endowment": 0.0,
        "eig_min": 1e-10,
        "bounds": {"mu": None, "sigma": None, "theta": None, "income": None, "endowment": None},
    },
    "utility": {"gamma": None, "alpha": 1.0, "beta": 0.0, "x": 1.0},
    "constraints": {"investment": {"type": "full"}, "consumption": {"type": "full"}},
    "numerics": {
        "steps": 256,
        "paths": 100_000,
        "seed": 20240101,
        "solver": "auto",  # auto | deterministic | lsmc
        "ode_tol": 1e-12,
        "basis_degree": 3,
        "z_cap": None,  # None: 10 * (declared theta bound + 1), or no cap without a bound
        "fixed_point_tol": 1e-10,
        "fixed_point_iter": 50,
        "band_sigmas": BAND_SIGMAS,
        "perturbations": True,
    },
    "outputs": {"directory": "out", "paths_csv": False, "paths_csv_max": 100},
}

BLOCKS = tuple(DEFAULTS)
SET_PARAMS = {
    "full": (),
    "box": ("lower", "upper"),
    "ball": ("center", "radius"),
    "halfspace": ("normal", "offset"),
    "polytope": ("vertices",),
    "points": ("points",),
    "union": ("members",),
    "time_dependent": ("times", "sets"),
}


# --- loading ------------------------------------------------------------------


def _line_map(node, prefix="", out=None):
    """Dotted key path -> 1-based line number, from a composed YAML node."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[path] = key.start_mark.line + 1
            _line_map(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}.{i}"
            out[path] = item.start_mark.line + 1
            _line_map(item, path, out)
    return out


class Scenario:
    """Resolved scenario: raw blocks merged over ``DEFAULTS`` plus source line numbers."""

    def __init__(self, data: dict, lines: dict | None = None, source: str = "<memory>"):
        self.lines = lines or {}
        self.source = source
        if not isinstance(data, dict):
            raise ConfigError("scenario must be a mapping of blocks")
        if "scenario" in data and isinstance(data["scenario"], dict):  # a run manifest
            self.lines = {k[len("scenario."):]: v for k, v in self.lines.items() if k.startswith("scenario.")}
            data = data["scenario"]
        unknown = sorted(set(data) - set(BLOCKS))
        if unknown:
            raise ConfigError(f"unknown block {unknown[0]!r}", unknown[0], self.lines.get(unknown[0]))
        data = {k: (v if k == "outputs" else _coerce_numbers(v)) for k, v in data.items()}
        self.data = _merge(DEFAULTS, data)

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read scenario file: {exc}") from exc
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"YAML syntax error: {exc}", line=mark.line + 1 if mark else None) from exc
        if data is None:
            raise ConfigError("empty scenario file")
        return cls(data, _line_map(node) if node is not None else {}, str(path))

    def get(self, dotted: str):
        cur = self.data
        for part in dotted.split("."):
            if isinstance(cur, dict) and part in cur:
                cur = cur[part]
            elif isinstance(cur, list) and part.isdigit() and int(part) < len(cur):
                cur = cur[int(part)]
            else:
                raise ConfigError("unknown parameter", dotted, None)
        return cur

    def set(self, dotted: str, value) -> "Scenario":
        """Copy with one field replaced; a scalar replacing a list is broadcast over it."""
        self.get(dotted)
        new = copy.deepcopy(self.data)
        parts = dotted.split(".")
        cur = new
        for part in parts[:-1]:
            cur = cur[int(part)] if isinstance(cur, list) else cur[part]
        key = int(parts[-1]) if isinstance(cur, list) else parts[-1]
        old = cur[key]
        if isinstance(old, list) and not isinstance(value, list):
            value = [value] * len(old)
        cur[key] = value
        return Scenario(new, self.lines, self.source)

    def line(self, dotted):
        return self.lines.get(dotted)

    def error(self, message, dotted):
        return ConfigError(message, dotted, self.line(dotted))


def _coerce_numbers(v):
    """YAML reads ``1e-10`` and ``inf`` as strings; turn numeric strings into floats."""
    if isinstance(v, dict):
        return {k: _coerce_numbers(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_coerce_numbers(x) for x in v]
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def _merge(base, over):
    if not isinstance(base, dict) or not isinstance(over, dict):
        return copy.deepcopy(over)
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if k in base and isinstance(base[k], dict) and isinstance(v, dict) else copy.deepcopy(v)
    return out


# --- building library objects ---------------------------------------------------


def _num(sc: Scenario, dotted: str, value=None, *, allow_none=False):
    value = sc.get(dotted) if value is None else value
    if value is None:
        if allow_none:
            return None
        raise sc.error("a number is required", dotted)
    if isinstance(value, bool):
        raise sc.error("expected a number, got a boolean", dotted)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise sc.error(f"expected a number, got {value!r}", dotted) from None


def _array(sc: Scenario, dotted: str, value=None):
    value = sc.get(dotted) if value is None else value
    try:
        return np.asarray(_floatify(value), dtype=float)
    except (TypeError, ValueError):
        raise sc.error(f"expected numbers, got {value!r}", dotted) from None


def _floatify(v):
    if isinstance(v, list):
        return [_floatify(x) for x in v]
    if v is None:
        return math.nan
    if isinstance(v, bool):
        raise TypeError("boolean")
    return float(v)


def _int(sc, dotted):
    v = sc.get(dotted)
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise sc.error(f"expected an integer, got {v!r}", dotted)
    try:
        f = float(v)
    except ValueError:
        raise sc.error(f"expected an integer, got {v!r}", dotted) from None
    if f != int(f):
        raise sc.error(f"expected an integer, got {v!r}", dotted)
    return int(f)


def _coefficient(sc, dotted):
    v = sc.get(dotted)
    if isinstance(v, dict):
        missing = [k for k in ("times", "values") if k not in v]
        if missing:
            raise sc.error(f"tabulated coefficient needs {missing[0]!r}", dotted)
        return Tabulated(_array(sc, dotted + ".times"), _array(sc, dotted + ".values"))
    return _array(sc, dotted)


def build_set(sc: Scenario, dotted: str, dim: int):
    cfg = sc.get(dotted)
    if not isinstance(cfg, dict) or "type" not in cfg:
        raise sc.error("constraint needs a 'type'", dotted)
    kind = cfg["type"]
    if kind not in SET_PARAMS:
        raise sc.error(f"unknown constraint type {kind!r}; choose from {sorted(SET_PARAMS)}", dotted + ".type")
    for p in SET_PARAMS[kind]:
        if p not in cfg:
            raise sc.error(f"constraint type {kind!r} needs parameter {p!r}", dotted)
    try:
        if kind == "full":
            cset = FullSpace(dim)
        elif kind == "box":
            lo = np.where(np.isnan(_array(sc, dotted + ".lower")), -np.inf, _array(sc, dotted + ".lower"))
            hi = np.where(np.isnan(_array(sc, dotted + ".upper")), np.inf, _array(sc, dotted + ".upper"))
            cset = Box(lo, hi)
        elif kind == "ball":
            cset = Ball(_array(sc, dotted + ".center"), _num(sc, dotted + ".radius"))
        elif kind == "halfspace":
            cset = HalfSpace(_array(sc, dotted + ".normal"), _num(sc, dotted + ".offset"))
        elif kind == "polytope":
            cset = Polytope(_array(sc, dotted + ".vertices"))
        elif kind == "points":
            cset = FinitePointSet(_array(sc, dotted + ".points"))
        elif kind == "union":
            cset = UnionOfConvex([build_set(sc, f"{dotted}.members.{i}", dim) for i in range(len(cfg["members"]))])
        else:
            sets = [build_set(sc, f"{dotted}.sets.{i}", dim) for i in range(len(cfg["sets"]))]
            cset = TimeDependent(_array(sc, dotted + ".times"), sets)
    except ConfigError:
        raise
    except (QbsdeError, ValueError) as exc:
        raise sc.error(str(exc), dotted) from exc
    if cset.dim != dim:
        raise sc.error(f"constraint has dimension {cset.dim}, expected {dim}", dotted)
    return cset


def build_model(sc: Scenario, family: str) -> MarketModel:
    b = "market"
    bounds = sc.get(b + ".bounds") or {}
    try:
        cb = CoefficientBounds(**{k: _num(sc, f"{b}.bounds.{k}", allow_none=True) for k in bounds})
    except TypeError as exc:
        raise sc.error(str(exc), b + ".bounds") from exc
    n, m = _int(sc, b + ".n"), _int(sc, b + ".m")
    for key in ("mu", "sigma"):
        if key not in sc.data[b]:
            raise sc.error(f"market needs {key!r}", b)
    try:
        return MarketModel(
            n=n,
            m=m,
            T=_num(sc, b + ".T"),
            r=_num(sc, b + ".r"),
            mu=_coefficient(sc, b + ".mu"),
            sigma=_coefficient(sc, b + ".sigma"),
            income=_coefficient(sc, b + ".income"),
            income_mode="absolute" if family == "exponential" else "relative",
            endowment=_num(sc, b + ".endowment"),
            bounds=cb,
            eig_min=_num(sc, b + ".eig_min"),
        )
    except ConfigError:
        raise
    except (QbsdeError, ValueError) as exc:
        raise sc.error(str(exc), b) from exc


def build_problem(sc: Scenario, n: int) -> UtilityProblem:
    u = "utility"
    family = sc.get(u + ".family") if "family" in sc.data[u] else None
    if family is None:
        raise sc.error("utility needs 'family'", u)
    inv = build_set(sc, "constraints.investment", n)
    cons = build_set(sc, "constraints.consumption", 1)
    try:
        return UtilityProblem(
            family=family,
            alpha=_num(sc, u + ".alpha"),
            beta=_num(sc, u + ".beta"),
            x=_num(sc, u + ".x"),
            gamma=_num(sc, u + ".gamma", allow_none=True),
            consumption_set=cons,
            investment_set=inv,
        )
    except QbsdeError as exc:
        raise sc.error(str(exc), u) from exc
    except ValueError as exc:
        field = u + ".gamma" if "gamma" in str(exc) else u
        if "consumption" in str(exc):
            field = "constraints.consumption"
        raise sc.error(str(exc), field) from exc


def _validate(sc: Scenario):
    num = sc.data["numerics"]
    if num.get("solver") not in ("auto", "deterministic", "lsmc"):
        raise sc.error("solver must be auto, deterministic or lsmc", "numerics.solver")
    if _int(sc, "numerics.steps") < 1:
        raise sc.error("steps must be at least 1", "numerics.steps")
    if _int(sc, "numerics.paths") < 1:
        raise sc.error("paths must be at least 1", "numerics.paths")
    if _int(sc, "numerics.seed") < 0:
        raise sc.error("seed must be non-negative", "numerics.seed")


class Run:
    """Library objects built from a scenario."""

    def __init__(self, sc: Scenario):
        _validate(sc)
        self.scenario = sc
        family = sc.data["utility"].get("family")
        self.model = build_model(sc, family if family in ("exponential", "log", "power") else "log")
        self.problem = build_problem(sc, self.model.n)
        try:
            self.driver = make_driver(self.model, self.problem)
        except ValueError as exc:
            raise sc.error(str(exc), "constraints.investment") from exc
        num = sc.data["numerics"]
        self.steps = _int(sc, "numerics.steps")
        self.paths = _int(sc, "numerics.paths")
        self.seed = _int(sc, "numerics.seed")
        self.grid = uniform_grid(self.model.T, self.steps)
        solver = num["solver"]
        if solver == "auto":
            solver = "deterministic" if self.model.is_deterministic else "lsmc"
        self.solver = solver
        self.band = _num(sc, "numerics.band_sigmas")
        self._batch = None

    @property
    def batch(self):
        if self._batch is None:
            self._batch = sample_brownian(self.model, self.grid, self.paths, self.seed)
        return self._batch

    def solve(self):
        sc = self.scenario
        term = self.driver.terminal()
        if self.solver == "deterministic":
            return solve_deterministic(self.driver, term, self.grid, tol=_num(sc, "numerics.ode_tol", allow_none=True))
        basis = PolynomialBasis(self.model.n, _int(sc, "numerics.basis_degree"))
        z_cap = _num(sc, "numerics.z_cap", allow_none=True)
        if z_cap is None and self.model.bounds.theta is not None:
            z_cap = 10.0 * (self.model.bounds.theta + 1.0)
        return solve_lsmc(
            self.driver, term, self.batch, basis=basis,
            z_cap=z_cap,
            max_iter=_int(sc, "numerics.fixed_point_iter"),
            tol=_num(sc, "numerics.fixed_point_tol"),
        )


# --- outputs ------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def write_manifest(run: Run, out: Path, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "seed": run.seed,
        "solver": run.solver,
        "scenario": _jsonable(run.scenario.data),
    }
    if extra:
        manifest.update(_jsonable(extra))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(run: Run) -> Path:
    out = Path(str(run.scenario.data["outputs"]["directory"]))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _solution_summary(run, solution) -> list:
    value = analytic_value(run.problem, solution, run.model)
    lines = [
        f"family        {run.problem.family}",
        f"solver        {solution.mode}",
        f"steps         {run.steps}",
        f"Y0            {solution.y0!r}",
        f"analytic      {value!r}",
    ]
    bound = run.driver.y_bound()
    y_max = solution.diagnostics["y_max_abs"] if solution.mode == "regression" else float(np.max(np.abs(solution.y)))
    lines.append(f"max |Y|       {y_max!r}")
    if bound is not None:
        flag = "EXCEEDED" if y_max > bound else "ok"
        lines.append(f"Y bound       {bound!r} ({flag})")
    if solution.mode == "regression":
        d = solution.diagnostics
        lines.append(f"max FP iters  {int(np.max(d['iterations']))}")
        lines.append(f"BMO proxy     {bmo_estimate(solution, run.batch).estimate!r}")
    return lines


def cmd_solve(sc: Scenario):
    run = Run(sc)
    solution = run.solve()
    out = _out_dir(run)
    solution.to_csv(out / "solution.csv")
    write_manifest(run, out, "solve")
    lines = _solution_summary(run, solution)
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return solution


def cmd_verify(sc: Scenario):
    run = Run(sc)
    solution = run.solve()
    out = _out_dir(run)
    strategy = optimal_strategy(run.model, run.problem, solution)
    batch = run.batch
    optimal_paths = simulate(strategy, batch)
    reports = [verify_paths(run.problem, solution, optimal_paths, run.model, True, run.band)]
    if sc.data["numerics"].get("perturbations", True):
        for pert in perturbation_battery(strategy):
            reports.append(verify_paths(run.problem, solution, simulate(pert, batch), run.model, False, run.band))
    solution.to_csv(out / "solution.csv")
    write_reports_csv(reports, out / "report.csv")
    write_supermartingale_csv(reports[0], run.grid, out / "supermartingale.csv")
    outputs = sc.data["outputs"]
    if outputs.get("paths_csv"):
        optimal_paths.to_csv(out / "paths.csv", max_paths=_int(sc, "outputs.paths_csv_max"))
    write_manifest(run, out, "verify")
    text = "\n".join(_solution_summary(run, solution)) + "\n\n" + summary_text(reports)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return reports


def parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(yaml.safe_load(tok) if tok.lower() not in ("inf", "+inf", "-inf", "nan") else float(tok))
        except yaml.YAMLError:
            out.append(tok)
    if not out:
        raise ConfigError("empty value list", "--values")
    return out


def cmd_sweep(sc: Scenario, param: str, values: list):
    sc.get(param)  # the swept parameter must exist
    base = Run(sc)
    out = _out_dir(base)
    rows = []
    for v in values:
        run = Run(sc.set(param, v))
        solution = run.solve()
        rows.append((v, solution.y0, analytic_value(run.problem, solution, run.model)))
    with (out / "sweep.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["parameter", "value", "Y0", "analytic_value"])
        for v, y0, val in rows:
            wr.writerow([param, repr(float(v)) if isinstance(v, (int, float)) else str(v), repr(y0), repr(val)])
    write_manifest(base, out, "sweep", {"sweep": {"param": param, "values": values}})
    for v, y0, val in rows:
        print(f"{param}={v}  Y0={y0!r}  analytic={val!r}")
    return rows


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbsde", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("scenario", help="scenario YAML file or a previous run manifest")
        p.add_argument("--seed", type=int, help="override numerics.seed")
        p.add_argument("--paths", type=int, help="override numerics.paths")
        p.add_argument("--steps", type=int, help="override numerics.steps")
        p.add_argument("--out", help="override outputs.directory")

    common(sub.add_parser("solve", help="solve the BSDE and write Y/Z"))
    common(sub.add_parser("verify", help="solve, simulate and run the optimality checks"))
    sweep = sub.add_parser("sweep", help="solve once per value of one parameter")
    common(sweep)
    sweep.add_argument("--param", required=True, help="dotted field name, e.g. utility.gamma")
    sweep.add_argument("--values", required=True, help="comma-separated values, e.g. 0.1,0.5,inf")
    return parser


def apply_overrides(sc: Scenario, args) -> Scenario:
    for flag, dotted in (("seed", "numerics.seed"), ("paths", "numerics.paths"),
                         ("steps", "numerics.steps"), ("out", "outputs.directory")):
        value = getattr(args, flag)
        if value is not None:
            sc = sc.set(dotted, value)
    return sc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = apply_overrides(Scenario.load(args.scenario), args)
        if args.command == "solve":
            cmd_solve(sc)
        elif args.command == "verify":
            reports = cmd_verify(sc)
            if any(r.invariant_violation for r in reports):
                print("verification: invariant violation", file=sys.stderr)
                return EXIT_VIOLATION
        else:
            cmd_sweep(sc, args.param, parse_values(args.values))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except QbsdeError as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
