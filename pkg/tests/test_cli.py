from __future__ import annotations

import csv
import json
import math

import pytest
import yaml

from qbsde.cli import (
    DEFAULTS,
    EXIT_CONFIG,
    EXIT_OK,
    Run,
    Scenario,
    cmd_solve,
    cmd_sweep,
    cmd_verify,
    main,
    parse_values,
)
from qbsde.errors import ConfigError
from qbsde.verify import merton_oracle

from conftest import scenario_path


def _write(tmp_path, data, name="s.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data), encoding="utf-8")
    return p


def _log_scenario(tmp_path, **numerics):
    data = yaml.safe_load(scenario_path("log.yaml").read_text())
    data["numerics"].update({"steps": 32, "paths": 2000, **numerics})
    data["outputs"]["directory"] = str(tmp_path / "out")
    return data


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_solve_log_matches_oracle(tmp_path, capsys):
    sc = Scenario.load(str(_write(tmp_path, _log_scenario(tmp_path))))
    sol = cmd_solve(sc)
    run = Run(sc)
    assert abs(sol.y0 - merton_oracle(run.model, run.problem).y0) < 1e-6
    assert "Y0" in capsys.readouterr().out
    assert (tmp_path / "out" / "solution.csv").exists()
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 20240101 and manifest["command"] == "solve"


def test_power_gamma_one_is_config_error(tmp_path, capsys):
    data = yaml.safe_load(scenario_path("power.yaml").read_text())
    data["utility"]["gamma"] = 1.0
    assert main(["solve", str(_write(tmp_path, data))]) == EXIT_CONFIG
    assert "utility.gamma" in capsys.readouterr().err


def test_missing_box_bound_reports_field(tmp_path, capsys):
    data = _log_scenario(tmp_path)
    data["constraints"]["investment"] = {"type": "box", "lower": [0.0]}
    assert main(["solve", str(_write(tmp_path, data))]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "constraints.investment" in err and "line" in err


def test_unknown_block_rejected(tmp_path):
    data = _log_scenario(tmp_path)
    data["extras"] = {"a": 1}
    with pytest.raises(ConfigError):
        Scenario.load(str(_write(tmp_path, data)))


def test_solve_is_deterministic(tmp_path):
    p = _write(tmp_path, _log_scenario(tmp_path))
    assert main(["solve", str(p)]) == EXIT_OK
    first = (tmp_path / "out" / "solution.csv").read_bytes()
    assert main(["solve", str(p)]) == EXIT_OK
    assert (tmp_path / "out" / "solution.csv").read_bytes() == first


def test_sweep_box_upper_is_monotone(tmp_path):
    data = _log_scenario(tmp_path)
    data["constraints"]["investment"] = {"type": "box", "lower": [0.0], "upper": [0.1]}
    sc = Scenario.load(str(_write(tmp_path, data)))
    rows = cmd_sweep(sc, "constraints.investment.upper", parse_values("0.1,0.5,inf"))
    values = [r[2] for r in rows]
    assert values[0] <= values[1] <= values[2]
    assert len(_rows(tmp_path / "out" / "sweep.csv")) == 3


def test_sweep_single_value_matches_solve(tmp_path):
    sc = Scenario.load(str(_write(tmp_path, _log_scenario(tmp_path))))
    rows = cmd_sweep(sc, "utility.alpha", [1.0])
    assert rows[0][1] == cmd_solve(sc).y0


def test_sweep_gamma_three_finite_rows(tmp_path):
    data = yaml.safe_load(scenario_path("power.yaml").read_text())
    data["numerics"]["steps"] = 32
    data["outputs"]["directory"] = str(tmp_path / "out")
    sc = Scenario.load(str(_write(tmp_path, data)))
    rows = cmd_sweep(sc, "utility.gamma", parse_values("0.3,0.5,0.7"))
    assert len(rows) == 3 and all(math.isfinite(r[1]) and math.isfinite(r[2]) for r in rows)


def test_sweep_unknown_parameter(tmp_path):
    p = _write(tmp_path, _log_scenario(tmp_path))
    assert main(["sweep", str(p), "--param", "utility.nothing", "--values", "1"]) == EXIT_CONFIG


def test_verify_single_path(tmp_path):
    p = _write(tmp_path, _log_scenario(tmp_path))
    assert main(["verify", str(p), "--paths", "1"]) == EXIT_OK
    rows = _rows(tmp_path / "out" / "report.csv")
    assert all(r["mc_se"] == "inf" for r in rows)
    assert all(r["flagged_intervals"] == "0" for r in rows)


def test_verify_battery_and_manifest_rerun(tmp_path):
    p = _write(tmp_path, _log_scenario(tmp_path, paths=4000))
    sc = Scenario.load(str(p))
    reports = cmd_verify(sc)
    assert [r.label for r in reports] == ["optimal", "p_x0", "p_x2", "c_x1.5"]
    assert reports[0].status == "martingale"
    assert not any(r.invariant_violation for r in reports)
    out = tmp_path / "out"
    first = {n: (out / n).read_bytes() for n in ("report.csv", "supermartingale.csv", "solution.csv")}
    assert main(["verify", str(out / "manifest.json")]) == EXIT_OK
    for name, content in first.items():
        assert (out / name).read_bytes() == content


def test_overrides_and_defaults(tmp_path):
    minimal = {"market": {"mu": [0.05], "sigma": [[0.2]]}, "utility": {"family": "log"},
               "outputs": {"directory": str(tmp_path / "o")}}
    p = _write(tmp_path, minimal)
    sc = Scenario.load(str(p))
    assert sc.get("numerics.steps") == DEFAULTS["numerics"]["steps"]
    assert main(["solve", str(p), "--steps", "8", "--out", str(tmp_path / "o2")]) == EXIT_OK
    assert len(_rows(tmp_path / "o2" / "solution.csv")) == 9
    no_mu = {"utility": {"family": "log"}, "outputs": {"directory": str(tmp_path / "o")}}
    assert main(["solve", str(_write(tmp_path, no_mu, "bad.yaml"))]) == EXIT_CONFIG


def test_parse_values():
    assert parse_values("0.1, 0.5,inf") == [0.1, 0.5, math.inf]
    with pytest.raises(ConfigError):
        parse_values(" , ")
